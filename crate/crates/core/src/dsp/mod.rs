//! Waveform ↔ log-mel conversion and Griffin-Lim vocoding.

mod griffin_lim;
mod mel;
mod spec_file;
mod stft;
mod wav;

pub use griffin_lim::{griffin_lim, griffin_lim_with_trace, spectral_convergence};
pub(crate) use mel::filterbank_for;
pub use mel::{build_mel_filterbank, center_crop_time, mel_to_linear, wave_to_logmel, MelFilterbank, MelScale};
pub use spec_file::{read_spec, read_spec_file, write_spec, write_spec_file};
pub use stft::{istft, stft, stft_magnitude, Magnitudes};
pub use wav::{read_wav, resample_linear, write_wav};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 22050;

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(invalid!("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(invalid!("sample {i} is not finite"));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn silence(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Truncates or zero-pads to exactly `len` samples.
    pub fn fit_length(mut self, len: usize) -> Self {
        self.samples.resize(len, 0.0);
        self
    }
}

/// Parameters of the log-mel front end.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DspParams {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    /// Linear-magnitude floor applied before the logarithm.
    pub log_floor: f64,
    pub mel_scale: MelScale,
    /// Frame count every clip is trimmed or padded to after framing.
    pub clip_frames: Option<usize>,
}

impl Default for DspParams {
    fn default() -> Self {
        Self {
            sample_rate: DEFAULT_SAMPLE_RATE,
            n_fft: 1024,
            hop: 256,
            n_mels: 80,
            fmin: 125.0,
            fmax: 7600.0,
            log_floor: 1e-5,
            mel_scale: MelScale::Htk,
            clip_frames: None,
        }
    }
}

impl DspParams {
    /// 10-second clips framed to 860 columns.
    pub fn ten_second_clips() -> Self {
        Self {
            clip_frames: Some(860),
            ..Self::default()
        }
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn log_floor_value(&self) -> f64 {
        self.log_floor.ln()
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(invalid!("sample rate must be positive"));
        }
        if !self.n_fft.is_power_of_two() {
            return Err(invalid!("n_fft {} is not a power of two", self.n_fft));
        }
        if self.hop == 0 || self.hop > self.n_fft {
            return Err(invalid!("hop {} must be in 1..={}", self.hop, self.n_fft));
        }
        if self.n_mels == 0 {
            return Err(invalid!("n_mels must be positive"));
        }
        if !(self.fmin > 0.0 && self.fmin < self.fmax) {
            return Err(invalid!("need 0 < fmin < fmax, got {} / {}", self.fmin, self.fmax));
        }
        if self.fmax > self.sample_rate as f64 / 2.0 {
            return Err(invalid!("fmax {} exceeds Nyquist {}", self.fmax, self.sample_rate as f64 / 2.0));
        }
        if !(self.log_floor > 0.0) {
            return Err(invalid!("log floor must be positive"));
        }
        Ok(())
    }
}

/// An `n_mels × frames` grid of natural-log mel magnitudes, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub params: DspParams,
    pub frames: usize,
    pub values: Vec<f64>,
}

impl MelSpectrogram {
    pub fn new(params: DspParams, frames: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != params.n_mels * frames {
            return Err(crate::error::shape_err!(
                "{} values for a {}x{} spectrogram",
                values.len(),
                params.n_mels,
                frames
            ));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(invalid!("spectrogram value {i} is not finite"));
        }
        Ok(Self { params, frames, values })
    }

    /// A spectrogram where every cell sits at the log floor.
    pub fn floor(params: DspParams, frames: usize) -> Self {
        let v = params.log_floor_value();
        let n = params.n_mels * frames;
        Self {
            params,
            frames,
            values: vec![v; n],
        }
    }

    pub fn n_mels(&self) -> usize {
        self.params.n_mels
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.params.n_mels, self.frames)
    }

    pub fn get(&self, mel: usize, frame: usize) -> f64 {
        self.values[mel * self.frames + frame]
    }

    pub fn row(&self, mel: usize) -> &[f64] {
        &self.values[mel * self.frames..(mel + 1) * self.frames]
    }

    /// Mel row with the largest total log energy.
    pub fn dominant_row(&self) -> usize {
        (0..self.n_mels())
            .map(|r| (r, self.row(r).iter().sum::<f64>()))
            .fold((0, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best })
            .0
    }
}
