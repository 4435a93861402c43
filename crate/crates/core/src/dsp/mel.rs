use std::sync::OnceLock;

use nalgebra::DMatrix;

use super::stft::{stft_magnitude, Magnitudes};
use super::{DspParams, MelSpectrogram, Waveform};
use crate::error::{invalid, shape_err, Result};

/// Hz ↔ mel conversion used to space the filterbank.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MelScale {
    /// `m = 2595 · log10(1 + f / 700)`
    #[default]
    Htk,
    /// Linear below 1 kHz, logarithmic above.
    Slaney,
}

impl MelScale {
    pub fn hz_to_mel(self, f: f64) -> f64 {
        match self {
            MelScale::Htk => 2595.0 * (1.0 + f / 700.0).log10(),
            MelScale::Slaney => {
                let f_sp = 200.0 / 3.0;
                let min_log_hz = 1000.0;
                let min_log_mel = min_log_hz / f_sp;
                let logstep = 6.4f64.ln() / 27.0;
                if f >= min_log_hz {
                    min_log_mel + (f / min_log_hz).ln() / logstep
                } else {
                    f / f_sp
                }
            }
        }
    }

    pub fn mel_to_hz(self, m: f64) -> f64 {
        match self {
            MelScale::Htk => 700.0 * (10f64.powf(m / 2595.0) - 1.0),
            MelScale::Slaney => {
                let f_sp = 200.0 / 3.0;
                let min_log_hz = 1000.0;
                let min_log_mel = min_log_hz / f_sp;
                let logstep = 6.4f64.ln() / 27.0;
                if m >= min_log_mel {
                    min_log_hz * (logstep * (m - min_log_mel)).exp()
                } else {
                    f_sp * m
                }
            }
        }
    }
}

/// Triangular mel filters over the one-sided FFT bins.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    pub n_mels: usize,
    pub n_bins: usize,
    /// `n_mels × n_bins`, row-major.
    pub weights: Vec<f64>,
    pub center_freqs: Vec<f64>,
    pinv: OnceLock<Vec<f64>>,
}

impl PartialEq for MelFilterbank {
    fn eq(&self, other: &Self) -> bool {
        self.n_mels == other.n_mels && self.weights == other.weights && self.center_freqs == other.center_freqs
    }
}

impl MelFilterbank {
    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.n_bins..(m + 1) * self.n_bins]
    }

    /// `n_bins × n_mels` Moore-Penrose pseudo-inverse, computed once.
    pub fn pseudo_inverse(&self) -> &[f64] {
        self.pinv.get_or_init(|| {
            let w = DMatrix::from_row_slice(self.n_mels, self.n_bins, &self.weights);
            let p = w
                .pseudo_inverse(1e-10)
                .expect("SVD of a finite filterbank converges");
            let mut out = Vec::with_capacity(self.n_bins * self.n_mels);
            for r in 0..self.n_bins {
                for c in 0..self.n_mels {
                    out.push(p[(r, c)]);
                }
            }
            out
        })
    }

    /// `weights · magnitudes`, giving `n_mels × frames`.
    pub fn apply(&self, mag: &Magnitudes) -> Vec<f64> {
        assert_eq!(mag.bins, self.n_bins);
        crate::tensor::matmul(&self.weights, &mag.values, self.n_mels, self.n_bins, mag.frames)
    }
}

/// Triangles spaced uniformly on the mel scale between `fmin` and `fmax`,
/// each scaled so its largest sampled weight is exactly 1.
pub fn build_mel_filterbank(
    n_fft: usize,
    n_mels: usize,
    fmin: f64,
    fmax: f64,
    sample_rate: u32,
    scale: MelScale,
) -> Result<MelFilterbank> {
    let nyquist = sample_rate as f64 / 2.0;
    if !(fmin > 0.0 && fmin < fmax) {
        return Err(invalid!("need 0 < fmin < fmax, got {fmin} / {fmax}"));
    }
    if fmax > nyquist {
        return Err(invalid!("fmax {fmax} exceeds Nyquist {nyquist}"));
    }
    if n_mels == 0 || n_fft < 2 {
        return Err(invalid!("need n_mels ≥ 1 and n_fft ≥ 2"));
    }
    let n_bins = n_fft / 2 + 1;
    let (mlo, mhi) = (scale.hz_to_mel(fmin), scale.hz_to_mel(fmax));
    let step = (mhi - mlo) / (n_mels + 1) as f64;
    let edges: Vec<f64> = (0..n_mels + 2).map(|i| scale.mel_to_hz(mlo + step * i as f64)).collect();
    let bin_hz = sample_rate as f64 / n_fft as f64;
    let mut weights = vec![0.0; n_mels * n_bins];
    for m in 0..n_mels {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let row = &mut weights[m * n_bins..(m + 1) * n_bins];
        for (k, w) in row.iter_mut().enumerate() {
            let f = k as f64 * bin_hz;
            let up = (f - lo) / (center - lo);
            let down = (hi - f) / (hi - center);
            *w = up.min(down).max(0.0);
        }
        let peak = row.iter().copied().fold(0.0, f64::max);
        if peak <= 0.0 {
            return Err(invalid!(
                "mel band {m} ({lo:.1}–{hi:.1} Hz) contains no FFT bin; use fewer bands or a larger n_fft"
            ));
        }
        row.iter_mut().for_each(|w| *w /= peak);
    }
    Ok(MelFilterbank {
        n_mels,
        n_bins,
        weights,
        center_freqs: edges[1..=n_mels].to_vec(),
        pinv: OnceLock::new(),
    })
}

pub(crate) fn filterbank_for(params: &DspParams) -> Result<MelFilterbank> {
    build_mel_filterbank(
        params.n_fft,
        params.n_mels,
        params.fmin,
        params.fmax,
        params.sample_rate,
        params.mel_scale,
    )
}

/// `ln(max(filterbank · |STFT|, floor))`, framed per `params.clip_frames`.
pub fn wave_to_logmel(wave: &Waveform, params: &DspParams) -> Result<MelSpectrogram> {
    params.validate()?;
    if wave.sample_rate != params.sample_rate {
        return Err(invalid!(
            "waveform is {} Hz, front end expects {} Hz",
            wave.sample_rate,
            params.sample_rate
        ));
    }
    if wave.len() < params.n_fft {
        return Err(invalid!(
            "waveform of {} samples is shorter than one {}-sample frame",
            wave.len(),
            params.n_fft
        ));
    }
    let fb = filterbank_for(params)?;
    let mag = stft_magnitude(wave, params.n_fft, params.hop, params.clip_frames)?;
    let floor = params.log_floor;
    let values = fb.apply(&mag).into_iter().map(|v| v.max(floor).ln()).collect();
    MelSpectrogram::new(params.clone(), mag.frames, values)
}

/// Keeps `target` frames, dropping `⌊(T − target)/2⌋` from the start.
pub fn center_crop_time(spec: &MelSpectrogram, target: usize) -> Result<MelSpectrogram> {
    if target > spec.frames {
        return Err(invalid!("cannot crop {} frames to {target}", spec.frames));
    }
    let start = (spec.frames - target) / 2;
    let mut values = Vec::with_capacity(spec.n_mels() * target);
    for m in 0..spec.n_mels() {
        values.extend_from_slice(&spec.row(m)[start..start + target]);
    }
    Ok(MelSpectrogram {
        params: spec.params.clone(),
        frames: target,
        values,
    })
}

/// Linear magnitudes `max(pinv(W) · exp(spec), 0)`.
pub fn mel_to_linear(spec: &MelSpectrogram, fb: &MelFilterbank) -> Result<Magnitudes> {
    if spec.n_mels() != fb.n_mels {
        return Err(shape_err!("spectrogram has {} mel rows, filterbank {}", spec.n_mels(), fb.n_mels));
    }
    if spec.params.n_fft / 2 + 1 != fb.n_bins {
        return Err(shape_err!("spectrogram n_fft {} does not match filterbank", spec.params.n_fft));
    }
    let lin: Vec<f64> = spec.values.iter().map(|v| v.exp()).collect();
    let values = crate::tensor::matmul(fb.pseudo_inverse(), &lin, fb.n_bins, fb.n_mels, spec.frames)
        .into_iter()
        .map(|v| v.max(0.0))
        .collect();
    Ok(Magnitudes {
        bins: fb.n_bins,
        frames: spec.frames,
        values,
    })
}
