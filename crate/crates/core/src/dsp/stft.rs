//! Centered, reflect-padded STFT with a periodic Hann window and its
//! least-squares inverse.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::Waveform;
use crate::error::{invalid, Result};

/// A `bins × frames` grid of linear magnitudes, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Magnitudes {
    pub bins: usize,
    pub frames: usize,
    pub values: Vec<f64>,
}

impl Magnitudes {
    pub fn zeros(bins: usize, frames: usize) -> Self {
        Self {
            bins,
            frames,
            values: vec![0.0; bins * frames],
        }
    }

    pub fn get(&self, bin: usize, frame: usize) -> f64 {
        self.values[bin * self.frames + frame]
    }

    /// Index of the largest bin in one frame.
    pub fn argmax_bin(&self, frame: usize) -> usize {
        (0..self.bins)
            .max_by(|&a, &b| self.get(a, frame).total_cmp(&self.get(b, frame)))
            .unwrap_or(0)
    }

    /// Truncates trailing frames or appends zero frames to reach `frames`.
    pub fn fit_frames(&self, frames: usize) -> Self {
        let mut out = Self::zeros(self.bins, frames);
        let keep = frames.min(self.frames);
        for b in 0..self.bins {
            out.values[b * frames..b * frames + keep]
                .copy_from_slice(&self.values[b * self.frames..b * self.frames + keep]);
        }
        out
    }
}

pub(crate) fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

/// Maps an index of the reflect-padded signal back onto the source.
fn reflect(p: usize, pad: usize, n: usize) -> usize {
    let i = p as isize - pad as isize;
    if i < 0 {
        (-i) as usize
    } else if (i as usize) < n {
        i as usize
    } else {
        2 * (n - 1) - i as usize
    }
}

fn check_framing(len: usize, n_fft: usize, hop: usize) -> Result<()> {
    if len == 0 {
        return Err(invalid!("empty waveform"));
    }
    if hop == 0 {
        return Err(invalid!("hop must be positive"));
    }
    if !n_fft.is_power_of_two() {
        return Err(invalid!("n_fft {n_fft} is not a power of two"));
    }
    if hop > n_fft {
        return Err(invalid!("hop {hop} exceeds n_fft {n_fft}"));
    }
    if len <= n_fft / 2 {
        return Err(invalid!(
            "waveform of {len} samples is too short for reflect padding of {}",
            n_fft / 2
        ));
    }
    Ok(())
}

/// Number of centered frames for a signal of `len` samples.
pub fn frame_count(len: usize, hop: usize) -> usize {
    1 + len / hop
}

pub(crate) struct StftPlan {
    pub n_fft: usize,
    pub hop: usize,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl StftPlan {
    pub fn new(n_fft: usize, hop: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            n_fft,
            hop,
            window: hann(n_fft),
            forward: planner.plan_fft_forward(n_fft),
            inverse: planner.plan_fft_inverse(n_fft),
        }
    }

    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Half spectra, frame-major: `frames × bins`.
    pub fn analyze(&self, x: &[f64]) -> Result<(usize, Vec<Complex64>)> {
        check_framing(x.len(), self.n_fft, self.hop)?;
        let pad = self.n_fft / 2;
        let frames = frame_count(x.len(), self.hop);
        let bins = self.bins();
        let mut out = Vec::with_capacity(frames * bins);
        let mut buf = vec![Complex64::new(0.0, 0.0); self.n_fft];
        for t in 0..frames {
            for (n, c) in buf.iter_mut().enumerate() {
                *c = Complex64::new(x[reflect(t * self.hop + n, pad, x.len())] * self.window[n], 0.0);
            }
            self.forward.process(&mut buf);
            out.extend_from_slice(&buf[..bins]);
        }
        Ok((frames, out))
    }

    /// Least-squares signal of length `len` whose STFT is closest to the
    /// given half spectra.
    pub fn synthesize(&self, spectra: &[Complex64], frames: usize, len: usize) -> Result<Vec<f64>> {
        check_framing(len, self.n_fft, self.hop)?;
        let bins = self.bins();
        let n = self.n_fft;
        let pad = n / 2;
        let mut acc = vec![0.0; len];
        let mut wsum = vec![0.0; len];
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for t in 0..frames {
            let half = &spectra[t * bins..(t + 1) * bins];
            buf[..bins].copy_from_slice(half);
            // Hermitian extension; DC and Nyquist must be real for a real frame.
            buf[0].im = 0.0;
            buf[n / 2].im = 0.0;
            for k in 1..n / 2 {
                buf[n - k] = half[k].conj();
            }
            self.inverse.process(&mut buf);
            for (i, c) in buf.iter().enumerate() {
                let p = t * self.hop + i;
                if p >= len + 2 * pad {
                    break;
                }
                let src = reflect(p, pad, len);
                let w = self.window[i];
                acc[src] += w * c.re / n as f64;
                wsum[src] += w * w;
            }
        }
        Ok(acc
            .iter()
            .zip(&wsum)
            .map(|(&a, &w)| if w > 1e-10 { a / w } else { 0.0 })
            .collect())
    }
}

/// Complex half-spectrum STFT, frame-major `frames × (n_fft/2 + 1)`.
pub fn stft(wave: &Waveform, n_fft: usize, hop: usize) -> Result<(usize, Vec<Complex64>)> {
    check_framing(wave.len(), n_fft, hop)?;
    StftPlan::new(n_fft, hop).analyze(&wave.samples)
}

/// Linear STFT magnitudes, `(n_fft/2 + 1) × T` with `T = 1 + ⌊N/hop⌋`, then
/// trimmed or zero-padded to `target_frames` when given.
pub fn stft_magnitude(wave: &Waveform, n_fft: usize, hop: usize, target_frames: Option<usize>) -> Result<Magnitudes> {
    let (frames, spectra) = stft(wave, n_fft, hop)?;
    let bins = n_fft / 2 + 1;
    let mut mag = Magnitudes::zeros(bins, frames);
    for t in 0..frames {
        for b in 0..bins {
            mag.values[b * frames + t] = spectra[t * bins + b].norm();
        }
    }
    Ok(match target_frames {
        Some(f) if f != frames => mag.fit_frames(f),
        _ => mag,
    })
}

/// Least-squares inverse STFT producing `len` samples.
pub fn istft(spectra: &[Complex64], frames: usize, n_fft: usize, hop: usize, len: usize) -> Result<Vec<f64>> {
    StftPlan::new(n_fft, hop).synthesize(spectra, frames, len)
}
