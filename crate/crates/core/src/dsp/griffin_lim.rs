use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;

use super::stft::{Magnitudes, StftPlan};
use super::Waveform;
use crate::error::{invalid, Result};

/// `‖|S| − M‖_F / ‖M‖_F` over the two-sided spectrum: interior bins count
/// twice, DC and Nyquist once. Zero when `M` is all zero and `S` matches.
pub fn spectral_convergence(spectra: &[Complex64], target: &Magnitudes) -> f64 {
    let bins = target.bins;
    let mut num = 0.0;
    let mut den = 0.0;
    for t in 0..target.frames {
        for b in 0..bins {
            let w = if b == 0 || b == bins - 1 { 1.0 } else { 2.0 };
            let m = target.get(b, t);
            let d = spectra[t * bins + b].norm() - m;
            num += w * d * d;
            den += w * m * m;
        }
    }
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}

fn project(spectra: &[Complex64], target: &Magnitudes) -> Vec<Complex64> {
    let bins = target.bins;
    let mut out = Vec::with_capacity(spectra.len());
    for t in 0..target.frames {
        for b in 0..bins {
            let s = spectra[t * bins + b];
            let n = s.norm();
            let phase = if n > 0.0 { s / n } else { Complex64::new(1.0, 0.0) };
            out.push(phase * target.get(b, t));
        }
    }
    out
}

/// Momentum applied to the projected spectra between iterations.
const MOMENTUM: f64 = 0.99;

/// Griffin-Lim phase retrieval with safeguarded momentum: an accelerated
/// step is kept only when it does not raise the error, otherwise the plain
/// alternating-projection step is taken and momentum restarts. Returns the waveform and the spectral
/// convergence after the random-phase initialisation and after every
/// iteration (`iters + 1` values).
pub fn griffin_lim_with_trace(
    magnitude: &Magnitudes,
    n_fft: usize,
    hop: usize,
    sample_rate: u32,
    iters: usize,
    seed: u64,
) -> Result<(Waveform, Vec<f64>)> {
    if magnitude.bins != n_fft / 2 + 1 {
        return Err(invalid!("{} bins do not match n_fft {n_fft}", magnitude.bins));
    }
    if let Some(v) = magnitude.values.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(invalid!("magnitudes must be finite and non-negative, found {v}"));
    }
    if magnitude.frames == 0 {
        return Err(invalid!("magnitude grid has no frames"));
    }
    let plan = StftPlan::new(n_fft, hop);
    let len = (magnitude.frames - 1) * hop;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bins = magnitude.bins;
    let mut spectra = Vec::with_capacity(bins * magnitude.frames);
    for t in 0..magnitude.frames {
        for b in 0..bins {
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            spectra.push(Complex64::from_polar(magnitude.get(b, t), angle));
        }
    }
    let mut signal = plan.synthesize(&spectra, magnitude.frames, len)?;
    let (_, mut current) = plan.analyze(&signal)?;
    let mut err = spectral_convergence(&current, magnitude);
    let mut trace = Vec::with_capacity(iters + 1);
    trace.push(err);
    let mut prev_target: Option<Vec<Complex64>> = None;
    for _ in 0..iters {
        let target = project(&current, magnitude);
        let mut accepted = false;
        if let Some(prev) = &prev_target {
            let pushed: Vec<Complex64> = target
                .iter()
                .zip(prev)
                .map(|(&t, &p)| t + (t - p) * MOMENTUM)
                .collect();
            let cand_signal = plan.synthesize(&pushed, magnitude.frames, len)?;
            let cand = plan.analyze(&cand_signal)?.1;
            let cand_err = spectral_convergence(&cand, magnitude);
            if cand_err <= err {
                signal = cand_signal;
                current = cand;
                err = cand_err;
                accepted = true;
            }
        }
        if !accepted {
            signal = plan.synthesize(&target, magnitude.frames, len)?;
            current = plan.analyze(&signal)?.1;
            err = spectral_convergence(&current, magnitude);
        }
        prev_target = if accepted || prev_target.is_none() { Some(target) } else { None };
        trace.push(err);
    }
    Ok((Waveform::new(signal, sample_rate)?, trace))
}

pub fn griffin_lim(
    magnitude: &Magnitudes,
    n_fft: usize,
    hop: usize,
    sample_rate: u32,
    iters: usize,
    seed: u64,
) -> Result<Waveform> {
    griffin_lim_with_trace(magnitude, n_fft, hop, sample_rate, iters, seed).map(|(w, _)| w)
}
