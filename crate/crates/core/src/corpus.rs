//! Deterministic synthetic labeled audio and conditioning features.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dsp::{Waveform, DEFAULT_SAMPLE_RATE};
use crate::error::{invalid, Result};
use crate::sampler::ConditioningSequence;

pub const NUM_CLASSES: usize = 4;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["tone", "chirp", "noise_bursts", "harmonic_stack"];

/// Condition lengths mirrored from the feature-count study.
pub const CONDITION_PRESETS: [usize; 3] = [1, 5, 212];

#[derive(Clone, Debug, PartialEq)]
pub struct ToyClip {
    pub wave: Waveform,
    pub label: usize,
    pub seed: u64,
}

fn clip_rng(label: usize, seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ ((label as u64 + 1) << 56))
}

/// Renders one clip of class `label`; every acoustic parameter is drawn from
/// a range owned by that class alone.
pub fn render_clip(label: usize, seed: u64, samples: usize) -> Result<ToyClip> {
    if label >= NUM_CLASSES {
        return Err(invalid!("label {label} is not one of {NUM_CLASSES} classes"));
    }
    let sr = DEFAULT_SAMPLE_RATE as f64;
    let mut rng = clip_rng(label, seed);
    let phase0 = rng.random_range(0.0..TAU);
    let s: Vec<f64> = match label {
        0 => {
            let f = rng.random_range(300.0..600.0);
            (0..samples).map(|i| 0.5 * (TAU * f * i as f64 / sr + phase0).sin()).collect()
        }
        1 => {
            let f0 = rng.random_range(1000.0..1500.0);
            let rate = rng.random_range(1500.0..2500.0);
            (0..samples)
                .map(|i| {
                    let t = i as f64 / sr;
                    0.5 * (TAU * (f0 * t + 0.5 * rate * t * t) + phase0).sin()
                })
                .collect()
        }
        2 => {
            let period = rng.random_range(0.10..0.20);
            let duty = rng.random_range(0.3..0.5);
            let offset = rng.random_range(0.0..period);
            (0..samples)
                .map(|i| {
                    let t = i as f64 / sr + offset;
                    let n: f64 = rng.sample(StandardNormal);
                    if (t % period) < duty * period {
                        (0.25 * n).clamp(-1.0, 1.0)
                    } else {
                        0.0
                    }
                })
                .collect()
        }
        _ => {
            let f0 = rng.random_range(150.0..250.0);
            (0..samples)
                .map(|i| {
                    let t = i as f64 / sr;
                    (1..=5).map(|h| 0.2 / h as f64 * (TAU * f0 * h as f64 * t + phase0 * h as f64).sin()).sum()
                })
                .collect()
        }
    };
    Ok(ToyClip {
        wave: Waveform::new(s, DEFAULT_SAMPLE_RATE)?,
        label,
        seed,
    })
}

/// `n_per_class` clips of each class, ordered by label.
pub fn gen_toy_corpus(n_per_class: usize, duration_s: f64, seed: u64) -> Result<Vec<ToyClip>> {
    if n_per_class == 0 {
        return Err(invalid!("need at least one clip per class"));
    }
    if !(duration_s > 0.0) {
        return Err(invalid!("duration must be positive"));
    }
    let samples = (duration_s * DEFAULT_SAMPLE_RATE as f64).round() as usize;
    let mut out = Vec::with_capacity(NUM_CLASSES * n_per_class);
    for label in 0..NUM_CLASSES {
        for i in 0..n_per_class {
            out.push(render_clip(label, seed.wrapping_mul(1_000_003).wrapping_add(i as u64), samples)?);
        }
    }
    Ok(out)
}

/// Class embedding table: `NUM_CLASSES` orthogonal rows of norm `√D`,
/// independent of any caller seed.
pub fn class_embeddings(dim: usize) -> Result<Vec<Vec<f64>>> {
    if dim < NUM_CLASSES {
        return Err(invalid!("orthogonal class embeddings need D ≥ {NUM_CLASSES}, got {dim}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0xc1a5_5e5);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(NUM_CLASSES);
    while rows.len() < NUM_CLASSES {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for r in &rows {
            let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            for (x, y) in v.iter_mut().zip(r) {
                *x -= dot * y;
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            rows.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    let scale = (dim as f64).sqrt();
    Ok(rows.into_iter().map(|r| r.into_iter().map(|x| x * scale).collect()).collect())
}

/// The class embedding repeated `n` times plus seeded uniform jitter in
/// `[-jitter, jitter)`.
pub fn gen_condition_features(label: usize, n: usize, dim: usize, seed: u64, jitter: f64) -> Result<ConditioningSequence> {
    if label >= NUM_CLASSES {
        return Err(invalid!("label {label} is not one of {NUM_CLASSES} classes"));
    }
    if n == 0 {
        return Err(invalid!("condition needs at least one feature row"));
    }
    if !(jitter >= 0.0) {
        return Err(invalid!("jitter must be non-negative"));
    }
    let base = &class_embeddings(dim)?[label];
    let mut rng = clip_rng(label, seed ^ 0xfea7);
    let mut features = Vec::with_capacity(n * dim);
    for _ in 0..n {
        for &b in base {
            let j = if jitter > 0.0 { rng.random_range(-jitter..jitter) } else { 0.0 };
            features.push(b + j);
        }
    }
    ConditioningSequence::new(n, dim, features)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_labels_and_determinism() {
        let a = gen_toy_corpus(2, 1.0, 7).unwrap();
        assert_eq!(a.iter().map(|c| c.label).collect::<Vec<_>>(), vec![0, 0, 1, 1, 2, 2, 3, 3]);
        assert_eq!(a, gen_toy_corpus(2, 1.0, 7).unwrap());
        assert_ne!(a[0].wave, a[1].wave);
        assert!(a.iter().all(|c| c.wave.len() == 22050 && c.wave.samples.iter().all(|s| s.abs() <= 1.0)));
    }

    #[test]
    fn embeddings_are_orthogonal() {
        let e = class_embeddings(16).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let dot: f64 = e[i].iter().zip(&e[j]).map(|(a, b)| a * b).sum();
                let want = if i == j { 16.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-9, "{i},{j}: {dot}");
            }
        }
        assert!(class_embeddings(3).is_err());
    }

    #[test]
    fn condition_presets() {
        for n in CONDITION_PRESETS {
            let c = gen_condition_features(1, n, 8, 3, 0.1).unwrap();
            assert_eq!((c.n, c.dim), (n, 8));
        }
        let c = gen_condition_features(2, 5, 8, 3, 0.0).unwrap();
        assert!((1..5).all(|r| c.row(r) == c.row(0)));
        assert_eq!(c, gen_condition_features(2, 5, 8, 3, 0.0).unwrap());
    }
}
