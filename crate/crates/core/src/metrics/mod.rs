//! Fréchet distance and mean KL over a stand-in spectrogram classifier.

mod classifier;

use std::time::Instant;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

pub use classifier::{
    classifier_accuracy, load_classifier, read_classifier, save_classifier, train_classifier, write_classifier, ClassifierConfig,
    ClassifierModel, ClassifierTrainConfig,
};

use crate::dsp::MelSpectrogram;
use crate::error::{invalid, shape_err, Error, Result};

/// Floor applied to the second distribution inside the KL logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    /// Row-major `d × d`, symmetric.
    pub cov: Vec<f64>,
    pub n: usize,
}

impl FeatureStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Mean and unbiased (`n − 1`) covariance, symmetrized.
pub fn gaussian_stats(features: &[Vec<f64>]) -> Result<FeatureStats> {
    let n = features.len();
    if n < 2 {
        return Err(invalid!("need at least 2 feature vectors, got {n}"));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(shape_err!("feature vectors differ in length"));
    }
    let mut mean = vec![0.0; d];
    for f in features {
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; d * d];
    for f in features {
        let c: Vec<f64> = f.iter().zip(&mean).map(|(v, m)| v - m).collect();
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += c[i] * c[j];
            }
        }
    }
    for i in 0..d {
        for j in 0..d {
            let s = 0.5 * (cov[i * d + j] + cov[j * d + i]) / (n - 1) as f64;
            cov[i * d + j] = s;
            cov[j * d + i] = s;
        }
    }
    Ok(FeatureStats { mean, cov, n })
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(m.clone());
    let vals = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&vals) * e.eigenvectors.transpose()
}

/// `‖μ_a − μ_b‖² + Tr(Σ_a + Σ_b − 2(Σ_a Σ_b)^{1/2})`. The trace of the root
/// is taken as that of `(Σ_a^{1/2} Σ_b Σ_a^{1/2})^{1/2}`, which is symmetric,
/// with negative eigenvalues clamped to zero.
pub fn fid(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    let d = a.dim();
    if b.dim() != d || a.cov.len() != d * d || b.cov.len() != d * d {
        return Err(shape_err!("feature stats of dimension {d} and {}", b.dim()));
    }
    if [&a.mean, &a.cov, &b.mean, &b.cov].iter().any(|v| v.iter().any(|x| !x.is_finite())) {
        return Err(Error::NonFinite("feature stats".into()));
    }
    let sa = DMatrix::from_row_slice(d, d, &a.cov);
    let sb = DMatrix::from_row_slice(d, d, &b.cov);
    let ra = sym_sqrt(&sa);
    let mid = &ra * &sb * &ra;
    let mid = (&mid + mid.transpose()) * 0.5;
    let root_trace: f64 = SymmetricEigen::new(mid).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let dm: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(dm + sa.trace() + sb.trace() - 2.0 * root_trace)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(real ‖ fake)`.
    #[default]
    RealFake,
    FakeReal,
}

fn check_distribution(p: &[f64]) -> Result<()> {
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(invalid!("distribution has negative or non-finite mass"));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-6 {
        return Err(invalid!("distribution sums to {s}"));
    }
    Ok(())
}

/// `Σ_c p_c ln(p_c / max(q_c, 1e-12))`, with `0 · ln 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(shape_err!("distributions over {} and {} classes", p.len(), q.len()));
    }
    check_distribution(p)?;
    check_distribution(q)?;
    let kl: f64 = p
        .iter()
        .zip(q)
        .filter(|(&pc, _)| pc > 0.0)
        .map(|(&pc, &qc)| pc * (pc / qc.max(PROB_FLOOR)).ln())
        .sum();
    Ok(kl.max(0.0))
}

/// Per-pair `KL(real ‖ fake)` and their mean.
pub fn mkl(pairs: &[(Vec<f64>, Vec<f64>)]) -> Result<(f64, Vec<f64>)> {
    mkl_directed(pairs, KlDirection::RealFake)
}

pub fn mkl_directed(pairs: &[(Vec<f64>, Vec<f64>)], dir: KlDirection) -> Result<(f64, Vec<f64>)> {
    if pairs.is_empty() {
        return Err(invalid!("no distribution pairs"));
    }
    let per = pairs
        .iter()
        .map(|(r, f)| match dir {
            KlDirection::RealFake => kl_divergence(r, f),
            KlDirection::FakeReal => kl_divergence(f, r),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((per.iter().sum::<f64>() / per.len() as f64, per))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_samples_per_condition: usize,
    pub kl_direction: KlDirection,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_samples_per_condition: 10,
            kl_direction: KlDirection::RealFake,
        }
    }
}

/// Evaluation outcome. Field order is the serialized key order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub fid: f64,
    pub mean_mkl: f64,
    pub per_condition_mkl: Vec<f64>,
    pub sample_count: usize,
    pub kl_direction: KlDirection,
    /// How draws enter the per-condition value: KL per draw, then the mean.
    pub mkl_aggregation: String,
    pub prob_floor: f64,
    pub eigen_clamp: f64,
    pub config_fingerprint: String,
    /// Seconds of generation per produced clip. Not serialized, so reports
    /// of identical runs are byte-identical.
    #[serde(skip)]
    pub wall_time_per_clip: f64,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::format("metric report", e.to_string()))
    }
}

/// Draws `n_samples_per_condition` spectrograms per real item, pools fake
/// features against real ones for FID and averages per-draw KL per condition.
/// `generate(i, condition, draw)` must be deterministic.
pub fn evaluate<C>(
    real: &[(MelSpectrogram, C)],
    mut generate: impl FnMut(usize, &C, usize) -> Result<MelSpectrogram>,
    classifier: &ClassifierModel,
    cfg: &EvalConfig,
    config_fingerprint: &str,
) -> Result<MetricReport> {
    if real.is_empty() {
        return Err(invalid!("no real items to evaluate against"));
    }
    if cfg.n_samples_per_condition == 0 {
        return Err(invalid!("need at least one sample per condition"));
    }
    let mut real_feats = Vec::with_capacity(real.len());
    let mut fake_feats = Vec::with_capacity(real.len() * cfg.n_samples_per_condition);
    let mut per_condition = Vec::with_capacity(real.len());
    let mut gen_secs = 0.0;
    for (i, (spec, cond)) in real.iter().enumerate() {
        let (rf, rp) = classifier.features_and_probs(spec)?;
        real_feats.push(rf);
        let mut pairs = Vec::with_capacity(cfg.n_samples_per_condition);
        for d in 0..cfg.n_samples_per_condition {
            let t = Instant::now();
            let fake = generate(i, cond, d).map_err(|e| e.in_stage(format!("generate condition {i}")))?;
            gen_secs += t.elapsed().as_secs_f64();
            let (ff, fp) = classifier.features_and_probs(&fake)?;
            fake_feats.push(ff);
            pairs.push((rp.clone(), fp));
        }
        per_condition.push(mkl_directed(&pairs, cfg.kl_direction)?.0);
    }
    let fid_value = if real_feats.len() >= 2 {
        fid(&gaussian_stats(&real_feats)?, &gaussian_stats(&fake_feats)?)?.max(0.0)
    } else {
        return Err(invalid!("FID needs at least 2 real items"));
    };
    let sample_count = fake_feats.len();
    Ok(MetricReport {
        fid: fid_value,
        mean_mkl: per_condition.iter().sum::<f64>() / per_condition.len() as f64,
        per_condition_mkl: per_condition,
        sample_count,
        kl_direction: cfg.kl_direction,
        mkl_aggregation: "per_draw_mean".into(),
        prob_floor: PROB_FLOOR,
        eigen_clamp: 0.0,
        config_fingerprint: config_fingerprint.into(),
        wall_time_per_clip: gen_secs / sample_count as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats1(mean: f64, var: f64) -> FeatureStats {
        FeatureStats {
            mean: vec![mean],
            cov: vec![var],
            n: 2,
        }
    }

    #[test]
    fn stats_examples() {
        let s = gaussian_stats(&[vec![0.0, 0.0], vec![2.0, 0.0]]).unwrap();
        assert_eq!(s.mean, vec![1.0, 0.0]);
        assert_eq!(s.cov, vec![2.0, 0.0, 0.0, 0.0]);
        let z = gaussian_stats(&vec![vec![1.5, -2.0, 3.0]; 4]).unwrap();
        assert!(z.cov.iter().all(|&c| c == 0.0));
        assert_eq!((z.mean.len(), z.cov.len()), (3, 9));
        assert!(gaussian_stats(&[vec![1.0]]).is_err());
    }

    #[test]
    fn fid_examples() {
        assert!((fid(&stats1(0.0, 1.0), &stats1(1.0, 1.0)).unwrap() - 1.0).abs() < 1e-9);
        assert!((fid(&stats1(0.0, 1.0), &stats1(0.0, 4.0)).unwrap() - 1.0).abs() < 1e-9);
        let s = gaussian_stats(&[vec![1.0, 2.0], vec![0.0, 1.0], vec![3.0, -1.0]]).unwrap();
        assert!(fid(&s, &s).unwrap().abs() < 1e-6);
        assert!(fid(&s, &stats1(0.0, 1.0)).is_err());
    }

    #[test]
    fn mkl_examples() {
        assert_eq!(kl_divergence(&[0.2, 0.8], &[0.2, 0.8]).unwrap(), 0.0);
        let (mean, per) = mkl(&[(vec![1.0, 0.0], vec![0.5, 0.5]), (vec![0.3, 0.7], vec![0.3, 0.7])]).unwrap();
        assert!((per[0] - 2f64.ln()).abs() < 1e-12);
        assert!((mean - 2f64.ln() / 2.0).abs() < 1e-12);
        assert!(kl_divergence(&[0.5, 0.6], &[0.5, 0.5]).is_err());
        let (_, rev) = mkl_directed(&[(vec![1.0, 0.0], vec![0.5, 0.5])], KlDirection::FakeReal).unwrap();
        assert!((rev[0] - 0.5 * (0.5 / PROB_FLOOR).ln() - 0.5 * 0.5f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn report_json_key_order() {
        let r = MetricReport {
            fid: 1.0,
            mean_mkl: 0.5,
            per_condition_mkl: vec![0.25, 0.75],
            sample_count: 2,
            kl_direction: KlDirection::RealFake,
            mkl_aggregation: "per_draw_mean".into(),
            prob_floor: PROB_FLOOR,
            eigen_clamp: 0.0,
            config_fingerprint: "ab".into(),
            wall_time_per_clip: 3.0,
        };
        let j = r.to_json();
        let keys = ["\"fid\"", "\"mean_mkl\"", "\"per_condition_mkl\"", "\"sample_count\"", "\"kl_direction\"", "\"config_fingerprint\""];
        let pos: Vec<usize> = keys.iter().map(|k| j.find(k).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
        assert!(!j.contains("wall_time"));
        let back = MetricReport::from_json(&j).unwrap();
        assert_eq!(back.per_condition_mkl, r.per_condition_mkl);
    }
}
