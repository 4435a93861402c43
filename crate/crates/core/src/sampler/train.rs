use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ConditioningSequence, SamplerConfig, SamplerModel};
use crate::codes::{flatten_column_major, CodeGrid};
use crate::error::{invalid, shape_err, Error, Result};
use crate::nn::{Adam, AdamConfig, Graph};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainPair {
    pub cond: ConditioningSequence,
    pub grid: CodeGrid,
    pub label: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerTrainConfig {
    pub model: SamplerConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
}

impl Default for SamplerTrainConfig {
    fn default() -> Self {
        Self {
            model: SamplerConfig::default(),
            steps: 1500,
            batch_size: 16,
            lr: 3e-3,
            betas: (0.9, 0.95),
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SamplerHistory {
    pub losses: Vec<f64>,
}

fn check_pairs(pairs: &[TrainPair], cfg: &SamplerConfig) -> Result<()> {
    if pairs.is_empty() {
        return Err(invalid!("no training pairs"));
    }
    for (i, p) in pairs.iter().enumerate() {
        if (p.grid.rows, p.grid.cols, p.grid.k) != (cfg.grid_rows, cfg.grid_cols, cfg.codebook_size) {
            return Err(shape_err!(
                "pair {i}: grid {}x{} (K={}) vs configured {}x{} (K={})",
                p.grid.rows,
                p.grid.cols,
                p.grid.k,
                cfg.grid_rows,
                cfg.grid_cols,
                cfg.codebook_size
            ));
        }
        if (p.cond.n, p.cond.dim) != (cfg.cond_len, cfg.cond_dim) {
            return Err(shape_err!(
                "pair {i}: condition {}x{} vs configured {}x{}",
                p.cond.n,
                p.cond.dim,
                cfg.cond_len,
                cfg.cond_dim
            ));
        }
        if let Some(c) = cfg.class_token {
            if !matches!(p.label, Some(l) if l < c) {
                return Err(invalid!("pair {i}: class token needs a label below {c}"));
            }
        }
    }
    Ok(())
}

/// Content key used to put pairs in a canonical order, so the caller's
/// ordering has no effect on training.
fn sort_key(p: &TrainPair) -> (Vec<u32>, Vec<u64>, Option<usize>) {
    (
        flatten_column_major(&p.grid),
        p.cond.features.iter().map(|v| v.to_bits()).collect(),
        p.label,
    )
}

/// Mean next-token cross-entropy over the code positions of a batch.
pub(crate) fn batch_loss(model: &SamplerModel, g: &mut Graph, batch: &[&TrainPair]) -> crate::nn::Var {
    let conds: Vec<&ConditioningSequence> = batch.iter().map(|p| &p.cond).collect();
    let labels: Vec<Option<usize>> = batch.iter().map(|p| p.label).collect();
    let seqs: Vec<Vec<u32>> = batch.iter().map(|p| flatten_column_major(&p.grid)).collect();
    let refs: Vec<&[u32]> = seqs.iter().map(|s| s.as_slice()).collect();
    let logits = model.logits_graph(g, &conds, &labels, &refs);
    let targets: Vec<usize> = seqs.iter().flatten().map(|&t| t as usize).collect();
    g.cross_entropy(logits, &targets)
}

pub fn train_sampler(pairs: &[TrainPair], cfg: &SamplerTrainConfig, seed: u64) -> Result<(SamplerModel, SamplerHistory)> {
    let mcfg = SamplerConfig {
        seed,
        ..cfg.model.clone()
    };
    mcfg.validate()?;
    check_pairs(pairs, &mcfg)?;
    if cfg.batch_size == 0 {
        return Err(invalid!("batch size must be positive"));
    }
    let mut model = SamplerModel::new(mcfg)?;
    let mut ordered: Vec<&TrainPair> = pairs.iter().collect();
    ordered.sort_by_cached_key(|p| sort_key(p));
    let mut opt = Adam::new(
        &model.store,
        AdamConfig {
            lr: cfg.lr,
            beta1: cfg.betas.0,
            beta2: cfg.betas.1,
            weight_decay: cfg.weight_decay,
            ..AdamConfig::default()
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5a3f_1e55);
    let batch = cfg.batch_size.min(ordered.len());
    let mut cursor = ordered.len();
    let mut history = SamplerHistory::default();
    for step in 0..cfg.steps {
        if cursor + batch > ordered.len() {
            ordered.shuffle(&mut rng);
            cursor = 0;
        }
        let mut g = Graph::new();
        let loss = batch_loss(&model, &mut g, &ordered[cursor..cursor + batch]);
        cursor += batch;
        let lv = g.value(loss).item();
        if !lv.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("cross-entropy {lv}"),
            });
        }
        let grads = g.backward(loss);
        opt.step(&mut model.store, &grads.param_grads());
        history.losses.push(lv);
    }
    Ok((model, history))
}

/// Fraction of code positions whose teacher-forced argmax equals the target.
pub fn teacher_forced_accuracy(model: &SamplerModel, pairs: &[TrainPair]) -> Result<f64> {
    check_pairs(pairs, &model.cfg)?;
    let k = model.cfg.codebook_size;
    let mut hits = 0usize;
    let mut total = 0usize;
    for p in pairs {
        let seq = flatten_column_major(&p.grid);
        let mut g = Graph::inference();
        let logits = model.logits_graph(&mut g, &[&p.cond], &[p.label], &[&seq]);
        for (row, &t) in g.value(logits).data().chunks(k).zip(&seq) {
            let arg = (0..k).max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a))).unwrap();
            hits += usize::from(arg == t as usize);
            total += 1;
        }
    }
    Ok(hits as f64 / total as f64)
}

/// Mean cross-entropy over all pairs without updating anything.
pub fn evaluate_loss(model: &SamplerModel, pairs: &[TrainPair]) -> Result<f64> {
    check_pairs(pairs, &model.cfg)?;
    let refs: Vec<&TrainPair> = pairs.iter().collect();
    let mut g = Graph::inference();
    let loss = batch_loss(model, &mut g, &refs);
    Ok(g.value(loss).item())
}
