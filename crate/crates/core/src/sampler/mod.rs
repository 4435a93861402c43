//! Decoder-only transformer over `[condition : codes]` that samples code
//! sequences autoregressively.

mod checkpoint;
mod cond;
mod train;

pub use checkpoint::{load_sampler, read_sampler, save_sampler, write_sampler};
pub use cond::{make_null_condition, read_condition, read_condition_file, write_condition, write_condition_file, ConditioningSequence};
pub use train::{evaluate_loss, teacher_forced_accuracy, train_sampler, SamplerHistory, SamplerTrainConfig, TrainPair};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codes::{unflatten_column_major, CodeGrid};
use crate::error::{invalid, shape_err, Result};
use crate::nn::{gaussian, AttnMask, FeedForward, Graph, LayerNorm, Linear, ParamId, ParamStore, SelfAttention, Var};
use crate::tensor::{self, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub codebook_size: usize,
    pub cond_dim: usize,
    pub cond_len: usize,
    /// Latent grid geometry `F' × T'`; the sequence length is their product.
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    /// Number of classes when a learned class token precedes the condition.
    pub class_token: Option<usize>,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            codebook_size: 64,
            cond_dim: 16,
            cond_len: 1,
            grid_rows: 5,
            grid_cols: 6,
            width: 64,
            layers: 2,
            heads: 2,
            class_token: None,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    /// 24 layers, 16 heads, width 1024 over a 5×53 grid of `K = 1024`.
    pub fn full_scale(cond_dim: usize, cond_len: usize) -> Self {
        Self {
            codebook_size: 1024,
            cond_dim,
            cond_len,
            grid_rows: 5,
            grid_cols: 53,
            width: 1024,
            layers: 24,
            heads: 16,
            ..Self::default()
        }
    }

    pub fn seq_len(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    /// Positions preceding the first code token.
    pub fn prefix_len(&self) -> usize {
        self.cond_len + usize::from(self.class_token.is_some())
    }

    pub fn validate(&self) -> Result<()> {
        if self.codebook_size < 2 {
            return Err(invalid!("codebook size must be at least 2"));
        }
        if self.cond_dim == 0 || self.cond_len == 0 {
            return Err(invalid!("condition must have positive length and dimension"));
        }
        if self.seq_len() == 0 {
            return Err(invalid!("empty code grid"));
        }
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(invalid!("{} heads do not divide width {}", self.heads, self.width));
        }
        if self.class_token == Some(0) {
            return Err(invalid!("class token needs at least one class"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub top_x: usize,
    pub seed: u64,
    pub steps: usize,
}

#[derive(Clone, Debug)]
struct Block {
    attn: SelfAttention,
    ff: FeedForward,
}

#[derive(Clone, Debug)]
pub struct SamplerModel {
    pub cfg: SamplerConfig,
    pub(crate) store: ParamStore,
    tok_emb: ParamId,
    cls_emb: Option<ParamId>,
    cond_proj: Linear,
    pos: ParamId,
    blocks: Vec<Block>,
    norm: LayerNorm,
    head: Linear,
}

/// Per-layer key/value rows accumulated during incremental decoding.
struct KvCache {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

impl SamplerModel {
    pub fn new(cfg: SamplerConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let w = cfg.width;
        let tok_emb = store.add("tok_emb", gaussian(&mut rng, &[cfg.codebook_size, w], 0.02));
        let cls_emb = cfg.class_token.map(|c| store.add("cls_emb", gaussian(&mut rng, &[c, w], 0.02)));
        let cond_proj = Linear::new(&mut store, &mut rng, "cond_proj", cfg.cond_dim, w);
        let positions = cfg.prefix_len() + cfg.seq_len() - 1;
        let pos = store.add("pos", gaussian(&mut rng, &[positions, w], 0.02));
        let blocks = (0..cfg.layers)
            .map(|l| Block {
                attn: SelfAttention::new(&mut store, &mut rng, &format!("block{l}.attn"), w, cfg.heads),
                ff: FeedForward::new(&mut store, &mut rng, &format!("block{l}.ff"), w),
            })
            .collect();
        let norm = LayerNorm::new(&mut store, "norm", w);
        let head = Linear::new(&mut store, &mut rng, "head", w, cfg.codebook_size);
        Ok(Self {
            cfg,
            store,
            tok_emb,
            cls_emb,
            cond_proj,
            pos,
            blocks,
            norm,
            head,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    fn check_cond(&self, cond: &ConditioningSequence) -> Result<()> {
        if cond.n != self.cfg.cond_len || cond.dim != self.cfg.cond_dim {
            return Err(shape_err!(
                "condition {}x{} does not match the model's {}x{}",
                cond.n,
                cond.dim,
                self.cfg.cond_len,
                self.cfg.cond_dim
            ));
        }
        Ok(())
    }

    fn check_label(&self, label: Option<usize>) -> Result<()> {
        match (self.cfg.class_token, label) {
            (None, _) => Ok(()),
            (Some(c), Some(l)) if l < c => Ok(()),
            (Some(c), l) => Err(invalid!("class token model needs a label below {c}, got {l:?}")),
        }
    }

    /// Teacher-forced logits `[B, M, K]`: position `j` predicts code `j`
    /// from the condition and codes `< j`. `codes` holds `B` sequences of
    /// length `M` (the last code of each is never an input).
    pub fn logits_graph(
        &self,
        g: &mut Graph,
        conds: &[&ConditioningSequence],
        labels: &[Option<usize>],
        codes: &[&[u32]],
    ) -> Var {
        let cfg = &self.cfg;
        let b = conds.len();
        let m = cfg.seq_len();
        let w = cfg.width;
        let s = &self.store;
        let mut cdata = Vec::with_capacity(b * cfg.cond_len * cfg.cond_dim);
        for c in conds {
            cdata.extend_from_slice(&c.features);
        }
        let cv = g.constant(Tensor::new(vec![b, cfg.cond_len, cfg.cond_dim], cdata));
        let mut x = self.cond_proj.forward(g, s, cv);
        if let Some(id) = self.cls_emb {
            let table = g.param(s, id);
            let idx: Vec<usize> = labels.iter().map(|l| l.expect("label required")).collect();
            let e = g.gather_rows(table, &idx);
            let e = g.reshape(e, &[b, 1, w]);
            x = g.concat_seq(e, x);
        }
        if m > 1 {
            let table = g.param(s, self.tok_emb);
            let idx: Vec<usize> = codes.iter().flat_map(|c| c[..m - 1].iter().map(|&i| i as usize)).collect();
            let e = g.gather_rows(table, &idx);
            let e = g.reshape(e, &[b, m - 1, w]);
            x = g.concat_seq(x, e);
        }
        let pos = g.param(s, self.pos);
        let mut h = g.add_broadcast(x, pos);
        for blk in &self.blocks {
            h = blk.attn.forward(g, s, h, AttnMask::Causal);
            h = blk.ff.forward(g, s, h);
        }
        let h = g.slice_seq(h, cfg.prefix_len() - 1, m);
        let h = self.norm.forward(g, s, h);
        self.head.forward(g, s, h)
    }

    fn new_cache(&self) -> KvCache {
        KvCache {
            keys: vec![Vec::new(); self.blocks.len()],
            values: vec![Vec::new(); self.blocks.len()],
            len: 0,
        }
    }

    /// Advances the cache by one input row and returns the logits at it.
    fn step(&self, cache: &mut KvCache, input: &[f64]) -> Vec<f64> {
        let w = self.cfg.width;
        let heads = self.cfg.heads;
        let dh = w / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let p = cache.len;
        let pos = &self.store.get(self.pos).data()[p * w..(p + 1) * w];
        let mut x: Vec<f64> = input.iter().zip(pos).map(|(a, b)| a + b).collect();
        for (l, blk) in self.blocks.iter().enumerate() {
            let a = &blk.attn;
            let h = a.norm.apply(&self.store, &x);
            let q = a.q.apply(&self.store, &h);
            cache.keys[l].extend(a.k.apply(&self.store, &h));
            cache.values[l].extend(a.v.apply(&self.store, &h));
            let (keys, vals) = (&cache.keys[l], &cache.values[l]);
            let mut out = vec![0.0; w];
            let mut scores = vec![0.0; p + 1];
            for hd in 0..heads {
                let o = hd * dh;
                for (j, sc) in scores.iter_mut().enumerate() {
                    let k = &keys[j * w + o..j * w + o + dh];
                    *sc = q[o..o + dh].iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                tensor::softmax_in_place(&mut scores);
                for (j, &pj) in scores.iter().enumerate() {
                    let v = &vals[j * w + o..j * w + o + dh];
                    for (acc, &vv) in out[o..o + dh].iter_mut().zip(v) {
                        *acc += pj * vv;
                    }
                }
            }
            let o = a.proj.apply(&self.store, &out);
            for (xi, oi) in x.iter_mut().zip(o) {
                *xi += oi;
            }
            x = blk.ff.apply(&self.store, &x);
        }
        cache.len += 1;
        let h = self.norm.apply(&self.store, &x);
        self.head.apply(&self.store, &h)
    }

    fn token_row(&self, idx: u32) -> &[f64] {
        let w = self.cfg.width;
        let i = idx as usize;
        &self.store.get(self.tok_emb).data()[i * w..(i + 1) * w]
    }

    /// Feeds the class token and condition rows; returns logits for code 0.
    fn start(&self, cache: &mut KvCache, cond: &ConditioningSequence, label: Option<usize>) -> Result<Vec<f64>> {
        self.check_cond(cond)?;
        self.check_label(label)?;
        let mut logits = Vec::new();
        if let (Some(id), Some(l)) = (self.cls_emb, label) {
            let w = self.cfg.width;
            let row = self.store.get(id).data()[l * w..(l + 1) * w].to_vec();
            logits = self.step(cache, &row);
        }
        let projected = self.cond_proj.apply(&self.store, &cond.features);
        for row in projected.chunks(self.cfg.width) {
            logits = self.step(cache, row);
        }
        Ok(logits)
    }

    fn check_prefix(&self, prefix: &[u32]) -> Result<()> {
        if let Some(&bad) = prefix.iter().find(|&&i| i as usize >= self.cfg.codebook_size) {
            return Err(invalid!("prefix index {bad} out of range for K={}", self.cfg.codebook_size));
        }
        Ok(())
    }

    /// `p(s_j | s_<j, condition)` for `j = prefix.len()`.
    pub fn next_token_distribution(&self, cond: &ConditioningSequence, label: Option<usize>, prefix: &[u32]) -> Result<Vec<f64>> {
        if prefix.len() >= self.cfg.seq_len() {
            return Err(invalid!("prefix of {} leaves nothing to predict in {}", prefix.len(), self.cfg.seq_len()));
        }
        self.check_prefix(prefix)?;
        let mut cache = self.new_cache();
        let mut logits = self.start(&mut cache, cond, label)?;
        for &t in prefix {
            logits = self.step(&mut cache, self.token_row(t));
        }
        tensor::softmax_in_place(&mut logits);
        Ok(logits)
    }

    /// Samples the whole grid from the condition alone.
    pub fn sample_codes(&self, cond: &ConditioningSequence, label: Option<usize>, params: &SamplingParams) -> Result<CodeGrid> {
        self.prime_with_prefix(cond, label, &[], params)
    }

    /// Fixes `prefix` (column-major, earliest columns first) and samples the
    /// remaining positions.
    pub fn prime_with_prefix(
        &self,
        cond: &ConditioningSequence,
        label: Option<usize>,
        prefix: &[u32],
        params: &SamplingParams,
    ) -> Result<CodeGrid> {
        let m = self.cfg.seq_len();
        if params.steps != m {
            return Err(invalid!("{} sampling steps for a sequence of {m}", params.steps));
        }
        if prefix.len() >= m {
            return Err(invalid!("prefix of {} leaves nothing to sample in {m}", prefix.len()));
        }
        self.check_prefix(prefix)?;
        check_top_x(params.top_x, self.cfg.codebook_size)?;
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let mut cache = self.new_cache();
        let mut logits = self.start(&mut cache, cond, label)?;
        let mut seq = Vec::with_capacity(m);
        for j in 0..m {
            let tok = if j < prefix.len() {
                prefix[j]
            } else {
                tensor::softmax_in_place(&mut logits);
                let p = top_x_clip(&logits, params.top_x)?;
                draw(&p, &mut rng) as u32
            };
            seq.push(tok);
            if j + 1 < m {
                logits = self.step(&mut cache, self.token_row(tok));
            }
        }
        unflatten_column_major(&seq, self.cfg.grid_rows, self.cfg.grid_cols, self.cfg.codebook_size)
    }
}

fn check_top_x(x: usize, k: usize) -> Result<()> {
    if x == 0 || x > k {
        return Err(invalid!("top-X {x} outside 1..={k}"));
    }
    Ok(())
}

/// Keeps the `x` largest probabilities (ties toward the lower index) and
/// renormalizes.
pub fn top_x_clip(p: &[f64], x: usize) -> Result<Vec<f64>> {
    check_top_x(x, p.len())?;
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    let mut out = vec![0.0; p.len()];
    for &i in &order[..x] {
        out[i] = p[i];
    }
    let z: f64 = out.iter().sum();
    if !(z > 0.0) {
        // Every kept entry is zero: fall back to uniform over the kept set.
        for &i in &order[..x] {
            out[i] = 1.0 / x as f64;
        }
        return Ok(out);
    }
    for v in &mut out {
        *v /= z;
    }
    Ok(out)
}

/// One multinomial draw by inverse CDF.
fn draw(p: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &pi) in p.iter().enumerate() {
        if pi > 0.0 {
            acc += pi;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_x_examples() {
        let p = top_x_clip(&[0.5, 0.3, 0.2], 2).unwrap();
        assert!((p[0] - 0.625).abs() < 1e-15 && (p[1] - 0.375).abs() < 1e-15 && p[2] == 0.0);
        assert_eq!(top_x_clip(&[0.5, 0.3, 0.2], 3).unwrap(), vec![0.5, 0.3, 0.2]);
        assert_eq!(top_x_clip(&[0.25, 0.5, 0.25], 1).unwrap(), vec![0.0, 1.0, 0.0]);
        assert_eq!(top_x_clip(&[0.25, 0.25, 0.5], 2).unwrap(), vec![1.0 / 3.0, 0.0, 2.0 / 3.0]);
        assert!(top_x_clip(&[0.5, 0.5], 0).is_err());
        assert!(top_x_clip(&[0.5, 0.5], 3).is_err());
    }

    #[test]
    fn cached_path_matches_graph() {
        for class_token in [None, Some(3)] {
            let cfg = SamplerConfig {
                cond_len: 3,
                cond_dim: 5,
                grid_rows: 2,
                grid_cols: 3,
                width: 16,
                codebook_size: 11,
                class_token,
                seed: 4,
                ..SamplerConfig::default()
            };
            let model = SamplerModel::new(cfg).unwrap();
            let cond = make_null_condition(5, 9);
            let cond = ConditioningSequence::new(3, 5, cond.features.repeat(3)).unwrap();
            let label = class_token.map(|_| 2);
            let codes = [3u32, 0, 10, 7, 7, 1];
            let mut g = Graph::inference();
            let logits = model.logits_graph(&mut g, &[&cond], &[label], &[&codes]);
            let lv = g.value(logits).data().to_vec();
            for j in 0..6 {
                let p = model.next_token_distribution(&cond, label, &codes[..j]).unwrap();
                let mut row = lv[j * 11..(j + 1) * 11].to_vec();
                tensor::softmax_in_place(&mut row);
                for (a, b) in p.iter().zip(&row) {
                    assert!((a - b).abs() < 1e-10, "position {j}");
                }
                assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn greedy_sampling_ignores_seed() {
        let model = SamplerModel::new(SamplerConfig::default()).unwrap();
        let cond = make_null_condition(16, 1);
        let run = |seed| {
            model
                .sample_codes(&cond, None, &SamplingParams { top_x: 1, seed, steps: 30 })
                .unwrap()
        };
        let a = run(1);
        assert_eq!((a.rows, a.cols), (5, 6));
        assert_eq!(a, run(2));
        let params = SamplingParams { top_x: 64, seed: 5, steps: 30 };
        assert_eq!(
            model.sample_codes(&cond, None, &params).unwrap(),
            model.sample_codes(&cond, None, &params).unwrap()
        );
        assert!(model.sample_codes(&cond, None, &SamplingParams { steps: 29, ..params }).is_err());
    }
}
