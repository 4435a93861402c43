use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{adversarial_losses, disc_logits, lpaps, vqvae_loss, LossConfig};
use super::{CodecConfig, CodecModel};
use crate::codes::CodeGrid;
use crate::dsp::MelSpectrogram;
use crate::error::{invalid, shape_err, Error, Result};
use crate::nn::{gaussian, Adam, AdamConfig, Graph, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub codec: CodecConfig,
    pub loss: LossConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub disc_lr: f64,
    pub betas: (f64, f64),
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            codec: CodecConfig::default(),
            loss: LossConfig::default(),
            steps: 1000,
            batch_size: 8,
            lr: 2e-3,
            disc_lr: 2e-3,
            betas: (0.5, 0.9),
        }
    }
}

/// Per-step loss decomposition. `total` is accumulated as
/// `recon + encoder + codebook + lpaps_weight·lpaps + adv_weight_applied·g_adv`
/// in that order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub step: usize,
    pub recon: f64,
    pub encoder: f64,
    pub codebook: f64,
    pub lpaps: f64,
    /// Unweighted generator adversarial loss; zero before warmup ends.
    pub g_adv: f64,
    pub adv_weight_applied: f64,
    pub d_loss: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub steps: Vec<StepLosses>,
}

fn adam(cfg: &TrainConfig, lr: f64, store: &ParamStore) -> Adam {
    Adam::new(
        store,
        AdamConfig {
            lr,
            beta1: cfg.betas.0,
            beta2: cfg.betas.1,
            ..AdamConfig::default()
        },
    )
}

fn owned<'a>(grads: &'a [(ParamId, &'a Tensor)], ids: &[ParamId]) -> Vec<(ParamId, &'a Tensor)> {
    grads.iter().filter(|(id, _)| ids.binary_search(id).is_ok()).copied().collect()
}

/// Seeds every codebook entry with an encoder output drawn from the corpus.
fn init_codebook(model: &mut CodecModel, corpus: &[MelSpectrogram], rng: &mut ChaCha8Rng) -> Result<()> {
    let mut tokens = Vec::new();
    for chunk in corpus.chunks(8) {
        let refs: Vec<&MelSpectrogram> = chunk.iter().collect();
        let x = model.batch_tensor(&refs)?;
        let mut g = Graph::inference();
        let xv = g.constant(x);
        let z = model.encode_graph(&mut g, xv);
        tokens.extend_from_slice(g.value(z).data());
    }
    let n_z = model.cfg.n_z;
    let k = model.cfg.codebook_size;
    let count = tokens.len() / n_z;
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(rng);
    let spread = tokens.iter().map(|v| v * v).sum::<f64>() / tokens.len() as f64;
    let noise = gaussian(rng, &[k, n_z], 1e-2 * spread.sqrt());
    let mut entries = Vec::with_capacity(k * n_z);
    for i in 0..k {
        let src = order[i % count];
        entries.extend_from_slice(&tokens[src * n_z..(src + 1) * n_z]);
    }
    for (e, n) in entries.iter_mut().zip(noise.data()) {
        *e += n;
    }
    model.set_codebook(entries);
    Ok(())
}

/// Trains the autoencoder, codebook and discriminator. The adversarial
/// terms are absent for the first `adv_warmup_steps` steps.
pub fn train_codebook(corpus: &[MelSpectrogram], cfg: &TrainConfig, seed: u64) -> Result<(CodecModel, TrainHistory)> {
    train_codebook_observed(corpus, cfg, seed, |_, _| true)
}

/// [`train_codebook`] calling `observe` after every step; training stops
/// early once it returns `false`.
pub fn train_codebook_observed(
    corpus: &[MelSpectrogram],
    cfg: &TrainConfig,
    seed: u64,
    mut observe: impl FnMut(&CodecModel, &StepLosses) -> bool,
) -> Result<(CodecModel, TrainHistory)> {
    let first = corpus.first().ok_or_else(|| invalid!("empty training corpus"))?;
    if corpus.iter().any(|s| s.shape() != first.shape()) {
        return Err(shape_err!("training spectrograms differ in shape"));
    }
    if cfg.batch_size == 0 {
        return Err(invalid!("batch size must be positive"));
    }
    cfg.loss.validate()?;
    let mut model = CodecModel::new(CodecConfig {
        seed,
        ..cfg.codec.clone()
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c0de);
    init_codebook(&mut model, corpus, &mut rng)?;

    let mut gen_opt = adam(cfg, cfg.lr, &model.store);
    let mut disc_opt = adam(cfg, cfg.disc_lr, &model.store);
    let gen_ids = model.gen_params.clone();
    let disc_ids = model.disc_params.clone();
    let rows = model.cfg.latent_rows();
    let cols = first.frames / super::DOWNSAMPLE;

    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut cursor = order.len();
    let batch = cfg.batch_size.min(corpus.len());
    let mut history = TrainHistory::default();
    for step in 0..cfg.steps {
        if cursor + batch > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let picks: Vec<&MelSpectrogram> = order[cursor..cursor + batch].iter().map(|&i| &corpus[i]).collect();
        cursor += batch;
        let adv_on = step >= cfg.loss.adv_warmup_steps;

        let x = model.batch_tensor(&picks)?;
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let enc = model.encode_graph(&mut g, xv);
        let idx = model.nearest_indices(g.value(enc));
        let cb = g.param(&model.store, model.codebook);
        let q = g.gather_rows(cb, &idx);
        let q = g.reshape(q, g.shape(enc).to_vec().as_slice());
        let z = g.straight_through(enc, q);
        let x_hat = model.decode_graph(&mut g, z, rows, cols);
        let vq = vqvae_loss(&mut g, xv, x_hat, enc, q, &cfg.loss);
        let lp = lpaps(&mut g, &model, xv, x_hat);
        let lpw = g.scale(lp, cfg.loss.lpaps_weight);
        let mut total = g.add(vq.total, lpw);
        let mut g_adv = 0.0;
        let adv_weight_applied = if adv_on { cfg.loss.adv_weight } else { 0.0 };
        if adv_on {
            let logits = disc_logits(&mut g, &model, x_hat);
            let gl = g.bce_with_logits(logits, true);
            g_adv = g.value(gl).item();
            let w = g.scale(gl, adv_weight_applied);
            total = g.add(total, w);
        }
        let fake = g.value(x_hat).clone();

        let mut rec = StepLosses {
            step,
            recon: g.value(vq.recon).item(),
            encoder: g.value(vq.encoder).item(),
            codebook: g.value(vq.codebook).item(),
            lpaps: g.value(lp).item(),
            g_adv,
            adv_weight_applied,
            d_loss: 0.0,
            total: g.value(total).item(),
        };
        if !rec.total.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("{rec:?}"),
            });
        }
        let grads = g.backward(total);
        let all = grads.param_grads();
        gen_opt.step(&mut model.store, &owned(&all, &gen_ids));
        drop(grads);

        if adv_on {
            let mut dg = Graph::new();
            let real = dg.constant(x);
            let fake = dg.constant(fake);
            let adv = adversarial_losses(&mut dg, &model, real, fake);
            rec.d_loss = dg.value(adv.d_loss).item();
            let grads = dg.backward(adv.d_loss);
            let all = grads.param_grads();
            disc_opt.step(&mut model.store, &owned(&all, &disc_ids));
        }
        if !model.store.all_finite() {
            return Err(Error::Diverged {
                step,
                detail: "non-finite parameters after update".into(),
            });
        }
        let go_on = observe(&model, &rec);
        history.steps.push(rec);
        if !go_on {
            break;
        }
    }
    Ok((model, history))
}

/// Index frequencies over a set of grids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodebookUsage {
    pub histogram: Vec<f64>,
    pub unused: usize,
    /// `exp` of the index entropy.
    pub perplexity: f64,
    /// Raised when the perplexity is below 2, i.e. one index dominates.
    pub collapsed: bool,
}

pub fn codebook_usage(grids: &[CodeGrid]) -> Result<CodebookUsage> {
    let first = grids.first().ok_or_else(|| invalid!("no code grids"))?;
    let k = first.k;
    let mut counts = vec![0u64; k];
    let mut total = 0u64;
    for gr in grids {
        if gr.k != k {
            return Err(invalid!("grids mix K={k} and K={}", gr.k));
        }
        for &i in &gr.indices {
            counts[i as usize] += 1;
        }
        total += gr.indices.len() as u64;
    }
    if total == 0 {
        return Err(invalid!("grids contain no cells"));
    }
    let histogram: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
    let entropy: f64 = histogram.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
    let perplexity = entropy.exp();
    Ok(CodebookUsage {
        unused: counts.iter().filter(|&&c| c == 0).count(),
        histogram,
        perplexity,
        collapsed: perplexity < 2.0,
    })
}
