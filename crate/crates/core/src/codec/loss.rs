use serde::{Deserialize, Serialize};

use super::CodecModel;
use crate::error::{invalid, shape_err, Result};
use crate::nn::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReconNorm {
    #[default]
    L1,
    L2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub beta: f64,
    pub adv_weight: f64,
    pub adv_warmup_steps: usize,
    pub recon_norm: ReconNorm,
    pub lpaps_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            beta: 0.25,
            adv_weight: 0.8,
            adv_warmup_steps: 1000,
            recon_norm: ReconNorm::L1,
            lpaps_weight: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) {
            return Err(invalid!("beta must be positive, got {}", self.beta));
        }
        if !(self.adv_weight >= 0.0) || !(self.lpaps_weight >= 0.0) {
            return Err(invalid!("loss weights must be non-negative"));
        }
        Ok(())
    }
}

/// Graph nodes of the autoencoder objective.
#[derive(Clone, Copy, Debug)]
pub struct VqTerms {
    pub recon: Var,
    /// `mean (encoded − sg[quantized])²`, pulls the encoder.
    pub encoder: Var,
    /// `β · mean (sg[encoded] − quantized)²`, pulls the codebook.
    pub codebook: Var,
    pub total: Var,
}

/// Reconstruction plus the two quantization-gap terms. Means are taken
/// per element.
pub fn vqvae_loss(g: &mut Graph, x: Var, x_hat: Var, encoded: Var, quantized: Var, cfg: &LossConfig) -> VqTerms {
    let d = g.sub(x, x_hat);
    let r = match cfg.recon_norm {
        ReconNorm::L1 => g.abs(d),
        ReconNorm::L2 => g.square(d),
    };
    let recon = g.mean(r);

    let q_sg = g.stop_gradient(quantized);
    let d = g.sub(encoded, q_sg);
    let d = g.square(d);
    let encoder = g.mean(d);

    let e_sg = g.stop_gradient(encoded);
    let d = g.sub(e_sg, quantized);
    let d = g.square(d);
    let m = g.mean(d);
    let codebook = g.scale(m, cfg.beta);

    let t = g.add(recon, encoder);
    let total = g.add(t, codebook);
    VqTerms {
        recon,
        encoder,
        codebook,
        total,
    }
}

/// Plain evaluation of [`vqvae_loss`] over flat buffers.
pub fn vqvae_loss_value(x: &[f64], x_hat: &[f64], encoded: &[f64], quantized: &[f64], cfg: &LossConfig) -> Result<f64> {
    if x.len() != x_hat.len() || encoded.len() != quantized.len() {
        return Err(shape_err!("loss operands differ in length"));
    }
    if [x, x_hat, encoded, quantized].iter().any(|s| s.iter().any(|v| !v.is_finite())) {
        return Err(crate::Error::NonFinite("loss inputs".into()));
    }
    let mut g = Graph::inference();
    let mut c = |v: &[f64]| g.constant(Tensor::new(vec![v.len()], v.to_vec()));
    let (a, b, e, q) = (c(x), c(x_hat), c(encoded), c(quantized));
    let t = vqvae_loss(&mut g, a, b, e, q, cfg);
    Ok(g.value(t.total).item())
}

/// `Σ_s (1 / (F^s T^s)) ‖x^s − x̂^s‖²`, averaged over the batch.
pub fn lpaps(g: &mut Graph, model: &CodecModel, x: Var, x_hat: Var) -> Var {
    let batch = g.shape(x)[0] as f64;
    let fx = model.percep.features(g, &model.store, x);
    let fy = model.percep.features(g, &model.store, x_hat);
    let mut total: Option<Var> = None;
    for (a, b) in fx.into_iter().zip(fy) {
        let s = g.shape(a);
        let area = (s[2] * s[3]) as f64;
        let d = g.sub(a, b);
        let d = g.square(d);
        let d = g.sum(d);
        let d = g.scale(d, 1.0 / (area * batch));
        total = Some(match total {
            Some(t) => g.add(t, d),
            None => d,
        });
    }
    total.expect("perceptual net has at least one scale")
}

#[derive(Clone, Copy, Debug)]
pub struct AdversarialTerms {
    /// `−mean ln σ(D(x)) − mean ln(1 − σ(D(x̂)))`.
    pub d_loss: Var,
    /// Non-saturating `−mean ln σ(D(x̂))`.
    pub g_loss: Var,
}

pub fn adversarial_losses(g: &mut Graph, model: &CodecModel, real: Var, fake: Var) -> AdversarialTerms {
    let lr = model.disc.logits(g, &model.store, real);
    let lf = model.disc.logits(g, &model.store, fake);
    let dr = g.bce_with_logits(lr, true);
    let df = g.bce_with_logits(lf, false);
    let d_loss = g.add(dr, df);
    let g_loss = g.bce_with_logits(lf, true);
    AdversarialTerms { d_loss, g_loss }
}

/// Discriminator logits for a normalized `[B, 1, F, T]` batch.
pub(crate) fn disc_logits(g: &mut Graph, model: &CodecModel, x: Var) -> Var {
    model.disc.logits(g, &model.store, x)
}
