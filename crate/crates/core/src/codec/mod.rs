//! Spectrogram VQ autoencoder: conv encoder, nearest-entry codebook,
//! mirrored decoder, and the loss stack used to train them.

mod checkpoint;
mod loss;
mod train;

pub use checkpoint::{load_codec, read_codec, save_codec, write_codec};
pub use loss::{adversarial_losses, lpaps, vqvae_loss, vqvae_loss_value, AdversarialTerms, LossConfig, ReconNorm, VqTerms};
pub use train::{codebook_usage, train_codebook, train_codebook_observed, CodebookUsage, StepLosses, TrainConfig, TrainHistory};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codes::CodeGrid;
use crate::dsp::{DspParams, MelSpectrogram};
use crate::error::{invalid, shape_err, Result};
use crate::nn::{gaussian, AttnMask, Conv2d, Graph, LayerNorm, Linear, ParamId, ParamStore, SelfAttention, Var};
use crate::tensor::Tensor;

/// Total down-sampling factor of the encoder along each axis.
pub const DOWNSAMPLE: usize = 16;
const STAGES: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecConfig {
    pub dsp: DspParams,
    pub codebook_size: usize,
    pub n_z: usize,
    /// Channel widths at full, 1/2, 1/4, 1/8 and 1/16 resolution.
    pub channels: [usize; 5],
    pub attn_heads: usize,
    pub disc_channels: [usize; 2],
    pub lpaps_channels: [usize; 3],
    /// Disables the perceptual net's nonlinearities.
    pub lpaps_linear: bool,
    pub seed: u64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            dsp: DspParams::default(),
            codebook_size: 64,
            n_z: 32,
            channels: [4, 8, 16, 32, 32],
            attn_heads: 1,
            disc_channels: [8, 16],
            lpaps_channels: [8, 16, 16],
            lpaps_linear: false,
            seed: 0,
        }
    }
}

impl CodecConfig {
    /// `K = 1024`, `n_z = 256`.
    pub fn full_scale() -> Self {
        Self {
            codebook_size: 1024,
            n_z: 256,
            channels: [64, 64, 128, 128, 256],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dsp.validate()?;
        if self.codebook_size < 2 {
            return Err(invalid!("codebook size must be at least 2"));
        }
        if self.n_z == 0 || self.channels.contains(&0) {
            return Err(invalid!("latent and channel widths must be positive"));
        }
        if self.attn_heads == 0 || self.channels[4] % self.attn_heads != 0 {
            return Err(invalid!(
                "{} attention heads do not divide width {}",
                self.attn_heads,
                self.channels[4]
            ));
        }
        if self.dsp.n_mels % DOWNSAMPLE != 0 {
            return Err(invalid!("{} mel bands are not divisible by {DOWNSAMPLE}", self.dsp.n_mels));
        }
        Ok(())
    }

    pub fn latent_rows(&self) -> usize {
        self.dsp.n_mels / DOWNSAMPLE
    }
}

/// `K × n_z` codebook entries, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub k: usize,
    pub n_z: usize,
    pub entries: Vec<f64>,
}

impl Codebook {
    pub fn new(k: usize, n_z: usize, entries: Vec<f64>) -> Result<Self> {
        if k < 2 {
            return Err(invalid!("codebook needs at least 2 entries"));
        }
        if entries.len() != k * n_z {
            return Err(shape_err!("{} values for a {k}x{n_z} codebook", entries.len()));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(invalid!("codebook entries must be finite"));
        }
        Ok(Self { k, n_z, entries })
    }

    pub fn entry(&self, i: usize) -> &[f64] {
        &self.entries[i * self.n_z..(i + 1) * self.n_z]
    }

    /// Index of the nearest entry by squared Euclidean distance; ties go to
    /// the lowest index.
    pub fn nearest(&self, z: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for k in 0..self.k {
            let d: f64 = z.iter().zip(self.entry(k)).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best
    }
}

/// `F' × T' × n_z` latent values with cells in row-major `(f, t)` order.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    pub rows: usize,
    pub cols: usize,
    pub n_z: usize,
    pub values: Vec<f64>,
    pub quantized: bool,
}

impl LatentGrid {
    pub fn new(rows: usize, cols: usize, n_z: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols * n_z {
            return Err(shape_err!("{} values for a {rows}x{cols}x{n_z} latent", values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid!("latent values must be finite"));
        }
        Ok(Self {
            rows,
            cols,
            n_z,
            values,
            quantized: false,
        })
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        let i = (row * self.cols + col) * self.n_z;
        &self.values[i..i + self.n_z]
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.rows, self.cols, self.n_z)
    }
}

pub fn quantize(latent: &LatentGrid, cb: &Codebook) -> Result<(CodeGrid, LatentGrid)> {
    if latent.n_z != cb.n_z {
        return Err(shape_err!("latent width {} vs codebook width {}", latent.n_z, cb.n_z));
    }
    if latent.quantized {
        return Err(invalid!("latent is already quantized"));
    }
    let cells = latent.rows * latent.cols;
    let mut idx = Vec::with_capacity(cells);
    let mut values = Vec::with_capacity(latent.values.len());
    for c in 0..cells {
        let i = cb.nearest(&latent.values[c * cb.n_z..(c + 1) * cb.n_z]);
        idx.push(i as u32);
        values.extend_from_slice(cb.entry(i));
    }
    let grid = CodeGrid::new(latent.rows, latent.cols, cb.k, idx)?;
    let q = LatentGrid {
        rows: latent.rows,
        cols: latent.cols,
        n_z: latent.n_z,
        values,
        quantized: true,
    };
    Ok((grid, q))
}

/// Fixed random multi-scale feature extractor for the perceptual loss.
#[derive(Clone, Debug)]
pub(crate) struct PerceptualNet {
    pub convs: Vec<Conv2d>,
    pub linear: bool,
}

impl PerceptualNet {
    pub fn features(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Vec<Var> {
        let mut h = x;
        let mut out = Vec::with_capacity(self.convs.len());
        for c in &self.convs {
            h = c.forward(g, store, h);
            if !self.linear {
                h = g.silu(h);
            }
            out.push(h);
        }
        out
    }
}

/// Patch discriminator: two stride-2 convolutions and a stride-1 logit head.
#[derive(Clone, Debug)]
pub(crate) struct PatchDiscriminator {
    pub convs: Vec<Conv2d>,
}

impl PatchDiscriminator {
    pub fn logits(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let mut h = x;
        for (i, c) in self.convs.iter().enumerate() {
            h = c.forward(g, store, h);
            if i + 1 < self.convs.len() {
                h = g.silu(h);
            }
        }
        h
    }
}

#[derive(Clone, Debug)]
pub struct CodecModel {
    pub cfg: CodecConfig,
    pub(crate) store: ParamStore,
    enc_in: Conv2d,
    enc_down: Vec<Conv2d>,
    enc_attn: SelfAttention,
    enc_norm: LayerNorm,
    enc_proj: Linear,
    pub(crate) codebook: ParamId,
    dec_proj: Linear,
    dec_attn: SelfAttention,
    dec_in: Conv2d,
    dec_up: Vec<Conv2d>,
    dec_out: Conv2d,
    pub(crate) disc: PatchDiscriminator,
    pub(crate) percep: PerceptualNet,
    /// Parameters owned by the autoencoder and codebook.
    pub(crate) gen_params: Vec<ParamId>,
    pub(crate) disc_params: Vec<ParamId>,
}

impl CodecModel {
    pub fn new(cfg: CodecConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let c = cfg.channels;
        let enc_in = Conv2d::new(&mut store, &mut rng, "enc.in", 1, c[0], 3, 1, false);
        let enc_down = (0..STAGES)
            .map(|i| Conv2d::new(&mut store, &mut rng, &format!("enc.down{i}"), c[i], c[i + 1], 3, 2, false))
            .collect();
        let enc_attn = SelfAttention::new(&mut store, &mut rng, "enc.attn", c[4], cfg.attn_heads);
        let enc_norm = LayerNorm::new(&mut store, "enc.norm", c[4]);
        let enc_proj = Linear::new(&mut store, &mut rng, "enc.proj", c[4], cfg.n_z);
        let bound = 1.0 / cfg.codebook_size as f64;
        let codebook = store.add(
            "codebook",
            gaussian(&mut rng, &[cfg.codebook_size, cfg.n_z], bound),
        );
        let dec_proj = Linear::new(&mut store, &mut rng, "dec.proj", cfg.n_z, c[4]);
        let dec_attn = SelfAttention::new(&mut store, &mut rng, "dec.attn", c[4], cfg.attn_heads);
        let dec_in = Conv2d::new(&mut store, &mut rng, "dec.in", c[4], c[4], 3, 1, false);
        let dec_up = (0..STAGES)
            .rev()
            .map(|i| Conv2d::new(&mut store, &mut rng, &format!("dec.up{i}"), c[i + 1], c[i], 3, 1, false))
            .collect();
        let dec_out = Conv2d::new(&mut store, &mut rng, "dec.out", c[0], 1, 3, 1, false);
        let gen_count = store.len();

        let d = cfg.disc_channels;
        let disc = PatchDiscriminator {
            convs: vec![
                Conv2d::new(&mut store, &mut rng, "disc.0", 1, d[0], 3, 2, false),
                Conv2d::new(&mut store, &mut rng, "disc.1", d[0], d[1], 3, 2, false),
                Conv2d::new(&mut store, &mut rng, "disc.head", d[1], 1, 3, 1, false),
            ],
        };
        let disc_count = store.len();

        let p = cfg.lpaps_channels;
        let percep = PerceptualNet {
            convs: vec![
                Conv2d::new(&mut store, &mut rng, "lpaps.0", 1, p[0], 3, 2, true),
                Conv2d::new(&mut store, &mut rng, "lpaps.1", p[0], p[1], 3, 2, true),
                Conv2d::new(&mut store, &mut rng, "lpaps.2", p[1], p[2], 3, 2, true),
            ],
            linear: cfg.lpaps_linear,
        };
        let ids: Vec<ParamId> = store.iter().map(|(id, _, _)| id).collect();
        Ok(Self {
            cfg,
            store,
            enc_in,
            enc_down,
            enc_attn,
            enc_norm,
            enc_proj,
            codebook,
            dec_proj,
            dec_attn,
            dec_in,
            dec_up,
            dec_out,
            disc,
            percep,
            gen_params: ids[..gen_count].to_vec(),
            disc_params: ids[gen_count..disc_count].to_vec(),
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn codebook(&self) -> Codebook {
        let t = self.store.get(self.codebook);
        Codebook {
            k: self.cfg.codebook_size,
            n_z: self.cfg.n_z,
            entries: t.data().to_vec(),
        }
    }

    pub(crate) fn set_codebook(&mut self, entries: Vec<f64>) {
        *self.store.get_mut(self.codebook) = Tensor::new(vec![self.cfg.codebook_size, self.cfg.n_z], entries);
    }

    /// Affine map taking the log floor to −1 and `ln 1 = 0` to +1.
    pub fn normalize(&self, v: f64) -> f64 {
        let lf = self.cfg.dsp.log_floor_value();
        (v - lf) / -lf * 2.0 - 1.0
    }

    pub fn denormalize(&self, v: f64) -> f64 {
        let lf = self.cfg.dsp.log_floor_value();
        (v + 1.0) / 2.0 * -lf + lf
    }

    fn check_spec(&self, spec: &MelSpectrogram) -> Result<()> {
        if spec.n_mels() != self.cfg.dsp.n_mels {
            return Err(shape_err!("{} mel bands, codec expects {}", spec.n_mels(), self.cfg.dsp.n_mels));
        }
        if spec.frames == 0 || spec.frames % DOWNSAMPLE != 0 {
            return Err(invalid!("{} frames is not a positive multiple of {DOWNSAMPLE}", spec.frames));
        }
        Ok(())
    }

    /// Stacks spectrograms into a normalized `[B, 1, F, T]` tensor.
    pub fn batch_tensor(&self, specs: &[&MelSpectrogram]) -> Result<Tensor> {
        let first = specs.first().ok_or_else(|| invalid!("empty batch"))?;
        let mut data = Vec::with_capacity(specs.len() * first.values.len());
        for s in specs {
            self.check_spec(s)?;
            if s.frames != first.frames {
                return Err(shape_err!("batch mixes {} and {} frames", first.frames, s.frames));
            }
            data.extend(s.values.iter().map(|&v| self.normalize(v)));
        }
        Ok(Tensor::new(vec![specs.len(), 1, first.n_mels(), first.frames], data))
    }

    /// `[B, 1, F, T] -> [B, F'·T', n_z]`.
    pub fn encode_graph(&self, g: &mut Graph, x: Var) -> Var {
        let s = &self.store;
        let mut h = self.enc_in.forward(g, s, x);
        h = g.silu(h);
        for c in &self.enc_down {
            h = c.forward(g, s, h);
            h = g.silu(h);
        }
        let t = g.to_tokens(h);
        let t = self.enc_attn.forward(g, s, t, AttnMask::Full);
        let t = self.enc_norm.forward(g, s, t);
        self.enc_proj.forward(g, s, t)
    }

    /// `[B, rows·cols, n_z] -> [B, 1, 16·rows, 16·cols]`.
    pub fn decode_graph(&self, g: &mut Graph, z: Var, rows: usize, cols: usize) -> Var {
        let s = &self.store;
        let t = self.dec_proj.forward(g, s, z);
        let t = self.dec_attn.forward(g, s, t, AttnMask::Full);
        let mut h = g.from_tokens(t, rows, cols);
        h = self.dec_in.forward(g, s, h);
        h = g.silu(h);
        for c in &self.dec_up {
            h = g.upsample2x(h);
            h = c.forward(g, s, h);
            h = g.silu(h);
        }
        self.dec_out.forward(g, s, h)
    }

    /// Nearest-entry indices for every token row of `[B, L, n_z]`.
    pub(crate) fn nearest_indices(&self, encoded: &Tensor) -> Vec<usize> {
        let cb = self.codebook();
        encoded.data().chunks(self.cfg.n_z).map(|z| cb.nearest(z)).collect()
    }

    pub fn encode(&self, spec: &MelSpectrogram) -> Result<LatentGrid> {
        let x = self.batch_tensor(&[spec])?;
        let mut g = Graph::inference();
        let xv = g.constant(x);
        let z = self.encode_graph(&mut g, xv);
        LatentGrid::new(self.cfg.latent_rows(), spec.frames / DOWNSAMPLE, self.cfg.n_z, g.value(z).data().to_vec())
    }

    pub fn decode(&self, z: &LatentGrid) -> Result<MelSpectrogram> {
        if z.n_z != self.cfg.n_z || z.rows != self.cfg.latent_rows() {
            return Err(shape_err!(
                "latent {:?} does not fit codec ({} rows, n_z {})",
                z.shape(),
                self.cfg.latent_rows(),
                self.cfg.n_z
            ));
        }
        let mut g = Graph::inference();
        let zv = g.constant(Tensor::new(vec![1, z.rows * z.cols, z.n_z], z.values.clone()));
        let x = self.decode_graph(&mut g, zv, z.rows, z.cols);
        let values = g.value(x).data().iter().map(|&v| self.denormalize(v)).collect();
        MelSpectrogram::new(self.cfg.dsp.clone(), z.cols * DOWNSAMPLE, values)
    }

    /// Codebook lookup of every cell.
    pub fn lookup(&self, grid: &CodeGrid) -> Result<LatentGrid> {
        if grid.k != self.cfg.codebook_size {
            return Err(invalid!("grid uses K={}, codec has K={}", grid.k, self.cfg.codebook_size));
        }
        let cb = self.codebook();
        let mut values = Vec::with_capacity(grid.len() * cb.n_z);
        for &i in &grid.indices {
            values.extend_from_slice(cb.entry(i as usize));
        }
        let mut z = LatentGrid::new(grid.rows, grid.cols, cb.n_z, values)?;
        z.quantized = true;
        Ok(z)
    }

    pub fn encode_codes(&self, spec: &MelSpectrogram) -> Result<CodeGrid> {
        Ok(quantize(&self.encode(spec)?, &self.codebook())?.0)
    }

    pub fn decode_codes(&self, grid: &CodeGrid) -> Result<MelSpectrogram> {
        self.decode(&self.lookup(grid)?)
    }

    /// `decode(quantize(encode(x)))`.
    pub fn reconstruct(&self, spec: &MelSpectrogram) -> Result<MelSpectrogram> {
        self.decode_codes(&self.encode_codes(spec)?)
    }

    /// Mean squared reconstruction error in the normalized domain.
    pub fn recon_mse(&self, specs: &[MelSpectrogram]) -> Result<f64> {
        let mut total = 0.0;
        let mut n = 0usize;
        for s in specs {
            let r = self.reconstruct(s)?;
            for (a, b) in s.values.iter().zip(&r.values) {
                let d = self.normalize(*a) - self.normalize(*b);
                total += d * d;
            }
            n += s.values.len();
        }
        Ok(total / n.max(1) as f64)
    }

    /// Shape of the discriminator's logit grid for an `F × T` input.
    pub fn patch_grid(&self, frames: usize) -> (usize, usize) {
        let down = |n: usize| n.div_ceil(2);
        (down(down(self.cfg.dsp.n_mels)), down(down(frames)))
    }
}
