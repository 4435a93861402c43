use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ckpt;
use crate::dsp::{DspParams, MelSpectrogram};
use crate::error::{invalid, shape_err, Error, Result};
use crate::nn::{Adam, AdamConfig, Conv2d, Graph, Linear, ParamStore, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub dsp: DspParams,
    pub frames: usize,
    pub num_classes: usize,
    /// Widths of the three stride-2 convolutions.
    pub channels: [usize; 3],
    pub feature_dim: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            dsp: DspParams::default(),
            frames: 96,
            num_classes: crate::corpus::NUM_CLASSES,
            channels: [4, 8, 8],
            feature_dim: 32,
            seed: 0,
        }
    }
}

impl ClassifierConfig {
    fn reduced(&self) -> (usize, usize) {
        let down = |n: usize| n.div_ceil(2).div_ceil(2).div_ceil(2);
        (down(self.dsp.n_mels), down(self.frames))
    }

    pub fn validate(&self) -> Result<()> {
        self.dsp.validate()?;
        if self.frames == 0 || self.num_classes < 2 || self.feature_dim == 0 || self.channels.contains(&0) {
            return Err(invalid!("classifier needs frames, ≥2 classes, features and channels"));
        }
        Ok(())
    }
}

/// Conv stack over a normalized spectrogram, a feature layer and a
/// `C`-way head.
#[derive(Clone, Debug)]
pub struct ClassifierModel {
    pub cfg: ClassifierConfig,
    pub(crate) store: ParamStore,
    convs: Vec<Conv2d>,
    feat: Linear,
    head: Linear,
}

impl ClassifierModel {
    pub fn new(cfg: ClassifierConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let c = cfg.channels;
        let convs = vec![
            Conv2d::new(&mut store, &mut rng, "cls.0", 1, c[0], 3, 2, false),
            Conv2d::new(&mut store, &mut rng, "cls.1", c[0], c[1], 3, 2, false),
            Conv2d::new(&mut store, &mut rng, "cls.2", c[1], c[2], 3, 2, false),
        ];
        let (h, w) = cfg.reduced();
        let feat = Linear::new(&mut store, &mut rng, "cls.feat", c[2] * h * w, cfg.feature_dim);
        let head = Linear::new(&mut store, &mut rng, "cls.head", cfg.feature_dim, cfg.num_classes);
        Ok(Self {
            cfg,
            store,
            convs,
            feat,
            head,
        })
    }

    fn batch(&self, specs: &[&MelSpectrogram]) -> Result<Tensor> {
        let lf = self.cfg.dsp.log_floor_value();
        let mut data = Vec::with_capacity(specs.len() * self.cfg.dsp.n_mels * self.cfg.frames);
        for s in specs {
            if s.shape() != (self.cfg.dsp.n_mels, self.cfg.frames) {
                return Err(shape_err!(
                    "classifier expects {}x{} spectrograms, got {}x{}",
                    self.cfg.dsp.n_mels,
                    self.cfg.frames,
                    s.n_mels(),
                    s.frames
                ));
            }
            data.extend(s.values.iter().map(|&v| (v - lf) / -lf * 2.0 - 1.0));
        }
        Ok(Tensor::new(vec![specs.len(), 1, self.cfg.dsp.n_mels, self.cfg.frames], data))
    }

    /// `(features [B, d], logits [B, C])`.
    fn forward(&self, g: &mut Graph, x: Var) -> (Var, Var) {
        let s = &self.store;
        let mut h = x;
        for c in &self.convs {
            h = c.forward(g, s, h);
            h = g.silu(h);
        }
        let b = g.shape(h)[0];
        let flat = g.value(h).numel() / b;
        let h = g.reshape(h, &[b, flat]);
        let f = self.feat.forward(g, s, h);
        let f = g.silu(f);
        let logits = self.head.forward(g, s, f);
        (f, logits)
    }

    fn run(&self, spec: &MelSpectrogram) -> Result<(Vec<f64>, Vec<f64>)> {
        let x = self.batch(&[spec])?;
        let mut g = Graph::inference();
        let xv = g.constant(x);
        let (f, l) = self.forward(&mut g, xv);
        Ok((g.value(f).data().to_vec(), g.value(l).data().to_vec()))
    }

    /// Pre-classification features.
    pub fn features(&self, spec: &MelSpectrogram) -> Result<Vec<f64>> {
        Ok(self.run(spec)?.0)
    }

    pub fn probs(&self, spec: &MelSpectrogram) -> Result<Vec<f64>> {
        let mut p = self.run(spec)?.1;
        crate::tensor::softmax_in_place(&mut p);
        Ok(p)
    }

    /// Both outputs from one forward pass.
    pub fn features_and_probs(&self, spec: &MelSpectrogram) -> Result<(Vec<f64>, Vec<f64>)> {
        let (f, mut p) = self.run(spec)?;
        crate::tensor::softmax_in_place(&mut p);
        Ok((f, p))
    }

    pub fn predict(&self, spec: &MelSpectrogram) -> Result<usize> {
        let p = self.probs(spec)?;
        Ok((0..p.len()).fold(0, |best, i| if p[i] > p[best] { i } else { best }))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierTrainConfig {
    pub model: ClassifierConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            model: ClassifierConfig::default(),
            steps: 150,
            batch_size: 16,
            lr: 3e-3,
        }
    }
}

pub fn train_classifier(specs: &[MelSpectrogram], labels: &[usize], cfg: &ClassifierTrainConfig, seed: u64) -> Result<ClassifierModel> {
    if specs.is_empty() || specs.len() != labels.len() {
        return Err(invalid!("need one label per spectrogram and at least one of each"));
    }
    if cfg.batch_size == 0 {
        return Err(invalid!("batch size must be positive"));
    }
    let first = &specs[0];
    let mut model = ClassifierModel::new(ClassifierConfig {
        dsp: first.params.clone(),
        frames: first.frames,
        seed,
        ..cfg.model.clone()
    })?;
    if let Some(&l) = labels.iter().find(|&&l| l >= model.cfg.num_classes) {
        return Err(invalid!("label {l} outside {} classes", model.cfg.num_classes));
    }
    let mut opt = Adam::new(
        &model.store,
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc1a5_0f1e);
    let mut order: Vec<usize> = (0..specs.len()).collect();
    let batch = cfg.batch_size.min(order.len());
    let mut cursor = order.len();
    for step in 0..cfg.steps {
        if cursor + batch > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let picks = &order[cursor..cursor + batch];
        cursor += batch;
        let refs: Vec<&MelSpectrogram> = picks.iter().map(|&i| &specs[i]).collect();
        let targets: Vec<usize> = picks.iter().map(|&i| labels[i]).collect();
        let x = model.batch(&refs)?;
        let mut g = Graph::new();
        let xv = g.constant(x);
        let (_, logits) = model.forward(&mut g, xv);
        let loss = g.cross_entropy(logits, &targets);
        let lv = g.value(loss).item();
        if !lv.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("classifier cross-entropy {lv}"),
            });
        }
        let grads = g.backward(loss);
        opt.step(&mut model.store, &grads.param_grads());
    }
    Ok(model)
}

pub fn classifier_accuracy(model: &ClassifierModel, specs: &[MelSpectrogram], labels: &[usize]) -> Result<f64> {
    if specs.is_empty() || specs.len() != labels.len() {
        return Err(invalid!("need one label per spectrogram"));
    }
    let mut hits = 0;
    for (s, &l) in specs.iter().zip(labels) {
        hits += usize::from(model.predict(s)? == l);
    }
    Ok(hits as f64 / specs.len() as f64)
}

const MAGIC: &[u8; 4] = b"SVQM";
const WHAT: &str = "classifier checkpoint";

fn fields(cfg: &ClassifierConfig) -> [u32; 4] {
    [cfg.num_classes as u32, cfg.feature_dim as u32, cfg.dsp.n_mels as u32, cfg.frames as u32]
}

/// `SVQM` checkpoint: header fields `C, d, F, T`.
pub fn write_classifier(model: &ClassifierModel) -> Vec<u8> {
    let json = serde_json::to_string(&model.cfg).expect("classifier config serializes");
    ckpt::write(MAGIC, &fields(&model.cfg), &json, &model.store)
}

pub fn read_classifier(bytes: &[u8]) -> Result<ClassifierModel> {
    let parsed = ckpt::read(WHAT, MAGIC, 4, bytes)?;
    let cfg: ClassifierConfig =
        serde_json::from_str(&parsed.config_json).map_err(|e| Error::format(WHAT, format!("config: {e}")))?;
    if parsed.fields != fields(&cfg) {
        return Err(Error::format(WHAT, "header fields disagree with the embedded config"));
    }
    let mut model = ClassifierModel::new(cfg)?;
    ckpt::restore(WHAT, &parsed, &mut model.store)?;
    Ok(model)
}

pub fn save_classifier(path: impl AsRef<Path>, model: &ClassifierModel) -> Result<()> {
    std::fs::write(path, write_classifier(model))?;
    Ok(())
}

pub fn load_classifier(path: impl AsRef<Path>) -> Result<ClassifierModel> {
    read_classifier(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(v: f64) -> MelSpectrogram {
        let p = DspParams::default();
        MelSpectrogram::new(p.clone(), 16, vec![v; p.n_mels * 16]).unwrap()
    }

    #[test]
    fn probs_and_features() {
        let m = ClassifierModel::new(ClassifierConfig {
            frames: 16,
            ..ClassifierConfig::default()
        })
        .unwrap();
        let s = spec(-3.0);
        let p = m.probs(&s).unwrap();
        assert_eq!(p.len(), 4);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(m.features(&s).unwrap(), m.features(&s).unwrap());
        assert_eq!(m.features(&s).unwrap().len(), 32);
        let p2 = DspParams::default();
        let wrong = MelSpectrogram::new(p2.clone(), 20, vec![0.0; p2.n_mels * 20]).unwrap();
        assert!(m.probs(&wrong).is_err());
        let back = read_classifier(&write_classifier(&m)).unwrap();
        assert_eq!(back.probs(&s).unwrap(), p);
    }
}
