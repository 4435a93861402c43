//! Configured end-to-end runs: corpus, codec, classifier, sampler, sampling
//! and evaluation, with every artifact written under one directory.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bitstream::{cropped_frames, decode_audio, encode_audio, save_bitstream};
use crate::codec::{save_codec, train_codebook, CodecConfig, CodecModel, LossConfig, ReconNorm, TrainConfig};
use crate::codes::{write_code_grid_file, CodeGrid};
use crate::corpus::{gen_condition_features, gen_toy_corpus, ToyClip, CONDITION_PRESETS, NUM_CLASSES};
use crate::dsp::{center_crop_time, wave_to_logmel, write_wav, DspParams, MelSpectrogram};
use crate::error::{invalid, Error, Result};
use crate::metrics::{evaluate, save_classifier, train_classifier, ClassifierModel, ClassifierTrainConfig, EvalConfig, MetricReport};
use crate::sampler::{
    make_null_condition, save_sampler, train_sampler, write_condition_file, ConditioningSequence, SamplerConfig, SamplerModel,
    SamplerTrainConfig, SamplingParams, TrainPair,
};

/// Which conditioning the sampler is trained and evaluated with.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConditionPreset {
    /// One fixed random vector shared by every clip.
    #[serde(rename = "no_feats")]
    NoFeats,
    #[serde(rename = "feats_1")]
    Feats1,
    #[default]
    #[serde(rename = "feats_5")]
    Feats5,
    #[serde(rename = "feats_212")]
    Feats212,
}

impl ConditionPreset {
    /// Feature rows per condition; `None` for the null condition.
    pub fn features(self) -> Option<usize> {
        match self {
            ConditionPreset::NoFeats => None,
            ConditionPreset::Feats1 => Some(CONDITION_PRESETS[0]),
            ConditionPreset::Feats5 => Some(CONDITION_PRESETS[1]),
            ConditionPreset::Feats212 => Some(CONDITION_PRESETS[2]),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ConditionPreset::NoFeats => "no_feats",
            ConditionPreset::Feats1 => "feats_1",
            ConditionPreset::Feats5 => "feats_5",
            ConditionPreset::Feats212 => "feats_212",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub clip_samples: usize,
    pub cond_dim: usize,
    pub cond_jitter: f64,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            train_per_class: 8,
            test_per_class: 4,
            clip_samples: 24_320,
            cond_dim: 16,
            cond_jitter: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecSection {
    pub codebook_size: usize,
    pub n_z: usize,
    pub channels: [usize; 5],
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta: f64,
    pub adv_weight: f64,
    pub adv_warmup_steps: usize,
    pub lpaps_weight: f64,
    pub recon_norm: ReconNorm,
}

impl Default for CodecSection {
    fn default() -> Self {
        let c = CodecConfig::default();
        let l = LossConfig::default();
        Self {
            codebook_size: c.codebook_size,
            n_z: c.n_z,
            channels: c.channels,
            steps: 600,
            batch_size: 8,
            lr: 5e-3,
            beta: l.beta,
            adv_weight: l.adv_weight,
            adv_warmup_steps: 300,
            lpaps_weight: l.lpaps_weight,
            recon_norm: l.recon_norm,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub condition: ConditionPreset,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub top_x: usize,
}

impl Default for SamplerSection {
    fn default() -> Self {
        let m = SamplerConfig::default();
        let t = SamplerTrainConfig::default();
        Self {
            condition: ConditionPreset::default(),
            width: m.width,
            layers: m.layers,
            heads: m.heads,
            steps: 600,
            batch_size: t.batch_size,
            lr: t.lr,
            weight_decay: t.weight_decay,
            top_x: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub feature_dim: usize,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        let t = ClassifierTrainConfig::default();
        Self {
            steps: t.steps,
            batch_size: t.batch_size,
            lr: t.lr,
            feature_dim: t.model.feature_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeedSection {
    pub corpus: u64,
    pub test_corpus: u64,
    pub codec: u64,
    pub classifier: u64,
    pub sampler: u64,
    pub sampling: u64,
    pub null_condition: u64,
}

impl Default for SeedSection {
    fn default() -> Self {
        Self {
            corpus: 1,
            test_corpus: 2,
            codec: 3,
            classifier: 4,
            sampler: 5,
            sampling: 6,
            null_condition: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: String,
    /// Worker threads for sample generation; 0 picks the machine default.
    pub threads: usize,
    pub griffin_lim_iters: usize,
    /// Test clips passed through the bitstream codec and vocoded.
    pub codec_clips: usize,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: "specvq_out".into(),
            threads: 0,
            griffin_lim_iters: 32,
            codec_clips: 4,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub output: OutputSection,
    pub seeds: SeedSection,
    pub corpus: CorpusSection,
    pub dsp: DspParams,
    pub codec: CodecSection,
    pub classifier: ClassifierSection,
    pub sampler: SamplerSection,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config serializes")
    }

    /// Hash of everything that affects results (not the output location or
    /// thread count).
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.output.dir.clear();
        c.output.threads = 0;
        let digest = Sha256::digest(c.to_toml().as_bytes());
        digest[..16].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn codec_train_config(&self) -> TrainConfig {
        let c = &self.codec;
        TrainConfig {
            codec: CodecConfig {
                dsp: self.dsp.clone(),
                codebook_size: c.codebook_size,
                n_z: c.n_z,
                channels: c.channels,
                ..CodecConfig::default()
            },
            loss: LossConfig {
                beta: c.beta,
                adv_weight: c.adv_weight,
                adv_warmup_steps: c.adv_warmup_steps,
                recon_norm: c.recon_norm,
                lpaps_weight: c.lpaps_weight,
            },
            steps: c.steps,
            batch_size: c.batch_size,
            lr: c.lr,
            disc_lr: c.lr,
            ..TrainConfig::default()
        }
    }

    pub fn classifier_train_config(&self) -> ClassifierTrainConfig {
        let c = &self.classifier;
        let mut t = ClassifierTrainConfig {
            steps: c.steps,
            batch_size: c.batch_size,
            lr: c.lr,
            ..ClassifierTrainConfig::default()
        };
        t.model.feature_dim = c.feature_dim;
        t
    }

    /// Frames each clip keeps after the center crop.
    pub fn frames(&self) -> usize {
        let t = self.dsp.clip_frames.unwrap_or(1 + self.corpus.clip_samples / self.dsp.hop);
        cropped_frames(t)
    }

    pub fn sampler_train_config(&self, preset: ConditionPreset) -> SamplerTrainConfig {
        let s = &self.sampler;
        SamplerTrainConfig {
            model: SamplerConfig {
                codebook_size: self.codec.codebook_size,
                cond_dim: self.corpus.cond_dim,
                cond_len: preset.features().unwrap_or(1),
                grid_rows: self.dsp.n_mels / crate::codec::DOWNSAMPLE,
                grid_cols: self.frames() / crate::codec::DOWNSAMPLE,
                width: s.width,
                layers: s.layers,
                heads: s.heads,
                class_token: None,
                seed: 0,
            },
            steps: s.steps,
            batch_size: s.batch_size,
            lr: s.lr,
            weight_decay: s.weight_decay,
            ..SamplerTrainConfig::default()
        }
    }

    /// Checks that every stage would accept its configuration.
    pub fn validate(&self) -> Result<()> {
        let c = &self.corpus;
        if c.train_per_class == 0 || c.test_per_class == 0 {
            return Err(invalid!("corpus needs at least one train and one test clip per class"));
        }
        if c.test_per_class * NUM_CLASSES < 2 {
            return Err(invalid!("FID needs at least 2 test clips"));
        }
        if c.clip_samples < self.dsp.n_fft {
            return Err(invalid!("clips of {} samples are shorter than one frame", c.clip_samples));
        }
        if self.frames() == 0 {
            return Err(invalid!("clips are shorter than one latent column"));
        }
        if !(c.cond_jitter >= 0.0) {
            return Err(invalid!("condition jitter must be non-negative"));
        }
        if c.cond_dim < NUM_CLASSES {
            return Err(invalid!("cond_dim must be at least {NUM_CLASSES}"));
        }
        let codec = self.codec_train_config();
        codec.codec.validate()?;
        codec.loss.validate()?;
        if self.codec.batch_size == 0 || self.sampler.batch_size == 0 || self.classifier.batch_size == 0 {
            return Err(invalid!("batch sizes must be positive"));
        }
        self.classifier_train_config().model.validate()?;
        self.sampler_train_config(self.sampler.condition).model.validate()?;
        if self.sampler.top_x == 0 || self.sampler.top_x > self.codec.codebook_size {
            return Err(invalid!("top_x {} outside 1..={}", self.sampler.top_x, self.codec.codebook_size));
        }
        if self.eval.n_samples_per_condition == 0 {
            return Err(invalid!("need at least one sample per condition"));
        }
        Ok(())
    }
}

/// Products of the condition-independent stages.
pub struct Prepared {
    pub cfg: ExperimentConfig,
    pub train: Vec<ToyClip>,
    pub test: Vec<ToyClip>,
    pub train_specs: Vec<MelSpectrogram>,
    pub test_specs: Vec<MelSpectrogram>,
    pub codec: CodecModel,
    pub classifier: ClassifierModel,
    pub train_grids: Vec<CodeGrid>,
}

fn logmel_cropped(clip: &ToyClip, dsp: &DspParams) -> Result<MelSpectrogram> {
    let s = wave_to_logmel(&clip.wave, dsp)?;
    center_crop_time(&s, cropped_frames(s.frames))
}

/// Corpus, codec and classifier.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let c = &cfg.corpus;
    let secs = c.clip_samples as f64 / cfg.dsp.sample_rate as f64;
    let corpus = |n, seed| -> Result<Vec<ToyClip>> {
        let mut clips = gen_toy_corpus(n, secs, seed)?;
        for clip in &mut clips {
            clip.wave = clip.wave.clone().fit_length(c.clip_samples);
        }
        Ok(clips)
    };
    let train = corpus(c.train_per_class, cfg.seeds.corpus).map_err(|e| e.in_stage("corpus"))?;
    let test = corpus(c.test_per_class, cfg.seeds.test_corpus).map_err(|e| e.in_stage("corpus"))?;
    let specs = |clips: &[ToyClip]| clips.iter().map(|k| logmel_cropped(k, &cfg.dsp)).collect::<Result<Vec<_>>>();
    let train_specs = specs(&train).map_err(|e| e.in_stage("mel"))?;
    let test_specs = specs(&test).map_err(|e| e.in_stage("mel"))?;

    let (codec, _) = train_codebook(&train_specs, &cfg.codec_train_config(), cfg.seeds.codec).map_err(|e| e.in_stage("train-codec"))?;
    let labels: Vec<usize> = train.iter().map(|k| k.label).collect();
    let classifier = train_classifier(&train_specs, &labels, &cfg.classifier_train_config(), cfg.seeds.classifier)
        .map_err(|e| e.in_stage("train-classifier"))?;
    let train_grids = train_specs
        .iter()
        .map(|s| codec.encode_codes(s))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.in_stage("encode"))?;
    Ok(Prepared {
        cfg: cfg.clone(),
        train,
        test,
        train_specs,
        test_specs,
        codec,
        classifier,
        train_grids,
    })
}

/// Condition of the `i`-th clip of a corpus under `preset`.
pub fn condition_for(cfg: &ExperimentConfig, preset: ConditionPreset, clip: &ToyClip) -> Result<ConditioningSequence> {
    match preset.features() {
        None => Ok(make_null_condition(cfg.corpus.cond_dim, cfg.seeds.null_condition)),
        Some(n) => gen_condition_features(clip.label, n, cfg.corpus.cond_dim, clip.seed, cfg.corpus.cond_jitter),
    }
}

fn draw_seed(base: u64, cond: usize, draw: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base ^ ((cond as u64) << 32) ^ draw as u64);
    rng.random()
}

pub struct ConditionRun {
    pub sampler: SamplerModel,
    pub report: MetricReport,
    /// Generated spectrograms, `n_samples_per_condition` per test clip.
    pub samples: Vec<Vec<MelSpectrogram>>,
}

fn thread_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| invalid!("thread pool: {e}"))
}

/// Trains the sampler under `preset`, generates for every test clip and
/// evaluates.
pub fn run_condition(prep: &Prepared, preset: ConditionPreset) -> Result<ConditionRun> {
    let cfg = &prep.cfg;
    let pairs = prep
        .train
        .iter()
        .zip(&prep.train_grids)
        .map(|(clip, grid)| {
            Ok(TrainPair {
                cond: condition_for(cfg, preset, clip)?,
                grid: grid.clone(),
                label: None,
            })
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.in_stage("train-sampler"))?;
    let (sampler, _) =
        train_sampler(&pairs, &cfg.sampler_train_config(preset), cfg.seeds.sampler).map_err(|e| e.in_stage("train-sampler"))?;

    let conds = prep
        .test
        .iter()
        .map(|clip| condition_for(cfg, preset, clip))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.in_stage("sample"))?;
    let n = cfg.eval.n_samples_per_condition;
    let steps = sampler.cfg.seq_len();
    let generate = |i: usize, d: usize| -> Result<MelSpectrogram> {
        let params = SamplingParams {
            top_x: cfg.sampler.top_x,
            seed: draw_seed(cfg.seeds.sampling, i, d),
            steps,
        };
        let grid = sampler.sample_codes(&conds[i], None, &params)?;
        prep.codec.decode_codes(&grid)
    };
    let t = Instant::now();
    let samples: Vec<Vec<MelSpectrogram>> = thread_pool(cfg.output.threads)?
        .install(|| {
            (0..conds.len())
                .into_par_iter()
                .map(|i| (0..n).map(|d| generate(i, d).map_err(|e| e.in_stage(format!("sample condition {i}")))).collect())
                .collect::<Result<Vec<Vec<_>>>>()
        })
        .map_err(|e| e.in_stage("sample"))?;
    let secs = t.elapsed().as_secs_f64();

    let real: Vec<(MelSpectrogram, usize)> = prep.test_specs.iter().cloned().zip(0..).collect();
    let mut report = evaluate(&real, |i, _, d| Ok(samples[i][d].clone()), &prep.classifier, &cfg.eval, &cfg.fingerprint())
        .map_err(|e| e.in_stage("evaluate"))?;
    report.wall_time_per_clip = secs / report.sample_count as f64;
    Ok(ConditionRun { sampler, report, samples })
}

fn write_artifacts(prep: &Prepared, run: &ConditionRun, dir: &Path) -> Result<()> {
    let cfg = &prep.cfg;
    let sub = |name: &str| -> Result<PathBuf> {
        let p = dir.join(name);
        std::fs::create_dir_all(&p)?;
        Ok(p)
    };
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml())?;
    for (split, clips) in [("corpus/train", &prep.train), ("corpus/test", &prep.test)] {
        let d = sub(split)?;
        for (i, clip) in clips.iter().enumerate() {
            let stem = format!("{i:03}_{}", crate::corpus::CLASS_NAMES[clip.label]);
            write_wav(d.join(format!("{stem}.wav")), &clip.wave)?;
            write_condition_file(d.join(format!("{stem}.cond")), &condition_for(cfg, cfg.sampler.condition, clip)?)?;
        }
    }
    save_codec(dir.join("codec.svqc"), &prep.codec)?;
    save_classifier(dir.join("classifier.svqm"), &prep.classifier)?;
    save_sampler(dir.join("sampler.svqs"), &run.sampler)?;
    let grids = sub("codes")?;
    for (i, g) in prep.train_grids.iter().enumerate() {
        write_code_grid_file(grids.join(format!("train_{i:03}.cgrd")), g)?;
    }
    let streams = sub("bitstreams")?;
    let decoded = sub("decoded")?;
    for (i, clip) in prep.test.iter().take(cfg.output.codec_clips).enumerate() {
        let bs = encode_audio(&clip.wave, &prep.codec)?;
        save_bitstream(streams.join(format!("test_{i:03}.svqb")), &bs)?;
        let wave = decode_audio(&bs, &prep.codec, cfg.output.griffin_lim_iters, cfg.seeds.sampling)?;
        write_wav(decoded.join(format!("test_{i:03}.wav")), &wave)?;
    }
    let gen = sub("samples")?;
    for (i, draws) in run.samples.iter().enumerate() {
        if let Some(first) = draws.first() {
            crate::dsp::write_spec_file(gen.join(format!("test_{i:03}.spec")), first)?;
        }
    }
    std::fs::write(dir.join("report.json"), run.report.to_json())?;
    std::fs::write(
        dir.join("timing.json"),
        format!("{{\n  \"wall_time_per_clip\": {}\n}}\n", run.report.wall_time_per_clip),
    )?;
    Ok(())
}

/// generate → train codec → train classifier → train sampler → sample →
/// evaluate, writing all artifacts under `cfg.output.dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<MetricReport> {
    let prep = prepare(cfg)?;
    let run = run_condition(&prep, cfg.sampler.condition)?;
    write_artifacts(&prep, &run, Path::new(&cfg.output.dir)).map_err(|e| e.in_stage("write"))?;
    Ok(run.report)
}
