use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use spectrovq::bitstream::{decode_audio, encode_audio, load_bitstream, save_bitstream};
use spectrovq::codec::{load_codec, save_codec, train_codebook, CodecModel};
use spectrovq::codes::write_code_grid_file;
use spectrovq::corpus::{gen_toy_corpus, CLASS_NAMES};
use spectrovq::dsp::{center_crop_time, read_spec_file, read_wav, wave_to_logmel, write_spec_file, write_wav, MelSpectrogram};
use spectrovq::experiment::{condition_for, run_experiment, ExperimentConfig};
use spectrovq::metrics::{evaluate, load_classifier, save_classifier, train_classifier, KlDirection};
use spectrovq::sampler::{
    load_sampler, make_null_condition, read_condition_file, save_sampler, train_sampler, write_condition_file, ConditioningSequence,
    SamplingParams, TrainPair,
};
use spectrovq::{CodeGrid, Error, Result};

const OUT_DIR_ENV: &str = "SPECVQ_OUT_DIR";
const THREADS_ENV: &str = "SPECVQ_THREADS";

#[derive(Parser)]
#[command(name = "spectrovq", version, about = "Vector-quantized spectrogram codec and conditional sampler")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigArg {
    /// Experiment config (TOML); defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Ok(dir) = std::env::var(OUT_DIR_ENV) {
            cfg.output.dir = dir;
        }
        if let Ok(t) = std::env::var(THREADS_ENV) {
            cfg.output.threads = t.parse().map_err(|_| Error::Config(format!("{THREADS_ENV}={t} is not a thread count")))?;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Log-mel spectrogram of a WAV file.
    Mel {
        input: PathBuf,
        #[arg(short)]
        o: PathBuf,
        /// Center crop to a whole number of latent columns.
        #[arg(long)]
        crop: bool,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Train the codec on spectrogram files.
    TrainCodec {
        #[arg(required = true)]
        specs: Vec<PathBuf>,
        #[arg(short)]
        o: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Per-step losses as JSON.
        #[arg(long)]
        history: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Train the feature classifier used by `eval`.
    TrainClassifier {
        #[arg(required = true)]
        specs: Vec<PathBuf>,
        /// One class index per spectrogram, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        labels: Vec<usize>,
        #[arg(short)]
        o: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Train the sampler on (code grid, condition) pairs given in matching order.
    TrainSampler {
        /// Code grids (.cgrd) or bitstreams (.svqb).
        #[arg(long, num_args = 1.., required = true)]
        codes: Vec<PathBuf>,
        #[arg(long, num_args = 1.., required = true)]
        cond: Vec<PathBuf>,
        #[arg(short)]
        o: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Sample a code grid.
    Sample {
        #[arg(long)]
        sampler: PathBuf,
        #[arg(long, conflicts_with = "no_feats", required_unless_present = "no_feats")]
        cond: Option<PathBuf>,
        /// Condition on a fixed random vector instead of features.
        #[arg(long)]
        no_feats: bool,
        #[arg(long, default_value_t = 7)]
        null_seed: u64,
        /// Codes (.cgrd or .svqb) whose leading columns fix the prefix.
        #[arg(long)]
        prime: Option<PathBuf>,
        /// Primed columns; defaults to half the grid.
        #[arg(long, requires = "prime")]
        prime_cols: Option<usize>,
        #[arg(long, default_value_t = 8)]
        top_x: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short)]
        o: PathBuf,
    },
    /// WAV to bitstream.
    Encode {
        input: PathBuf,
        #[arg(long)]
        codec: PathBuf,
        #[arg(short)]
        o: PathBuf,
    },
    /// Bitstream to WAV.
    Decode {
        input: PathBuf,
        #[arg(long)]
        codec: PathBuf,
        #[arg(short)]
        o: PathBuf,
        #[arg(long, default_value_t = 32)]
        gl_iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// FID and MKL of generated against real spectrograms.
    Eval {
        #[arg(long)]
        classifier: PathBuf,
        /// One real spectrogram per condition.
        #[arg(long, num_args = 1.., required = true)]
        real: Vec<PathBuf>,
        /// Generated spectrograms (.spec) or code grids (.cgrd, needs
        /// --codec), `--per-condition` per real file in the same order.
        #[arg(long, num_args = 1.., required = true)]
        fake: Vec<PathBuf>,
        #[arg(long, default_value_t = 1)]
        per_condition: usize,
        #[arg(long)]
        codec: Option<PathBuf>,
        #[arg(long, value_parser = parse_direction, default_value = "real_fake")]
        kl_direction: KlDirection,
        #[arg(long)]
        report: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Toy corpus as WAV and condition files.
    Corpus {
        #[arg(short)]
        o: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// The whole pipeline from one config.
    Run {
        #[command(flatten)]
        config: ConfigArg,
    },
}

fn parse_direction(s: &str) -> std::result::Result<KlDirection, String> {
    match s {
        "real_fake" => Ok(KlDirection::RealFake),
        "fake_real" => Ok(KlDirection::FakeReal),
        _ => Err(format!("expected real_fake or fake_real, got {s}")),
    }
}

fn read_codes(path: &Path) -> Result<CodeGrid> {
    let bytes = std::fs::read(path)?;
    if bytes.starts_with(b"SVQB") {
        spectrovq::bitstream::CodecBitstream::from_bytes(&bytes)?.grid()
    } else {
        spectrovq::codes::read_code_grid(&bytes)
    }
}

fn read_fake(path: &Path, codec: Option<&CodecModel>) -> Result<MelSpectrogram> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("cgrd") | Some("svqb") => {
            let codec = codec.ok_or_else(|| Error::Config(format!("{} holds codes; pass --codec", path.display())))?;
            codec.decode_codes(&read_codes(path)?)
        }
        _ => read_spec_file(path),
    }
}

fn crop(spec: &MelSpectrogram) -> Result<MelSpectrogram> {
    center_crop_time(spec, spectrovq::bitstream::cropped_frames(spec.frames))
}

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(name))
}

/// Exit status 1 for bad invocations, 2 for failures while running.
enum Failure {
    Usage(Error),
    Stage(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Stage(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Stage(e.into())
    }
}

fn usage(msg: String) -> Failure {
    Failure::Usage(Error::Config(msg))
}

fn run(cmd: Cmd) -> std::result::Result<(), Failure> {
    match cmd {
        Cmd::Mel { input, o, crop: c, config } => {
            let cfg = config.load().map_err(Failure::Usage)?;
            let wave = read_wav(&input, cfg.dsp.sample_rate)?;
            let mut spec = stage("mel", wave_to_logmel(&wave, &cfg.dsp))?;
            if c {
                spec = crop(&spec)?;
            }
            Ok(write_spec_file(o, &spec)?)
        }
        Cmd::TrainCodec {
            specs,
            o,
            steps,
            seed,
            history,
            config,
        } => {
            let cfg = config.load().map_err(Failure::Usage)?;
            let mut tc = cfg.codec_train_config();
            if let Some(s) = steps {
                tc.steps = s;
            }
            let specs = specs.iter().map(|p| read_spec_file(p).and_then(|s| crop(&s))).collect::<Result<Vec<_>>>()?;
            if let Some(first) = specs.first() {
                tc.codec.dsp = first.params.clone();
            }
            let (model, hist) = stage("train-codec", train_codebook(&specs, &tc, seed.unwrap_or(cfg.seeds.codec)))?;
            save_codec(o, &model)?;
            if let Some(h) = history {
                std::fs::write(h, serde_json::to_string_pretty(&hist).expect("history serializes"))?;
            }
            Ok(())
        }
        Cmd::TrainClassifier {
            specs,
            labels,
            o,
            seed,
            config,
        } => {
            let cfg = config.load().map_err(Failure::Usage)?;
            if labels.len() != specs.len() {
                return Err(usage(format!("{} labels for {} spectrograms", labels.len(), specs.len())));
            }
            let specs = specs.iter().map(|p| read_spec_file(p).and_then(|s| crop(&s))).collect::<Result<Vec<_>>>()?;
            let tc = cfg.classifier_train_config();
            let model = stage("train-classifier", train_classifier(&specs, &labels, &tc, seed.unwrap_or(cfg.seeds.classifier)))?;
            Ok(save_classifier(o, &model)?)
        }
        Cmd::TrainSampler {
            codes,
            cond,
            o,
            steps,
            seed,
            config,
        } => {
            let cfg = config.load().map_err(Failure::Usage)?;
            if codes.len() != cond.len() {
                return Err(usage(format!("{} code files for {} condition files", codes.len(), cond.len())));
            }
            let pairs = codes
                .iter()
                .zip(&cond)
                .map(|(g, c)| {
                    Ok(TrainPair {
                        grid: read_codes(g)?,
                        cond: read_condition_file(c)?,
                        label: None,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let mut tc = cfg.sampler_train_config(cfg.sampler.condition);
            let (g0, c0) = (&pairs[0].grid, &pairs[0].cond);
            tc.model.codebook_size = g0.k;
            tc.model.grid_rows = g0.rows;
            tc.model.grid_cols = g0.cols;
            tc.model.cond_len = c0.n;
            tc.model.cond_dim = c0.dim;
            if let Some(s) = steps {
                tc.steps = s;
            }
            let (model, _) = stage("train-sampler", train_sampler(&pairs, &tc, seed.unwrap_or(cfg.seeds.sampler)))?;
            Ok(save_sampler(o, &model)?)
        }
        Cmd::Sample {
            sampler,
            cond,
            no_feats: _,
            null_seed,
            prime,
            prime_cols,
            top_x,
            seed,
            o,
        } => {
            let model = load_sampler(sampler)?;
            let c = match cond {
                Some(p) => read_condition_file(p)?,
                None => {
                    let null = make_null_condition(model.cfg.cond_dim, null_seed);
                    let rows = model.cfg.cond_len;
                    ConditioningSequence::new(rows, null.dim, null.features.repeat(rows))?
                }
            };
            let params = SamplingParams {
                top_x,
                seed,
                steps: model.cfg.seq_len(),
            };
            let grid = match prime {
                Some(p) => {
                    let g = read_codes(&p)?;
                    let cols = prime_cols.unwrap_or(g.cols / 2).min(g.cols);
                    let seq = spectrovq::codes::flatten_column_major(&g);
                    stage("sample", model.prime_with_prefix(&c, None, &seq[..cols * g.rows], &params))?
                }
                None => stage("sample", model.sample_codes(&c, None, &params))?,
            };
            Ok(write_code_grid_file(o, &grid)?)
        }
        Cmd::Encode { input, codec, o } => {
            let codec = load_codec(codec)?;
            let wave = read_wav(&input, codec.cfg.dsp.sample_rate)?;
            Ok(save_bitstream(o, &stage("encode", encode_audio(&wave, &codec))?)?)
        }
        Cmd::Decode {
            input,
            codec,
            o,
            gl_iters,
            seed,
        } => {
            let codec = load_codec(codec)?;
            let bs = load_bitstream(input)?;
            Ok(write_wav(o, &stage("decode", decode_audio(&bs, &codec, gl_iters, seed))?)?)
        }
        Cmd::Eval {
            classifier,
            real,
            fake,
            per_condition,
            codec,
            kl_direction,
            report,
            config,
        } => {
            let cfg = config.load().map_err(Failure::Usage)?;
            if per_condition == 0 || fake.len() != real.len() * per_condition {
                return Err(usage(format!(
                    "{} fakes for {} real files at {per_condition} per condition",
                    fake.len(),
                    real.len()
                )));
            }
            let clf = load_classifier(classifier)?;
            let codec = codec.map(load_codec).transpose()?;
            let real = real.iter().map(|p| Ok((read_spec_file(p)?, ()))).collect::<Result<Vec<_>>>()?;
            let mut ev = cfg.eval.clone();
            ev.n_samples_per_condition = per_condition;
            ev.kl_direction = kl_direction;
            let rep = stage(
                "eval",
                evaluate(&real, |i, _, d| read_fake(&fake[i * per_condition + d], codec.as_ref()), &clf, &ev, &cfg.fingerprint()),
            )?;
            std::fs::write(report, rep.to_json())?;
            Ok(())
        }
        Cmd::Corpus { o, config } => {
            let cfg = config.load().map_err(Failure::Usage)?;
            let c = &cfg.corpus;
            let secs = c.clip_samples as f64 / cfg.dsp.sample_rate as f64;
            for (split, n, seed) in [("train", c.train_per_class, cfg.seeds.corpus), ("test", c.test_per_class, cfg.seeds.test_corpus)] {
                let dir = o.join(split);
                std::fs::create_dir_all(&dir)?;
                for (i, mut clip) in stage("corpus", gen_toy_corpus(n, secs, seed))?.into_iter().enumerate() {
                    clip.wave = clip.wave.fit_length(c.clip_samples);
                    let stem = format!("{i:03}_{}", CLASS_NAMES[clip.label]);
                    write_wav(dir.join(format!("{stem}.wav")), &clip.wave)?;
                    write_condition_file(dir.join(format!("{stem}.cond")), &condition_for(&cfg, cfg.sampler.condition, &clip)?)?;
                }
            }
            Ok(())
        }
        Cmd::Run { config } => {
            let cfg = config.load().map_err(Failure::Usage)?;
            let rep = run_experiment(&cfg)?;
            println!("fid {:.4} mean_mkl {:.4} ({} samples) -> {}", rep.fid, rep.mean_mkl, rep.sample_count, cfg.output.dir);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (code, e) = match f {
                Failure::Usage(e) => (1, e),
                Failure::Stage(e) => (2, e),
            };
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::from(code)
        }
    }
}
