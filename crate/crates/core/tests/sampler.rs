mod common;

use std::time::Instant;

use rand::Rng;
use spectrovq::codes::flatten_column_major;
use spectrovq::nn::AttnMask;
use spectrovq::sampler::{
    make_null_condition, teacher_forced_accuracy, train_sampler, ConditioningSequence, SamplerConfig, SamplerModel, SamplerTrainConfig,
    SamplingParams, TrainPair,
};
use spectrovq::CodeGrid;

const MEMO_PAIRS: usize = 16;

fn memo_pairs(cfg: &SamplerConfig, seed: u64) -> Vec<TrainPair> {
    let mut r = common::rng(seed);
    (0..MEMO_PAIRS)
        .map(|_| {
            let cond = ConditioningSequence::new(
                cfg.cond_len,
                cfg.cond_dim,
                (0..cfg.cond_len * cfg.cond_dim).map(|_| r.random_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let idx = (0..cfg.seq_len()).map(|_| r.random_range(0..cfg.codebook_size as u32)).collect();
            TrainPair {
                cond,
                grid: CodeGrid::new(cfg.grid_rows, cfg.grid_cols, cfg.codebook_size, idx).unwrap(),
                label: None,
            }
        })
        .collect()
}

fn greedy(model: &SamplerModel, seed: u64) -> SamplingParams {
    SamplingParams {
        top_x: 1,
        seed,
        steps: model.cfg.seq_len(),
    }
}

#[test]
fn memorizes_sixteen_pairs_and_completes_primed_halves() {
    let cfg = SamplerTrainConfig {
        steps: 400,
        ..SamplerTrainConfig::default()
    };
    let pairs = memo_pairs(&cfg.model, 21);
    let t = Instant::now();
    let (model, hist) = train_sampler(&pairs, &cfg, 3).unwrap();
    println!("trained in {:.1}s, final loss {:.4}", t.elapsed().as_secs_f64(), hist.losses.last().unwrap());
    let m = model.cfg.seq_len();
    let mut hits = 0;
    for p in &pairs {
        let g = model.sample_codes(&p.cond, None, &greedy(&model, 0)).unwrap();
        hits += g.indices.iter().zip(&p.grid.indices).filter(|(a, b)| a == b).count();
    }
    let acc = hits as f64 / (MEMO_PAIRS * m) as f64;
    println!("greedy token accuracy {acc:.4}, teacher forced {:.4}", teacher_forced_accuracy(&model, &pairs).unwrap());
    assert!(acc >= 0.95, "greedy accuracy {acc}");
    for (i, p) in pairs.iter().enumerate() {
        let seq = flatten_column_major(&p.grid);
        let g = model.prime_with_prefix(&p.cond, None, &seq[..m / 2], &greedy(&model, 1)).unwrap();
        assert_eq!(g, p.grid, "pair {i} primed completion");
    }
}

fn random_model(seed: u64) -> (SamplerModel, ConditioningSequence, Vec<u32>) {
    let cfg = SamplerConfig {
        cond_len: 3,
        seed,
        ..SamplerConfig::default()
    };
    let mut r = common::rng(seed);
    let cond = ConditioningSequence::new(3, cfg.cond_dim, (0..3 * cfg.cond_dim).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
    let seq = (0..cfg.seq_len()).map(|_| r.random_range(0..cfg.codebook_size as u32)).collect();
    (SamplerModel::new(cfg).unwrap(), cond, seq)
}

#[test]
fn perturbing_a_code_never_changes_earlier_predictions() {
    let (model, cond, seq) = random_model(4);
    let m = model.cfg.seq_len();
    for j in [0, 1, 7, m / 2, m - 2] {
        let mut bumped = seq.clone();
        bumped[j] = (bumped[j] + 1) % model.cfg.codebook_size as u32;
        for p in 0..=j {
            let a = model.next_token_distribution(&cond, None, &seq[..p]).unwrap();
            let b = model.next_token_distribution(&cond, None, &bumped[..p]).unwrap();
            assert_eq!(a, b, "code {j} leaked into prediction {p}");
        }
        let a = model.next_token_distribution(&cond, None, &seq[..j + 1]).unwrap();
        let b = model.next_token_distribution(&cond, None, &bumped[..j + 1]).unwrap();
        assert_ne!(a, b, "code {j} invisible to prediction {}", j + 1);
    }
}

#[test]
fn condition_reaches_every_code_through_the_mask() {
    let (model, cond, seq) = random_model(5);
    let mut other = cond.clone();
    other.features[cond.dim + 2] += 0.5;
    assert_ne!(
        model.next_token_distribution(&cond, None, &[]).unwrap(),
        model.next_token_distribution(&other, None, &[]).unwrap()
    );
    assert_ne!(
        model.next_token_distribution(&cond, None, &seq[..20]).unwrap(),
        model.next_token_distribution(&other, None, &seq[..20]).unwrap()
    );
    // Sequence axis is [condition rows : codes]; codes see every condition row
    // and no later code.
    let prefix = model.cfg.prefix_len();
    let total = prefix + model.cfg.seq_len() - 1;
    for q in prefix..total {
        assert!((0..prefix).all(|c| AttnMask::Causal.allows(q, c)));
        assert!((q + 1..total).all(|k| !AttnMask::Causal.allows(q, k)));
    }
}

#[test]
fn training_and_sampling_are_reproducible() {
    let cfg = SamplerTrainConfig {
        steps: 20,
        ..SamplerTrainConfig::default()
    };
    let pairs = memo_pairs(&cfg.model, 8);
    let (a, ha) = train_sampler(&pairs, &cfg, 1).unwrap();
    let (b, hb) = train_sampler(&pairs, &cfg, 1).unwrap();
    assert_eq!(a.params().flat(), b.params().flat());
    assert_eq!(ha, hb);
    let params = SamplingParams {
        top_x: 16,
        seed: 99,
        steps: a.cfg.seq_len(),
    };
    let null = make_null_condition(a.cfg.cond_dim, 3);
    assert_eq!(a.sample_codes(&null, None, &params).unwrap(), b.sample_codes(&null, None, &params).unwrap());
    let other = SamplingParams { seed: 100, ..params };
    assert_ne!(a.sample_codes(&null, None, &params).unwrap(), a.sample_codes(&null, None, &other).unwrap());
}

#[test]
fn times_a_full_size_grid() {
    let model = SamplerModel::new(SamplerConfig {
        grid_cols: 53,
        ..SamplerConfig::default()
    })
    .unwrap();
    let cond = make_null_condition(model.cfg.cond_dim, 1);
    let t = Instant::now();
    let g = model
        .sample_codes(
            &cond,
            None,
            &SamplingParams {
                top_x: 8,
                seed: 1,
                steps: 265,
            },
        )
        .unwrap();
    let secs = t.elapsed().as_secs_f64();
    assert_eq!((g.rows, g.cols), (5, 53));
    // 53 columns cover 848 frames, about 9.8 s of audio.
    println!("sampled a 5x53 grid in {secs:.3}s (clip length 9.84s)");
}
