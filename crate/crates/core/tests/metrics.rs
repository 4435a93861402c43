use spectrovq::corpus::{gen_toy_corpus, NUM_CLASSES};
use spectrovq::dsp::{wave_to_logmel, DspParams, MelSpectrogram};
use spectrovq::metrics::*;

const CLIP_S: f64 = 24320.0 / 22050.0;

fn toy_specs(n_per_class: usize, seed: u64) -> (Vec<MelSpectrogram>, Vec<usize>) {
    let clips = gen_toy_corpus(n_per_class, CLIP_S, seed).unwrap();
    let specs = clips.iter().map(|c| wave_to_logmel(&c.wave, &DspParams::default()).unwrap()).collect();
    (specs, clips.iter().map(|c| c.label).collect())
}

#[test]
fn classifier_separates_toy_classes() {
    let (specs, labels) = toy_specs(8, 3);
    assert_eq!(specs[0].shape(), (80, 96));
    let model = train_classifier(&specs, &labels, &ClassifierTrainConfig::default(), 0).unwrap();
    let train_acc = classifier_accuracy(&model, &specs, &labels).unwrap();
    let (held, held_labels) = toy_specs(4, 99);
    let held_acc = classifier_accuracy(&model, &held, &held_labels).unwrap();
    println!("train {train_acc} held-out {held_acc}");
    assert!(train_acc >= 0.95, "train accuracy {train_acc}");
    assert!(held_acc >= 0.9, "held-out accuracy {held_acc}");
}

#[test]
fn identity_generator_scores_zero() {
    let (specs, labels) = toy_specs(2, 5);
    let model = train_classifier(&specs, &labels, &ClassifierTrainConfig { steps: 20, ..Default::default() }, 1).unwrap();
    let real: Vec<(MelSpectrogram, usize)> = specs.iter().cloned().zip(labels.iter().copied()).collect();
    let cfg = EvalConfig {
        n_samples_per_condition: 1,
        ..EvalConfig::default()
    };
    let r = evaluate(&real, |i, _, _| Ok(real[i].0.clone()), &model, &cfg, "fp").unwrap();
    assert!(r.fid < 1e-6, "fid {}", r.fid);
    assert!(r.mean_mkl < 1e-9);
    assert_eq!(r.sample_count, 8);
    let mean: f64 = r.per_condition_mkl.iter().sum::<f64>() / r.per_condition_mkl.len() as f64;
    assert_eq!(r.mean_mkl, mean);
    assert_eq!(EvalConfig::default().n_samples_per_condition, 10);

    // replaying ten draws keeps MKL at zero
    let r10 = evaluate(&real, |i, _, _| Ok(real[i].0.clone()), &model, &EvalConfig::default(), "fp").unwrap();
    assert!(r10.mean_mkl < 1e-9);
    assert_eq!(r10.sample_count, 80);
}

#[test]
fn evaluate_ignores_condition_order_and_reports_generator_failures() {
    let (specs, labels) = toy_specs(2, 6);
    let model = train_classifier(&specs, &labels, &ClassifierTrainConfig { steps: 20, ..Default::default() }, 2).unwrap();
    let real: Vec<(MelSpectrogram, usize)> = specs.iter().cloned().zip(labels.iter().copied()).collect();
    // each condition generates the spectrogram of the next class
    let fake_of = |label: usize| specs[((label + 1) % NUM_CLASSES) * 2].clone();
    let cfg = EvalConfig {
        n_samples_per_condition: 2,
        ..EvalConfig::default()
    };
    let a = evaluate(&real, |_, &l, _| Ok(fake_of(l)), &model, &cfg, "").unwrap();
    let mut rev = real.clone();
    rev.reverse();
    let b = evaluate(&rev, |_, &l, _| Ok(fake_of(l)), &model, &cfg, "").unwrap();
    assert!((a.mean_mkl - b.mean_mkl).abs() < 1e-12);
    assert!((a.fid - b.fid).abs() < 1e-9 * a.fid.max(1.0));
    assert!(a.mean_mkl > 0.0);

    let err = evaluate(
        &real,
        |i, _, _| if i == 3 { Err(spectrovq::Error::InvalidArgument("boom".into())) } else { Ok(real[i].0.clone()) },
        &model,
        &cfg,
        "",
    )
    .unwrap_err();
    assert!(err.to_string().contains("condition 3"), "{err}");
}

#[test]
fn fid_separates_classes_more_than_halves() {
    let (specs, labels) = toy_specs(8, 11);
    let model = train_classifier(&specs, &labels, &ClassifierTrainConfig::default(), 4).unwrap();
    let feats: Vec<Vec<f64>> = specs.iter().map(|s| model.features(s).unwrap()).collect();
    // interleave so both halves hold every class
    let even: Vec<Vec<f64>> = feats.iter().step_by(2).cloned().collect();
    let odd: Vec<Vec<f64>> = feats.iter().skip(1).step_by(2).cloned().collect();
    let halves = fid(&gaussian_stats(&even).unwrap(), &gaussian_stats(&odd).unwrap()).unwrap();
    let class = |c: usize| -> Vec<Vec<f64>> { feats.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(f, _)| f.clone()).collect() };
    let cross = fid(&gaussian_stats(&class(0)).unwrap(), &gaussian_stats(&class(2)).unwrap()).unwrap();
    println!("halves {halves} cross {cross}");
    assert!(cross > 10.0 * halves);
}
