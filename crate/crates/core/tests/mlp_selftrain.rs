mod common;

use bimkit::selftrain::{
    balance, cross_entropy, evaluate, metrics, self_train_loop, train_seed, two_stage_finetune, Metrics,
    PredictionDistribution, SelfTrainConfig, TrainSettings,
};
use bimkit::surf::mlp::{train_layers, Stage};
use bimkit::surf::{Activation, Dataset, MlpModel, OutputKind, Targets, TrainConfig};
use bimkit::synth::{generate_city, CityConfig};
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for draw in 0..10 {
        let model = MlpModel::new(&[2, 3, 2], Activation::Tanh, OutputKind::Softmax, draw).unwrap();
        let x: Vec<Vec<f64>> = (0..8).map(|_| vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]).collect();
        let y: Vec<usize> = (0..8).map(|_| rng.random_range(0..2)).collect();
        let data = Dataset::new(x, Targets::Classes(y)).unwrap();
        let err = gradient_check(&model, &data, 1e-5);
        assert!(err < 1e-4, "draw {draw}: {err}");
    }
}

#[test]
fn regression_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for draw in 0..5 {
        let model = MlpModel::new(&[3, 4, 2], Activation::Tanh, OutputKind::Identity, draw).unwrap();
        let x: Vec<Vec<f64>> = (0..6).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let y: Vec<Vec<f64>> = (0..6).map(|_| (0..2).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let data = Dataset::new(x, Targets::Values(y)).unwrap();
        assert!(gradient_check(&model, &data, 1e-5) < 1e-4);
    }
}

#[test]
fn cross_entropy_closed_forms() {
    let uniform = PredictionDistribution::new([0.5, 0.5]).unwrap();
    assert!((cross_entropy(&uniform, 0) - std::f64::consts::LN_2).abs() < 1e-12);
    assert!((cross_entropy(&uniform, 1) - std::f64::consts::LN_2).abs() < 1e-12);
    let sure = PredictionDistribution::new([0.0, 1.0]).unwrap();
    assert!(cross_entropy(&sure, 1).abs() < 1e-11);
    assert!((cross_entropy(&sure, 0) + 1e-12f64.ln()).abs() < 1e-9);
}

#[test]
fn separable_blobs_are_learned() {
    let (x, y) = blobs(200, 4.0, 0.5, 3);
    assert_eq!(logistic_accuracy(&x, &y, 500, 0.5), 1.0, "oracle says separable");
    let data = Dataset::new(x, Targets::Classes(y)).unwrap();
    let cfg = TrainConfig {
        epochs: 500,
        seed: 3,
        ..TrainConfig::default()
    };
    let trained = bimkit::surf::mlp_train(&data, &[2, 8, 2], Activation::Tanh, &cfg).unwrap();
    let correct = data
        .features
        .iter()
        .zip(match &data.targets {
            Targets::Classes(c) => c,
            Targets::Values(_) => unreachable!(),
        })
        .filter(|(f, &c)| bimkit::surf::mlp::argmax(&trained.model.predict(f).unwrap()) == c)
        .count();
    assert!(correct as f64 / 200.0 >= 0.99);
}

/// With the body frozen, stage 1 is plain softmax regression on the
/// penultimate activations. Training that detached head separately must
/// give the same trace and the same output layer.
#[test]
fn head_only_stage_equals_detached_head() {
    let (x, y) = blobs(120, 1.5, 1.0, 9);
    let data = Dataset::new(x, Targets::Classes(y.clone())).unwrap();
    let settings = TrainSettings {
        hidden: vec![5],
        stage1_epochs: 15,
        stage2_epochs: 0,
        seed: 4,
        ..TrainSettings::default()
    };
    let model = MlpModel::new(&[2, 5, 2], Activation::Tanh, OutputKind::Softmax, 4).unwrap();
    let tuned = two_stage_finetune(model.clone(), &data, 15, 0, &settings).unwrap();
    assert_eq!(tuned.model.layers[0], model.layers[0]);

    let pen: Vec<Vec<f64>> = data.features.iter().map(|f| model.penultimate(f).unwrap()).collect();
    let mut head = MlpModel::new(&[5, 2], Activation::Tanh, OutputKind::Softmax, 0).unwrap();
    head.layers[0] = model.layers[1].clone();
    let cfg = TrainConfig {
        lr: settings.lr,
        epochs: 15,
        batch_size: settings.batch_size,
        seed: 4,
        momentum: settings.momentum,
    };
    let detached = train_layers(head, &Dataset::new(pen, Targets::Classes(y)).unwrap(), &cfg, 0, Stage::Full).unwrap();
    for (a, b) in tuned.trace.iter().zip(&detached.trace) {
        assert_eq!(a.stage, Stage::HeadOnly);
        assert!((a.loss - b.loss).abs() < 1e-10);
    }
    for (a, b) in tuned.model.layers[1].weights.iter().zip(&detached.model.layers[0].weights) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn published_f1_values_follow_from_precision_and_recall() {
    for (p, r, f1) in [(8416, 8280, 83.47), (8232, 8312, 82.71), (8139, 8377, 82.56), (8052, 8052, 80.52)] {
        let m = Metrics::from_confusion(confusion_for(p, r));
        assert!((m.precision * 1e4 - p as f64).abs() < 1e-6);
        assert!((m.recall * 1e4 - r as f64).abs() < 1e-6);
        assert!((m.f1 * 100.0 - f1).abs() <= 0.01, "{} vs {f1}", m.f1 * 100.0);
    }
}

#[test]
fn metrics_match_hand_count() {
    let preds = [1, 1, 0, 0, 1, 0, 1, 1];
    let labels = [1, 0, 0, 1, 1, 0, 1, 0];
    let m = metrics(&preds, &labels, 1).unwrap();
    // tp 3, fp 2, fn 1, tn 2
    assert!((m.precision - 0.6).abs() < 1e-12);
    assert!((m.recall - 0.75).abs() < 1e-12);
    assert!((m.f1 - 2.0 * 0.45 / 1.35).abs() < 1e-12);
    assert!((m.accuracy - 0.625).abs() < 1e-12);
}

/// Held-out accuracy of the seed-only model and of the self-trained model,
/// plus the labeled set sizes before and after.
pub fn selftrain_trial(seed: u64) -> (f64, f64, usize, usize) {
    let city = generate_city(&CityConfig {
        n_buildings: 500,
        seed,
        ..CityConfig::default()
    });
    let split = city.selftrain_split(seed);
    let cfg = SelfTrainConfig::default();
    let baseline_model = train_seed(&balance(&split.seed, cfg.training.seed).unwrap(), &cfg.training).unwrap();
    let baseline = evaluate(&baseline_model.model, &split.test).unwrap().accuracy;
    let out = self_train_loop(&split.seed, &split.pool, &cfg, None).unwrap();
    let after = evaluate(&out.model.model, &split.test).unwrap().accuracy;
    (baseline, after, split.seed.len(), out.labeled.len())
}

/// Every seed expands the labeled set by at least 20%, and mean held-out
/// accuracy over the five seeds stays within one point of the seed-only
/// mean. Single seeds can dip by a couple of test items.
#[test]
fn self_training_expands_without_degrading_on_average() {
    let (mut base_sum, mut after_sum) = (0.0, 0.0);
    for seed in 1..=5 {
        let (base, after, before_n, after_n) = selftrain_trial(seed);
        assert!(after_n as f64 >= 1.2 * before_n as f64, "seed {seed}: {before_n} -> {after_n}");
        base_sum += base;
        after_sum += after;
    }
    assert!(after_sum / 5.0 >= base_sum / 5.0 - 0.01);
}
