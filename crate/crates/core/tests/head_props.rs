mod common;

use std::collections::BTreeMap;

use common::{max_rel_error, numeric_gradient};
use icbench_core::dataset::LengthClass;
use icbench_core::head::*;
use icbench_core::synth::{teacher_samples, TeacherSpec};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_case(seed: u64, cond: Conditioning) -> (HeadParams, FeatureSet, DimensionTargets) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = HeadShape::new(8, 4, 4).with_conditioning(cond);
    let params = HeadParams::init(shape, seed);
    let length = if rng.random_bool(0.5) { LengthClass::Short } else { LengthClass::Long };
    let mut features = FeatureSet::new();
    let mut scores = BTreeMap::new();
    for &d in length.dimensions() {
        features.insert(d, (0..8).map(|_| rng.random_range(-1.0..1.0)).collect());
        scores.insert(d, rng.random_range(0.0..1.0));
    }
    (params, features, DimensionTargets { caption_id: "c".into(), scores })
}

fn total_loss(params: &HeadParams, f: &FeatureSet, t: &DimensionTargets, lambda: f64) -> f64 {
    loss_total(&head_forward(params, f).unwrap(), t, lambda).unwrap()
}

#[test]
fn analytic_gradient_matches_central_differences() {
    let mut worst = 0.0f64;
    for seed in 0..100 {
        let cond = if seed % 4 == 0 { Conditioning::OneHot } else { Conditioning::Instruction };
        let (params, f, t) = random_case(seed, cond);
        let lambda = [0.0, 0.5, 1.0, 2.0][seed as usize % 4];
        let (_, g) = backward(&params, &f, &t, lambda).unwrap();
        let shape = params.shape();
        let num = numeric_gradient(params.values(), 1e-4, |v| {
            let p = HeadParams::from_values(shape, v.to_vec(), 0).unwrap();
            total_loss(&p, &f, &t, lambda)
        });
        worst = worst.max(max_rel_error(&g, &num, 1e-4));
    }
    assert!(worst < 1e-5, "max relative error {worst:e}");
}

#[test]
fn gradient_is_deterministic_and_linear_in_lambda() {
    let (params, f, t) = random_case(3, Conditioning::Instruction);
    let g = |l| backward(&params, &f, &t, l).unwrap().1;
    assert_eq!(g(1.0), g(1.0));
    let (g0, g1, g2) = (g(0.0), g(1.0), g(2.0));
    for i in 0..g0.len() {
        assert!(((g2[i] - g0[i]) - 2.0 * (g1[i] - g0[i])).abs() < 1e-12);
    }
}

#[test]
fn zero_epochs_returns_init() {
    let data = teacher_samples(&TeacherSpec {
        n: 20,
        feature_dim: 8,
        scale: 3.0,
        noise: 0.02,
        seed: 1,
    });
    let cfg = TrainConfig {
        epochs: 0,
        h1: 8,
        h2: 4,
        seed: 5,
        ..TrainConfig::default()
    };
    let out = train(&data, &[], &cfg).unwrap();
    assert_eq!(out.params, HeadParams::init(HeadShape::new(8, 8, 4), 5));
    assert!(out.log.is_empty());
}

#[test]
fn constant_targets_are_fit() {
    let mut data = teacher_samples(&TeacherSpec {
        n: 400,
        feature_dim: 8,
        scale: 3.0,
        noise: 0.0,
        seed: 2,
    });
    for s in &mut data {
        s.targets.scores.values_mut().for_each(|v| *v = 0.5);
    }
    let (tr, va) = data.split_at(320);
    let cfg = TrainConfig {
        epochs: 40,
        h1: 16,
        h2: 8,
        lr0: 1e-3,
        ..TrainConfig::default()
    };
    let out = train(tr, va, &cfg).unwrap();
    let mse = out.log.last().unwrap().val_mse.unwrap();
    assert!(mse < 1e-3, "{mse}");
}

#[test]
fn bad_batch_size_and_empty_set() {
    let cfg = TrainConfig {
        batch_size: 4,
        ..TrainConfig::default()
    };
    let data = teacher_samples(&TeacherSpec {
        n: 2,
        feature_dim: 4,
        scale: 1.0,
        noise: 0.0,
        seed: 0,
    });
    assert!(matches!(train(&data, &[], &cfg), Err(TrainError::BatchSize(4))));
    assert!(matches!(train(&[], &[], &TrainConfig::default()), Err(TrainError::EmptyTrainSet)));
}

#[test]
fn cosine_schedule_endpoints() {
    assert_eq!(cosine_lr(1e-4, 0, 100), 1e-4);
    assert!((cosine_lr(1e-4, 50, 100) - 5e-5).abs() < 1e-18);
    assert!(cosine_lr(1e-4, 100, 100).abs() < 1e-20);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn total_loss_is_affine_in_lambda(seed in any::<u64>(), lambda in 0.0..10.0f64) {
        let (params, f, t) = random_case(seed, Conditioning::Instruction);
        let pred = head_forward(&params, &f).unwrap();
        let (ld, la) = (loss_dim(&pred, &t).unwrap(), loss_agg(&pred, &t).unwrap());
        prop_assert_eq!(loss_total(&pred, &t, lambda).unwrap(), ld + lambda * la);
        prop_assert_eq!(loss_total(&pred, &t, 0.0).unwrap(), ld);
    }

    #[test]
    fn sigma_is_clamped_for_any_input(seed in any::<u64>(), scale in prop_oneof![Just(1.0), Just(1e3), Just(1e6)]) {
        let (params, f, t) = random_case(seed, Conditioning::Instruction);
        let big: Vec<f64> = params.values().iter().map(|v| v * scale).collect();
        let p = HeadParams::from_values(params.shape(), big, 0).unwrap();
        let f: FeatureSet = f.into_iter().map(|(d, v)| (d, v.into_iter().map(|x| x * scale).collect())).collect();
        let pred = head_forward(&p, &f).unwrap();
        for d in &pred.dims {
            prop_assert!(d.sigma >= (-5f64).exp() && d.sigma <= 2.5f64.exp());
        }
        prop_assert!(loss_dim(&pred, &t).unwrap().is_finite());
    }

    #[test]
    fn perfect_fit_at_unit_sigma_has_zero_loss(mus in prop::collection::vec(0.0..1.0f64, 3)) {
        let dims = LengthClass::Short.dimensions();
        let pred = ScoreDistribution::from_dims(dims.iter().zip(&mus).map(|(&d, &mu)| DimScore { dimension: d, mu, sigma: 1.0, log_var: 0.0 }).collect());
        let t = DimensionTargets { caption_id: "c".into(), scores: dims.iter().copied().zip(mus.iter().copied()).collect() };
        prop_assert_eq!(loss_dim(&pred, &t).unwrap(), 0.0);
        prop_assert!(loss_total(&pred, &t, 1.0).unwrap().abs() < 1e-30);
    }

    #[test]
    fn shared_weights_for_equal_features(seed in any::<u64>()) {
        let (params, mut f, _) = random_case(seed, Conditioning::Instruction);
        let first = f.values().next().unwrap().clone();
        f.values_mut().for_each(|v| *v = first.clone());
        let pred = head_forward(&params, &f).unwrap();
        prop_assert!(pred.dims.windows(2).all(|w| w[0].mu == w[1].mu && w[0].sigma == w[1].sigma));
        let n = pred.dims.len() as f64;
        let var: f64 = pred.dims.iter().map(|d| d.sigma * d.sigma).sum();
        prop_assert!((pred.sigma_agg - var.sqrt() / n).abs() < 1e-15);
    }
}

#[test]
fn training_is_bitwise_repeatable() {
    let data = teacher_samples(&TeacherSpec {
        n: 200,
        feature_dim: 8,
        scale: 3.0,
        noise: 0.02,
        seed: 4,
    });
    let cfg = TrainConfig {
        epochs: 3,
        h1: 16,
        h2: 8,
        seed: 9,
        ..TrainConfig::default()
    };
    let a = train(&data[..160], &data[160..], &cfg).unwrap();
    let b = train(&data[..160], &data[160..], &cfg).unwrap();
    assert_eq!(a.params.values(), b.params.values());
    assert_eq!(a.log, b.log);
}
