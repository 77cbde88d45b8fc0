mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hyperfed::data::{make_synthetic, LabeledDataset};
use hyperfed::learner::{
    extract, local_train, sample_negative, triplet_grad, Activation, ExtractorConfig, ParamVector, TrainOptions,
    TripletConfig,
};
use hyperfed::poincare::{exp_map_origin, log_map_origin, MAX_NORM};

use common::{batch_loss, protos, small_net, worst_fd_error};

#[test]
fn gradient_matches_central_differences() {
    for draw in 0..20 {
        let e = worst_fd_error(draw);
        assert!(e < 1e-4, "draw {draw}: relative error {e:e}");
    }
}

#[test]
fn single_linear_layer_gradient_matches_differences() {
    let cfg = ExtractorConfig {
        input_dim: 3,
        hidden: vec![],
        output_dim: 2,
        activation: Activation::Identity,
        init_seed: 4,
    };
    let p = protos(3, 2);
    let theta = cfg.init();
    let x = [0.3, -0.7, 0.2];
    let batch = [(&x[..], 1)];
    let tcfg = TripletConfig::default();
    let (loss, grad) = triplet_grad(&theta, &cfg, &batch, &p, &tcfg).unwrap();
    assert!(loss > 0.0);
    let h = 1e-5;
    for i in 0..theta.len() {
        let mut plus = theta.clone();
        plus.values_mut()[i] += h;
        let mut minus = theta.clone();
        minus.values_mut()[i] -= h;
        let fd = (batch_loss(&plus, &cfg, &batch, &p, &tcfg) - batch_loss(&minus, &cfg, &batch, &p, &tcfg)) / (2.0 * h);
        assert!((fd - grad.values()[i]).abs() <= 1e-4 * fd.abs().max(1e-8), "coordinate {i}");
    }
}

#[test]
fn identical_samples_average_to_single_sample_gradient() {
    let cfg = small_net(3);
    let p = protos(2, 3);
    let theta = cfg.init();
    let x = [0.5, -0.1, 0.9, 0.4];
    // two classes: the negative is forced, so every copy sees the same triplet
    let tcfg = TripletConfig::default();
    let (l1, g1) = triplet_grad(&theta, &cfg, &[(&x[..], 0)], &p, &tcfg).unwrap();
    let batch = vec![(&x[..], 0); 7];
    let (lb, gb) = triplet_grad(&theta, &cfg, &batch, &p, &tcfg).unwrap();
    assert!((l1 - lb).abs() < 1e-12);
    assert!(common::max_abs_diff(g1.values(), gb.values()) < 1e-12);
}

#[test]
fn inactive_hinges_give_zero_gradient() {
    // A single linear identity layer with bias equal to log0(w_y) embeds every
    // input at its own prototype when the weights are zero.
    let p = protos(3, 3);
    let cfg = ExtractorConfig {
        input_dim: 2,
        hidden: vec![],
        output_dim: 3,
        activation: Activation::Identity,
        init_seed: 0,
    };
    let mut theta = ParamVector::zeros(cfg.layout());
    let target = log_map_origin(p.point(1));
    theta.values_mut()[6..].copy_from_slice(target.coords());
    let x = [0.4, -2.0];
    let (loss, grad) = triplet_grad(&theta, &cfg, &[(&x[..], 1), (&x[..], 1)], &p, &TripletConfig::default()).unwrap();
    assert_eq!(loss, 0.0);
    assert!(grad.values().iter().all(|&g| g == 0.0));
}

#[test]
fn identity_layer_passes_input_through() {
    let cfg = ExtractorConfig {
        input_dim: 3,
        hidden: vec![],
        output_dim: 3,
        activation: Activation::Identity,
        init_seed: 0,
    };
    let mut theta = ParamVector::zeros(cfg.layout());
    for i in 0..3 {
        theta.values_mut()[i * 3 + i] = 1.0;
    }
    assert_eq!(extract(&theta, &cfg, &[1.0, 0.0, 0.0]).unwrap().coords(), &[1.0, 0.0, 0.0]);
    let zero = ParamVector::zeros(cfg.layout());
    assert!(extract(&zero, &cfg, &[3.0, 1.0, -2.0]).unwrap().is_zero());
}

#[test]
fn negative_sampling_is_uniform_over_other_classes() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let draws = 100_000;
    let mut counts = [0usize; 10];
    for _ in 0..draws {
        counts[sample_negative(3, 10, &mut rng)] += 1;
    }
    assert_eq!(counts[3], 0);
    let expected = draws as f64 / 9.0;
    let chi2: f64 = counts
        .iter()
        .enumerate()
        .filter(|&(c, _)| c != 3)
        .map(|(_, &n)| (n as f64 - expected).powi(2) / expected)
        .sum();
    // 8 degrees of freedom; 26.1 is the 0.999 quantile
    assert!(chi2 < 26.1, "chi-square {chi2}");
    let sd = (draws as f64 * (1.0 / 9.0) * (8.0 / 9.0)).sqrt();
    for (c, &n) in counts.iter().enumerate() {
        if c != 3 {
            assert!((n as f64 - expected).abs() < 3.0 * sd + 1.0, "class {c}: {n}");
        }
    }
}

#[test]
fn missing_classes_are_still_drawn_as_negatives() {
    // a client holding only classes 0 and 1 out of 6
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut seen = [false; 6];
    for i in 0..10_000 {
        seen[sample_negative(i % 2, 6, &mut rng)] = true;
    }
    assert!(seen[2..].iter().all(|&s| s));
}

#[test]
fn local_training_is_bitwise_reproducible() {
    let ds: LabeledDataset = make_synthetic(3, 4, 30, 0.4, 1, 2).unwrap();
    let cfg = small_net(9);
    let p = protos(3, 3);
    let tcfg = TripletConfig {
        seed: 17,
        ..TripletConfig::default()
    };
    let opts = TrainOptions {
        epochs: 3,
        batch_size: 16,
        lr: 0.3,
        max_steps: None,
    };
    let a = local_train(&cfg.init(), &ds, &p, &cfg, &tcfg, &opts).unwrap();
    let b = local_train(&cfg.init(), &ds, &p, &cfg, &tcfg, &opts).unwrap();
    assert_eq!(a.params.to_bytes(), b.params.to_bytes());
    assert_eq!(a.loss_trace, b.loss_trace);
}

proptest! {
    #[test]
    fn embeddings_stay_inside_the_ball(
        seed in 0u64..1000,
        scale in 0.1f64..50.0,
        x in proptest::collection::vec(-100.0f64..100.0, 4),
    ) {
        let cfg = small_net(seed);
        let theta = cfg.init().scale(scale);
        let z = extract(&theta, &cfg, &x).unwrap();
        let point = exp_map_origin(&z);
        prop_assert!(point.norm() <= MAX_NORM + 1e-15);
        prop_assert!(point.coords().iter().all(|v| v.is_finite()));
    }
}
