#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_chacha::ChaCha8Rng;

use hyperfed::data::{dirichlet_partition, LabeledDataset, Partition, PartitionSpec};
use hyperfed::federation::{DatasetConfig, ExperimentConfig, ExtractorSection, PartitionConfig};
use hyperfed::learner::{triplet_grad, Activation, ExtractorConfig, ParamVector, TensorSpec, TripletConfig};
use hyperfed::prototypes::{tammes_prototypes, PrototypeSet, TammesConfig};

/// Five hierarchical Gaussian classes in 16 dimensions, 2000 rows, ten
/// clients, 4-dimensional prototypes.
pub fn desk_benchmark(seed: u64, alpha: f64) -> ExperimentConfig {
    ExperimentConfig {
        seed,
        rounds: 30,
        slope: 0.9,
        lr: 0.3,
        local_epochs: 5,
        batch_size: 128,
        dataset: DatasetConfig::Synthetic {
            classes: 5,
            dim: 16,
            per_class: 400,
            spread: 2.0,
            hierarchy_depth: 2,
            test_fraction: 0.2,
        },
        partition: PartitionConfig {
            clients: 10,
            alpha,
            train_fraction: 0.75,
        },
        extractor: ExtractorSection {
            hidden: vec![32],
            output_dim: 4,
            activation: Activation::Tanh,
        },
        ..ExperimentConfig::default()
    }
}

/// A configuration small enough for per-test runs.
pub fn tiny(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        seed,
        rounds: 3,
        local_epochs: 2,
        batch_size: 16,
        finetune_epochs: 1,
        dataset: DatasetConfig::Synthetic {
            classes: 3,
            dim: 6,
            per_class: 40,
            spread: 0.5,
            hierarchy_depth: 1,
            test_fraction: 0.2,
        },
        partition: PartitionConfig {
            clients: 4,
            alpha: 1.0,
            train_fraction: 0.75,
        },
        extractor: ExtractorSection {
            hidden: vec![8],
            output_dim: 3,
            activation: Activation::Tanh,
        },
        ..ExperimentConfig::default()
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn protos(classes: usize, dim: usize) -> PrototypeSet {
    tammes_prototypes(classes, dim, 0.9, 0, &TammesConfig::default()).unwrap().0
}

pub fn pv(values: Vec<f64>) -> ParamVector {
    let n = values.len();
    ParamVector::new(values, vec![TensorSpec::new("w", vec![n])]).unwrap()
}

pub fn random_deltas(k: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<ParamVector> {
    (0..k)
        .map(|_| pv((0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()))
        .collect()
}

pub fn small_net(seed: u64) -> ExtractorConfig {
    ExtractorConfig {
        input_dim: 4,
        hidden: vec![8],
        output_dim: 3,
        activation: Activation::Tanh,
        init_seed: seed,
    }
}

pub fn batch_loss(theta: &ParamVector, cfg: &ExtractorConfig, batch: &[(&[f64], usize)], p: &PrototypeSet, t: &TripletConfig) -> f64 {
    triplet_grad(theta, cfg, batch, p, t).unwrap().0
}

/// Worst per-coordinate relative error of the analytic gradient against
/// central differences, skipping coordinates where both are below 1e-8.
pub fn worst_fd_error(draw: u64) -> f64 {
    let cfg = small_net(draw);
    let p = protos(3, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + draw);
    // widen the initial weights so the embedding reaches the interesting region
    let theta = cfg.init().scale(2.0);
    let xs: Vec<Vec<f64>> = (0..5)
        .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let batch: Vec<(&[f64], usize)> = xs.iter().map(|x| (x.as_slice(), rng.random_range(0..3))).collect();
    let tcfg = TripletConfig {
        margin: 3.0,
        seed: draw,
        ..TripletConfig::default()
    };
    let (_, grad) = triplet_grad(&theta, &cfg, &batch, &p, &tcfg).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..theta.len() {
        let mut plus = theta.clone();
        plus.values_mut()[i] += h;
        let mut minus = theta.clone();
        minus.values_mut()[i] -= h;
        let fd = (batch_loss(&plus, &cfg, &batch, &p, &tcfg) - batch_loss(&minus, &cfg, &batch, &p, &tcfg)) / (2.0 * h);
        let an = grad.values()[i];
        if an.abs() < 1e-8 && fd.abs() < 1e-8 {
            continue;
        }
        worst = worst.max((an - fd).abs() / an.abs().max(fd.abs()));
    }
    worst
}

pub fn combined(p: &[f64], deltas: &[ParamVector]) -> Vec<f64> {
    let mut out = vec![0.0; deltas[0].len()];
    for (w, d) in p.iter().zip(deltas) {
        for (o, v) in out.iter_mut().zip(d.values()) {
            *o += w * v;
        }
    }
    out
}

pub fn norm_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// `min_k <Δ_k, Δ*> - ‖Δ*‖² + 1e-6 max_k ‖Δ_k‖²`; non-negative when the
/// certificate holds.
pub fn certificate_slack(p: &[f64], deltas: &[ParamVector]) -> f64 {
    let star = combined(p, deltas);
    let s = norm_sq(&star);
    let scale = deltas.iter().map(|d| d.norm_sq()).fold(0.0, f64::max);
    deltas
        .iter()
        .map(|d| d.values().iter().zip(&star).map(|(a, b)| a * b).sum::<f64>() - s + 1e-6 * scale)
        .fold(f64::INFINITY, f64::min)
}

/// Minimum of `‖p Δ_1 + (1-p) Δ_2‖²` over `p ∈ [0, 1]`.
pub fn two_point_optimum(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let dd = norm_sq(&diff);
    if dd == 0.0 {
        return 0.5;
    }
    let num: f64 = b.iter().zip(&diff).map(|(x, y)| -x * y).sum();
    (num / dd).clamp(0.0, 1.0)
}

/// Smallest combined norm² on a simplex grid with the given resolution.
pub fn grid_minimum(gram: &[Vec<f64>], steps: usize) -> f64 {
    let h = 1.0 / steps as f64;
    let mut best = f64::INFINITY;
    for i in 0..=steps {
        for j in 0..=(steps - i) {
            let p = [i as f64 * h, j as f64 * h, (steps - i - j) as f64 * h];
            let mut v = 0.0;
            for a in 0..3 {
                for b in 0..3 {
                    v += p[a] * p[b] * gram[a][b];
                }
            }
            best = best.min(v);
        }
    }
    best
}

pub fn partition(ds: &LabeledDataset, clients: usize, alpha: f64, seed: u64) -> Partition {
    dirichlet_partition(ds, &PartitionSpec { clients, alpha, seed }).unwrap()
}

/// Mean over classes of the largest share any single client holds.
pub fn heterogeneity(ds: &LabeledDataset, clients: usize, alpha: f64, seeds: u64) -> f64 {
    let totals = ds.class_counts();
    let mut acc = 0.0;
    for seed in 0..seeds {
        let part = partition(ds, clients, alpha, seed);
        let per_class: f64 = (0..ds.classes())
            .map(|c| {
                let max = part.counts.iter().map(|row| row[c]).max().unwrap();
                max as f64 / totals[c] as f64
            })
            .sum();
        acc += per_class / ds.classes() as f64;
    }
    acc / seeds as f64
}
