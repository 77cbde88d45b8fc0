//! Hyperbolic triplet objective: the anchor is `exp_0(F(x))`, the positive
//! its class prototype and the negative a prototype drawn uniformly from the
//! other classes of the full class set.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::extractor::{backward, forward, ExtractorConfig};
use super::params::ParamVector;
use crate::error::{check_dim, Error, Result};
use crate::poincare::{
    exp_map_origin, exp_map_origin_vjp, geodesic_distance, geodesic_distance_grad, norm, BallPoint,
    DistanceGrad, TangentVector,
};
use crate::prototypes::PrototypeSet;

/// Distance used between embedded samples and prototypes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Poincaré geodesic distance.
    #[default]
    Geodesic,
    /// Straight-line distance between ball coordinates.
    Euclidean,
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "geodesic" => Ok(Metric::Geodesic),
            "euclidean" => Ok(Metric::Euclidean),
            other => Err(Error::invalid(format!("unknown metric {other:?}"))),
        }
    }
}

impl Metric {
    pub fn distance(self, a: &BallPoint, b: &BallPoint) -> Result<f64> {
        match self {
            Metric::Geodesic => geodesic_distance(a, b),
            Metric::Euclidean => {
                check_dim(a.dim(), b.dim())?;
                let d: Vec<f64> = a.coords().iter().zip(b.coords()).map(|(x, y)| x - y).collect();
                Ok(norm(&d))
            }
        }
    }

    /// Distance from `exp_0(z)` to `target` and its gradient in `z`.
    pub fn distance_grad(self, z: &TangentVector, target: &BallPoint) -> Result<DistanceGrad> {
        match self {
            Metric::Geodesic => geodesic_distance_grad(z, target),
            Metric::Euclidean => {
                check_dim(target.dim(), z.dim())?;
                let x = exp_map_origin(z);
                let diff: Vec<f64> = x.coords().iter().zip(target.coords()).map(|(a, b)| a - b).collect();
                let d = norm(&diff);
                if d == 0.0 {
                    return Ok(DistanceGrad {
                        distance: 0.0,
                        grad: TangentVector::zeros(z.dim()),
                        degenerate: true,
                    });
                }
                let gx: Vec<f64> = diff.iter().map(|v| v / d).collect();
                Ok(DistanceGrad {
                    distance: d,
                    grad: exp_map_origin_vjp(z, &gx)?,
                    degenerate: false,
                })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TripletConfig {
    /// Hinge margin, in distance units.
    pub margin: f64,
    pub negatives_per_sample: usize,
    pub seed: u64,
    pub metric: Metric,
}

impl Default for TripletConfig {
    fn default() -> Self {
        TripletConfig {
            margin: 3.0,
            negatives_per_sample: 1,
            seed: 0,
            metric: Metric::Geodesic,
        }
    }
}

impl TripletConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::invalid("triplet margin must be positive"));
        }
        if self.negatives_per_sample == 0 {
            return Err(Error::invalid("need at least one negative per sample"));
        }
        Ok(())
    }
}

fn check_class(c: usize, classes: usize) -> Result<()> {
    if c < classes {
        Ok(())
    } else {
        Err(Error::invalid(format!("class {c} out of range for {classes} classes")))
    }
}

/// `max(d(exp_0(z), w_y) - d(exp_0(z), w_neg) + m, 0)` under the geodesic
/// distance.
pub fn triplet_loss(
    z: &TangentVector,
    y: usize,
    protos: &PrototypeSet,
    neg: usize,
    margin: f64,
) -> Result<f64> {
    triplet_loss_with_metric(z, y, protos, neg, margin, Metric::Geodesic)
}

pub fn triplet_loss_with_metric(
    z: &TangentVector,
    y: usize,
    protos: &PrototypeSet,
    neg: usize,
    margin: f64,
    metric: Metric,
) -> Result<f64> {
    check_class(y, protos.classes())?;
    check_class(neg, protos.classes())?;
    if y == neg {
        return Err(Error::invalid("negative class equals the positive class"));
    }
    let x = exp_map_origin(z);
    let pos = metric.distance(&x, protos.point(y))?;
    let negd = metric.distance(&x, protos.point(neg))?;
    Ok((pos - negd + margin).max(0.0))
}

/// Uniform draw from `{0, .., classes-1} \ {y}`.
pub fn sample_negative<R: Rng + ?Sized>(y: usize, classes: usize, rng: &mut R) -> usize {
    debug_assert!(classes >= 2 && y < classes);
    let r = rng.random_range(0..classes - 1);
    if r >= y {
        r + 1
    } else {
        r
    }
}

/// Batch-mean triplet loss and its gradient with respect to `theta`, with
/// negatives drawn from an RNG seeded by `tcfg.seed`.
pub fn triplet_grad(
    theta: &ParamVector,
    cfg: &ExtractorConfig,
    batch: &[(&[f64], usize)],
    protos: &PrototypeSet,
    tcfg: &TripletConfig,
) -> Result<(f64, ParamVector)> {
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    triplet_grad_with_rng(theta, cfg, batch, protos, tcfg, &mut rng)
}

pub fn triplet_grad_with_rng<R: Rng + ?Sized>(
    theta: &ParamVector,
    cfg: &ExtractorConfig,
    batch: &[(&[f64], usize)],
    protos: &PrototypeSet,
    tcfg: &TripletConfig,
    rng: &mut R,
) -> Result<(f64, ParamVector)> {
    cfg.check_params(theta)?;
    check_dim(protos.dim(), cfg.output_dim)?;
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let classes = protos.classes();
    let per_term = 1.0 / (batch.len() * tcfg.negatives_per_sample) as f64;
    let mut grad = ParamVector::zeros_like(theta);
    let mut loss = 0.0;
    for &(x, y) in batch {
        check_dim(cfg.input_dim, x.len())?;
        check_class(y, classes)?;
        let cache = forward(theta, cfg, x);
        let z = TangentVector::new(cache.output().to_vec());
        let pos = tcfg.metric.distance_grad(&z, protos.point(y))?;
        let mut grad_z = vec![0.0; z.dim()];
        for _ in 0..tcfg.negatives_per_sample {
            let neg_class = sample_negative(y, classes, rng);
            let neg = tcfg.metric.distance_grad(&z, protos.point(neg_class))?;
            let hinge = pos.distance - neg.distance + tcfg.margin;
            if hinge > 0.0 {
                loss += hinge * per_term;
                for ((g, p), n) in grad_z.iter_mut().zip(pos.grad.coords()).zip(neg.grad.coords()) {
                    *g += p - n;
                }
            }
        }
        if grad_z.iter().any(|&g| g != 0.0) {
            backward(theta, cfg, &cache, &grad_z, per_term, grad.values_mut());
        }
    }
    Ok((loss, grad))
}
