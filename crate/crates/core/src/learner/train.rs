//! Local SGD on the triplet objective and nearest-prototype prediction.
//!
//! The extractor weights live in flat Euclidean space and the prototypes are
//! frozen, so a Riemannian SGD step on the trainable parameters is exactly a
//! plain SGD step.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::extractor::{extract, forward, ExtractorConfig};
use super::params::ParamVector;
use super::triplet::{triplet_grad_with_rng, Metric, TripletConfig};
use crate::data::LabeledDataset;
use crate::error::{check_dim, Error, Result};
use crate::poincare::{exp_map_origin, TangentVector};
use crate::prototypes::PrototypeSet;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Optional cap on the total number of SGD steps.
    pub max_steps: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalTrainResult {
    pub params: ParamVector,
    /// Batch loss of every step, evaluated before the update.
    pub loss_trace: Vec<f64>,
}

impl LocalTrainResult {
    pub fn mean_loss(&self) -> f64 {
        if self.loss_trace.is_empty() {
            0.0
        } else {
            self.loss_trace.iter().sum::<f64>() / self.loss_trace.len() as f64
        }
    }
}

/// Mini-batch SGD over `data` for `opts.epochs` epochs, reshuffling each
/// epoch. All randomness (order and negatives) comes from `tcfg.seed`.
pub fn local_train(
    theta_in: &ParamVector,
    data: &LabeledDataset,
    protos: &PrototypeSet,
    cfg: &ExtractorConfig,
    tcfg: &TripletConfig,
    opts: &TrainOptions,
) -> Result<LocalTrainResult> {
    cfg.check_params(theta_in)?;
    check_dim(cfg.input_dim, data.dim())?;
    if data.classes() > protos.classes() {
        return Err(Error::invalid("dataset has more classes than prototypes"));
    }
    if data.is_empty() {
        return Err(Error::invalid("cannot train on an empty shard"));
    }
    if opts.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut theta = theta_in.clone();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = Vec::new();
    let cap = opts.max_steps.unwrap_or(usize::MAX);
    'epochs: for _ in 0..opts.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(opts.batch_size) {
            if trace.len() >= cap {
                break 'epochs;
            }
            let batch: Vec<(&[f64], usize)> = chunk.iter().map(|&i| (data.row(i), data.label(i))).collect();
            let (loss, grad) = triplet_grad_with_rng(&theta, cfg, &batch, protos, tcfg, &mut rng)?;
            theta.axpy(-opts.lr, &grad)?;
            trace.push(loss);
        }
    }
    if !theta.is_finite() {
        return Err(Error::invalid("local training diverged to non-finite parameters"));
    }
    Ok(LocalTrainResult {
        params: theta,
        loss_trace: trace,
    })
}

fn nearest(point: &crate::poincare::BallPoint, protos: &PrototypeSet, metric: Metric) -> Result<usize> {
    let mut best = (0, f64::INFINITY);
    for (c, w) in protos.points().iter().enumerate() {
        let d = metric.distance(point, w)?;
        if d < best.1 {
            best = (c, d);
        }
    }
    Ok(best.0)
}

/// Class whose prototype is geodesically closest to `exp_0(F(x))`; ties go
/// to the lowest class index.
pub fn predict(theta: &ParamVector, cfg: &ExtractorConfig, protos: &PrototypeSet, x: &[f64]) -> Result<usize> {
    predict_with_metric(theta, cfg, protos, x, Metric::Geodesic)
}

pub fn predict_with_metric(
    theta: &ParamVector,
    cfg: &ExtractorConfig,
    protos: &PrototypeSet,
    x: &[f64],
    metric: Metric,
) -> Result<usize> {
    check_dim(protos.dim(), cfg.output_dim)?;
    let z = extract(theta, cfg, x)?;
    nearest(&exp_map_origin(&z), protos, metric)
}

/// Predictions for every row of `data`.
pub fn predict_all(
    theta: &ParamVector,
    cfg: &ExtractorConfig,
    protos: &PrototypeSet,
    data: &LabeledDataset,
    metric: Metric,
) -> Result<Vec<usize>> {
    cfg.check_params(theta)?;
    check_dim(cfg.input_dim, data.dim())?;
    check_dim(protos.dim(), cfg.output_dim)?;
    (0..data.len())
        .map(|i| {
            let z = TangentVector::new(forward(theta, cfg, data.row(i)).acts.pop().unwrap());
            nearest(&exp_map_origin(&z), protos, metric)
        })
        .collect()
}
