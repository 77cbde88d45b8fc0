//! Multilayer perceptron feature extractor with hand-written backprop.
//!
//! Hidden layers use the configured activation; the output layer is linear
//! and produces a tangent vector at the origin of the ball.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{ParamVector, TensorSpec};
use crate::error::{check_dim, Error, Result};
use crate::poincare::TangentVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
            Activation::Identity => v,
        }
    }

    // Derivative expressed through the activation output.
    fn derivative_from_output(self, out: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - out * out,
            Activation::Relu => {
                if out > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::invalid(format!("unknown activation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    /// Embedding dimension; must equal the prototype dimension.
    pub output_dim: usize,
    pub activation: Activation,
    pub init_seed: u64,
}

impl ExtractorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::invalid("extractor layer widths must be positive"));
        }
        Ok(())
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(self.input_dim);
        w.extend_from_slice(&self.hidden);
        w.push(self.output_dim);
        w
    }

    pub fn num_layers(&self) -> usize {
        self.hidden.len() + 1
    }

    pub fn layout(&self) -> Vec<TensorSpec> {
        let w = self.widths();
        w.windows(2)
            .enumerate()
            .flat_map(|(i, pair)| {
                [
                    TensorSpec::new(format!("layer{i}.weight"), vec![pair[1], pair[0]]),
                    TensorSpec::new(format!("layer{i}.bias"), vec![pair[1]]),
                ]
            })
            .collect()
    }

    /// Recovers layer widths from a checkpoint layout written by
    /// [`ExtractorConfig::layout`].
    pub fn from_layout(layout: &[TensorSpec], activation: Activation) -> Result<Self> {
        if layout.is_empty() || !layout.len().is_multiple_of(2) {
            return Err(Error::invalid("layout is not a weight/bias layer stack"));
        }
        let mut widths = Vec::new();
        for (i, pair) in layout.chunks(2).enumerate() {
            let (w, b) = (&pair[0], &pair[1]);
            if w.name != format!("layer{i}.weight")
                || b.name != format!("layer{i}.bias")
                || w.shape.len() != 2
                || b.shape != [w.shape[0]]
            {
                return Err(Error::invalid(format!("unexpected tensors at layer {i}")));
            }
            if i == 0 {
                widths.push(w.shape[1]);
            } else if widths[i] != w.shape[1] {
                return Err(Error::invalid(format!("layer {i} input width mismatch")));
            }
            widths.push(w.shape[0]);
        }
        let cfg = ExtractorConfig {
            input_dim: widths[0],
            hidden: widths[1..widths.len() - 1].to_vec(),
            output_dim: *widths.last().unwrap(),
            activation,
            init_seed: 0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Uniform `±sqrt(6 / (fan_in + fan_out))` weights, zero biases.
    pub fn init(&self) -> ParamVector {
        let mut rng = ChaCha8Rng::seed_from_u64(self.init_seed);
        let mut values = Vec::new();
        for pair in self.widths().windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            values.extend((0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)));
            values.extend(std::iter::repeat_n(0.0, fan_out));
        }
        ParamVector::new(values, self.layout()).expect("init matches layout")
    }

    pub(crate) fn check_params(&self, theta: &ParamVector) -> Result<()> {
        if theta.layout() == self.layout().as_slice() {
            Ok(())
        } else {
            Err(Error::LayoutMismatch)
        }
    }
}

/// Layer outputs kept for the backward pass; `acts[0]` is the input and the
/// last entry is the tangent vector.
pub(crate) struct ForwardCache {
    pub acts: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.acts.last().unwrap()
    }
}

pub(crate) fn forward(theta: &ParamVector, cfg: &ExtractorConfig, x: &[f64]) -> ForwardCache {
    let widths = cfg.widths();
    let values = theta.values();
    let last = cfg.num_layers() - 1;
    let mut acts = Vec::with_capacity(widths.len());
    acts.push(x.to_vec());
    let mut offset = 0;
    for (layer, pair) in widths.windows(2).enumerate() {
        let (n_in, n_out) = (pair[0], pair[1]);
        let weight = &values[offset..offset + n_in * n_out];
        let bias = &values[offset + n_in * n_out..offset + n_in * n_out + n_out];
        offset += n_in * n_out + n_out;
        let input = &acts[layer];
        let out: Vec<f64> = (0..n_out)
            .map(|o| {
                let row = &weight[o * n_in..(o + 1) * n_in];
                let pre = bias[o] + row.iter().zip(input).map(|(w, v)| w * v).sum::<f64>();
                if layer == last {
                    pre
                } else {
                    cfg.activation.apply(pre)
                }
            })
            .collect();
        acts.push(out);
    }
    ForwardCache { acts }
}

/// Accumulates `scale * dL/dθ` into `grad` given `dL/d(output)`.
pub(crate) fn backward(
    theta: &ParamVector,
    cfg: &ExtractorConfig,
    cache: &ForwardCache,
    grad_out: &[f64],
    scale: f64,
    grad: &mut [f64],
) {
    let widths = cfg.widths();
    let values = theta.values();
    let last = cfg.num_layers() - 1;
    let mut offsets = Vec::with_capacity(widths.len());
    let mut offset = 0;
    for pair in widths.windows(2) {
        offsets.push(offset);
        offset += pair[0] * pair[1] + pair[1];
    }
    let mut upstream: Vec<f64> = grad_out.iter().map(|g| g * scale).collect();
    for layer in (0..=last).rev() {
        let (n_in, n_out) = (widths[layer], widths[layer + 1]);
        let off = offsets[layer];
        if layer != last {
            let out = &cache.acts[layer + 1];
            for (u, o) in upstream.iter_mut().zip(out) {
                *u *= cfg.activation.derivative_from_output(*o);
            }
        }
        let input = &cache.acts[layer];
        for o in 0..n_out {
            let u = upstream[o];
            if u == 0.0 {
                continue;
            }
            let row = &mut grad[off + o * n_in..off + (o + 1) * n_in];
            for (g, v) in row.iter_mut().zip(input) {
                *g += u * v;
            }
            grad[off + n_in * n_out + o] += u;
        }
        if layer > 0 {
            let weight = &values[off..off + n_in * n_out];
            let mut next = vec![0.0; n_in];
            for o in 0..n_out {
                let u = upstream[o];
                if u == 0.0 {
                    continue;
                }
                for (n, w) in next.iter_mut().zip(&weight[o * n_in..(o + 1) * n_in]) {
                    *n += u * w;
                }
            }
            upstream = next;
        }
    }
}

/// `z = F_θ(x)`.
pub fn extract(theta: &ParamVector, cfg: &ExtractorConfig, x: &[f64]) -> Result<TangentVector> {
    cfg.check_params(theta)?;
    check_dim(cfg.input_dim, x.len())?;
    Ok(TangentVector::new(forward(theta, cfg, x).acts.pop().unwrap()))
}
