//! Server aggregation.
//!
//! Consistent updating looks for simplex weights `p` minimising
//! `½‖Σ p_k Δ_k‖²` over the client deviations `Δ_k = θ_k - θ`. Each
//! iteration picks the toughest client (smallest `p`-weighted row sum of the
//! deviation Gram matrix) and solves the two-point line search between it and
//! the virtual client formed by the current combination in closed form. When
//! the weight sitting on the most aligned client in the support is the larger
//! obstacle, weight is shifted from that client straight to the toughest one,
//! again with an exact line search. Once the iterations stop, the minimum-norm
//! point of the face spanned by the support is solved exactly and kept if it
//! tightens the Pareto gap. Everything after the Gram matrix is done
//! in `K`-dimensional weight space.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learner::ParamVector;

#[derive(Debug, Clone, PartialEq)]
pub struct DeviationSet {
    pub deltas: Vec<ParamVector>,
    /// `gram[k][j] = <Δ_k, Δ_j>`.
    pub gram: Vec<Vec<f64>>,
}

impl DeviationSet {
    pub fn len(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }

    pub fn gram_diagonal(&self) -> Vec<f64> {
        (0..self.len()).map(|k| self.gram[k][k]).collect()
    }

    /// Builds the set straight from deviations (used by tests and tooling).
    pub fn from_deltas(deltas: Vec<ParamVector>) -> Result<Self> {
        if let Some(first) = deltas.first() {
            if deltas.iter().any(|d| d.layout() != first.layout()) {
                return Err(Error::LayoutMismatch);
            }
        }
        let k = deltas.len();
        let rows: Vec<Vec<f64>> = (0..k)
            .into_par_iter()
            .map(|i| {
                (0..k)
                    .map(|j| {
                        let (a, b) = if i <= j { (i, j) } else { (j, i) };
                        deltas[a].dot(&deltas[b]).expect("layouts checked")
                    })
                    .collect()
            })
            .collect();
        Ok(DeviationSet { deltas, gram: rows })
    }
}

/// `Δ_k = θ_k - θ` for every client, plus their Gram matrix.
pub fn compute_deviations(global: &ParamVector, locals: &[ParamVector]) -> Result<DeviationSet> {
    let deltas = locals
        .iter()
        .map(|l| l.sub(global))
        .collect::<Result<Vec<_>>>()?;
    DeviationSet::from_deltas(deltas)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationWeights {
    pub p: Vec<f64>,
    pub cu_iterations: usize,
    /// `‖Δ*‖² - min_k <Δ_k, Δ*>` at the returned weights; zero exactly at a
    /// min-norm point.
    pub pareto_gap: f64,
    /// `‖Σ p_k Δ_k‖²` after initialisation and after each iteration.
    #[serde(skip)]
    pub objective_trace: Vec<f64>,
}

/// `p_k = N_k / Σ N_j`.
pub fn fedavg_weights(n_samples: &[usize]) -> Result<AggregationWeights> {
    if n_samples.is_empty() || n_samples.contains(&0) {
        return Err(Error::invalid("sample counts must be positive"));
    }
    let total: usize = n_samples.iter().sum();
    Ok(AggregationWeights {
        p: n_samples.iter().map(|&n| n as f64 / total as f64).collect(),
        cu_iterations: 0,
        pareto_gap: f64::NAN,
        objective_trace: Vec::new(),
    })
}

/// Index minimising `Σ_k p_k V[j][k]`; lowest index on ties.
pub fn toughest_client(p: &[f64], gram: &[Vec<f64>]) -> usize {
    let sums = weighted_row_sums(p, gram);
    argmin(&sums)
}

fn weighted_row_sums(p: &[f64], gram: &[Vec<f64>]) -> Vec<f64> {
    gram.iter()
        .map(|row| row.iter().zip(p).map(|(v, w)| v * w).sum())
        .collect()
}

fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v < values[best] {
            best = i;
        }
    }
    best
}

/// Weight on `a` minimising `‖w a + (1 - w) b‖²` over `w ∈ [0, 1]`, given
/// `aa = <a,a>`, `ab = <a,b>`, `bb = <b,b>`.
pub(crate) fn line_search_products(aa: f64, ab: f64, bb: f64) -> f64 {
    // b already at least as short along the segment (includes a == b)
    if ab - bb >= 0.0 {
        return 0.0;
    }
    if aa - ab <= 0.0 {
        return 1.0;
    }
    let denom = aa - 2.0 * ab + bb;
    if denom <= 0.0 {
        return 0.0;
    }
    ((bb - ab) / denom).clamp(0.0, 1.0)
}

/// Closed-form weight on the toughest client against the virtual client.
pub fn line_search(delta_tau: &ParamVector, delta_vir: &ParamVector) -> Result<f64> {
    let tt = delta_tau.norm_sq();
    let tv = delta_tau.dot(delta_vir)?;
    let vv = delta_vir.norm_sq();
    Ok(line_search_products(tt, tv, vv))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CuConfig {
    pub max_iters: usize,
    /// Stop once no weight moves by more than this.
    pub tol: f64,
    /// Stop once the Pareto gap falls below `gap_tol * max_k ‖Δ_k‖²`.
    pub gap_tol: f64,
}

impl Default for CuConfig {
    fn default() -> Self {
        CuConfig {
            max_iters: 100_000,
            tol: 1e-12,
            gap_tol: 1e-13,
        }
    }
}

fn quad(p: &[f64], gram: &[Vec<f64>]) -> f64 {
    weighted_row_sums(p, gram).iter().zip(p).map(|(g, w)| g * w).sum()
}

/// `‖Σ p_k Δ_k‖² - min_k <Δ_k, Σ p_j Δ_j>` from the Gram matrix.
pub fn pareto_gap(p: &[f64], gram: &[Vec<f64>]) -> f64 {
    let g = weighted_row_sums(p, gram);
    let obj: f64 = g.iter().zip(p).map(|(a, b)| a * b).sum();
    obj - g.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Minimum-norm weights restricted to the support of `p`, from the KKT system
/// `V_SS p_S = λ 1`, `Σ p_S = 1`. `None` when singular or infeasible.
fn polish_on_support(p: &[f64], gram: &[Vec<f64>]) -> Option<Vec<f64>> {
    let support: Vec<usize> = (0..p.len()).filter(|&j| p[j] > 0.0).collect();
    let m = support.len();
    let mut a = DMatrix::zeros(m + 1, m + 1);
    for (r, &i) in support.iter().enumerate() {
        for (c, &j) in support.iter().enumerate() {
            a[(r, c)] = gram[i][j];
        }
        a[(r, m)] = -1.0;
        a[(m, r)] = 1.0;
    }
    let mut b = DVector::zeros(m + 1);
    b[m] = 1.0;
    let x = a.lu().solve(&b)?;
    if x.iter().any(|v| !v.is_finite()) || x.iter().take(m).any(|&v| v < 0.0) {
        return None;
    }
    let mut out = vec![0.0; p.len()];
    for (r, &j) in support.iter().enumerate() {
        out[j] = x[r];
    }
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= total);
    Some(out)
}

/// Consistent updating starting from the data-size weights.
pub fn consistent_update(dev: &DeviationSet, n_samples: &[usize], cfg: &CuConfig) -> Result<AggregationWeights> {
    let init = fedavg_weights(n_samples)?;
    if n_samples.len() != dev.len() {
        return Err(Error::DimensionMismatch {
            expected: dev.len(),
            got: n_samples.len(),
        });
    }
    let gram = &dev.gram;
    let k = dev.len();
    let mut p = init.p;
    let mut trace = vec![quad(&p, gram)];
    let scale = dev.gram_diagonal().into_iter().fold(0.0, f64::max);
    let mut iterations = 0;

    if k > 1 && scale > 0.0 {
        for _ in 0..cfg.max_iters {
            let g = weighted_row_sums(&p, gram);
            let obj: f64 = g.iter().zip(&p).map(|(a, b)| a * b).sum();
            let tau = argmin(&g);
            let toward_gap = obj - g[tau];
            if toward_gap <= cfg.gap_tol * scale {
                break;
            }
            let away = (0..k)
                .filter(|&j| p[j] > 0.0)
                .fold(None, |best: Option<usize>, j| match best {
                    Some(b) if g[b] >= g[j] => Some(b),
                    _ => Some(j),
                })
                .expect("weights sum to one");
            let away_gap = g[away] - obj;

            let mut next = p.clone();
            if toward_gap >= away_gap {
                // virtual client = current combination Σ p_k Δ_k
                let w = line_search_products(gram[tau][tau], g[tau], obj);
                next.iter_mut().for_each(|v| *v *= 1.0 - w);
                next[tau] += w;
            } else {
                // shift mass from the least consistent client to the toughest one
                let pa = p[away];
                let curv = gram[tau][tau] - 2.0 * gram[tau][away] + gram[away][away];
                let step = if curv > 0.0 {
                    ((g[away] - g[tau]) / curv).clamp(0.0, pa)
                } else {
                    pa
                };
                next[away] -= step;
                next[tau] += step;
                if next[away] < 0.0 {
                    next[away] = 0.0;
                }
            }
            let total: f64 = next.iter().sum();
            next.iter_mut().for_each(|v| *v /= total);

            let moved = next
                .iter()
                .zip(&p)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            let value = quad(&next, gram);
            if value > *trace.last().expect("trace starts non-empty") {
                // rounding noise at the optimum
                break;
            }
            p = next;
            iterations += 1;
            trace.push(value);
            if moved < cfg.tol {
                break;
            }
        }
    }

    if k > 1 && scale > 0.0 {
        if let Some(exact) = polish_on_support(&p, gram) {
            let value = quad(&exact, gram);
            let last = *trace.last().expect("trace starts non-empty");
            if value <= last + k as f64 * f64::EPSILON * scale && pareto_gap(&exact, gram) <= pareto_gap(&p, gram) {
                p = exact;
                trace.push(value);
            }
        }
    }

    Ok(AggregationWeights {
        pareto_gap: pareto_gap(&p, gram),
        p,
        cu_iterations: iterations,
        objective_trace: trace,
    })
}

/// `θ + Σ p_k Δ_k`.
pub fn aggregate(global: &ParamVector, dev: &DeviationSet, weights: &AggregationWeights) -> Result<ParamVector> {
    if weights.p.len() != dev.len() {
        return Err(Error::DimensionMismatch {
            expected: dev.len(),
            got: weights.p.len(),
        });
    }
    let mut step = ParamVector::zeros_like(global);
    for (pk, d) in weights.p.iter().zip(&dev.deltas) {
        step.axpy(*pk, d)?;
    }
    global.add(&step)
}
