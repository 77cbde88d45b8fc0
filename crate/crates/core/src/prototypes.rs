//! Fixed class prototypes on the Poincaré ball.
//!
//! Prototypes are placed by minimising the mean, over classes, of the
//! largest cosine similarity to any other class (a matrix form of the Tammes
//! problem) with rows constrained to the unit sphere, then contracted
//! towards the origin by a slope `s`. The result is frozen and shared by
//! every participant of a run.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::poincare::{dot, norm, BallPoint, MAX_NORM};

const UNIT_TOL: f64 = 1e-6;

/// Projected subgradient descent settings for the prototype placement.
///
/// The step size decays geometrically from `learning_rate` to
/// `final_learning_rate` over `max_iters` steps.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TammesConfig {
    pub learning_rate: f64,
    pub final_learning_rate: f64,
    pub max_iters: usize,
    /// Loss change regarded as a stall.
    pub tol: f64,
    /// Consecutive stalled steps before stopping.
    pub patience: usize,
}

impl Default for TammesConfig {
    fn default() -> Self {
        TammesConfig {
            learning_rate: 1.0,
            final_learning_rate: 1e-5,
            max_iters: 2000,
            tol: 1e-7,
            patience: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TammesReport {
    pub final_loss: f64,
    pub max_pairwise_cosine: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Loss of every accepted (best-so-far) iterate, starting with the
    /// initial draw. Non-increasing.
    pub loss_trace: Vec<f64>,
}

fn check_unit_rows(rows: &[Vec<f64>]) -> Result<usize> {
    let dim = rows.first().map(Vec::len).unwrap_or(0);
    if rows.len() < 2 || dim == 0 {
        return Err(Error::invalid("need at least two non-empty prototype rows"));
    }
    for (i, r) in rows.iter().enumerate() {
        if r.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: r.len() });
        }
        if (norm(r) - 1.0).abs() > UNIT_TOL {
            return Err(Error::invalid(format!("prototype row {i} is not unit norm")));
        }
    }
    Ok(dim)
}

// Column of the largest off-diagonal entry of row i, lowest index on ties.
fn row_argmax(rows: &[Vec<f64>], i: usize) -> (usize, f64) {
    let mut best = (usize::MAX, f64::NEG_INFINITY);
    for (j, r) in rows.iter().enumerate() {
        if j == i {
            continue;
        }
        let c = dot(&rows[i], r);
        if c > best.1 {
            best = (j, c);
        }
    }
    best
}

fn loss_unchecked(rows: &[Vec<f64>]) -> f64 {
    let c = rows.len() as f64;
    (0..rows.len()).map(|i| row_argmax(rows, i).1).sum::<f64>() / c
}

/// `L_P = (1/C) Σ_i max_j M_ij` with `M = W Wᵀ - 2I`.
///
/// Rows must be unit norm; the diagonal shift means the row maximum is
/// always an off-diagonal cosine.
pub fn tammes_loss(rows: &[Vec<f64>]) -> Result<f64> {
    check_unit_rows(rows)?;
    Ok(loss_unchecked(rows))
}

/// Largest cosine similarity over all distinct pairs of rows.
pub fn max_pairwise_cosine(rows: &[Vec<f64>]) -> f64 {
    let mut best = f64::NEG_INFINITY;
    for i in 0..rows.len() {
        for j in (i + 1)..rows.len() {
            let c = dot(&rows[i], &rows[j]) / (norm(&rows[i]) * norm(&rows[j]));
            best = best.max(c);
        }
    }
    best
}

fn normalize(v: &mut [f64]) -> bool {
    let r = norm(v);
    if r == 0.0 || !r.is_finite() {
        return false;
    }
    v.iter_mut().for_each(|c| *c /= r);
    true
}

/// `count` independent directions drawn uniformly on the unit sphere.
pub fn random_unit_rows(count: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| loop {
            let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
            if normalize(&mut v) {
                break v;
            }
        })
        .collect()
}

/// Places `classes` unit vectors in `dim` dimensions as far apart as
/// possible. Returns the best iterate seen, which is not necessarily the
/// last one.
pub fn optimize_prototypes(
    classes: usize,
    dim: usize,
    seed: u64,
    cfg: &TammesConfig,
) -> Result<(Vec<Vec<f64>>, TammesReport)> {
    if classes < 2 {
        return Err(Error::invalid("need at least two classes"));
    }
    if dim < 2 {
        return Err(Error::invalid("prototype dimension must be at least 2"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = random_unit_rows(classes, dim, &mut rng);
    let mut loss = loss_unchecked(&rows);
    let mut best = rows.clone();
    let mut trace = vec![loss];
    let mut stalled = 0;
    let mut iterations = 0;
    let mut converged = false;
    let inv_c = 1.0 / classes as f64;
    let decay = (cfg.final_learning_rate / cfg.learning_rate).ln();

    for it in 0..cfg.max_iters {
        let lr = cfg.learning_rate * (decay * it as f64 / cfg.max_iters as f64).exp();
        let mut grad = vec![vec![0.0; dim]; classes];
        for i in 0..classes {
            let (j, _) = row_argmax(&rows, i);
            for d in 0..dim {
                grad[i][d] += rows[j][d] * inv_c;
                grad[j][d] += rows[i][d] * inv_c;
            }
        }
        for (row, g) in rows.iter_mut().zip(&grad) {
            let mut next: Vec<f64> = row.iter().zip(g).map(|(w, gi)| w - lr * gi).collect();
            if normalize(&mut next) {
                *row = next;
            }
        }
        iterations = it + 1;
        let next_loss = loss_unchecked(&rows);
        if (next_loss - loss).abs() < cfg.tol {
            stalled += 1;
        } else {
            stalled = 0;
        }
        loss = next_loss;
        if loss < *trace.last().unwrap() {
            best.clone_from(&rows);
            trace.push(loss);
        }
        if stalled >= cfg.patience {
            converged = true;
            break;
        }
    }

    let report = TammesReport {
        final_loss: *trace.last().unwrap(),
        max_pairwise_cosine: max_pairwise_cosine(&best),
        iterations,
        converged,
        loss_trace: trace,
    };
    Ok((best, report))
}

/// The frozen predictor: `C` prototypes of norm `s` inside the ball.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    points: Vec<BallPoint>,
    slope: f64,
    seed: u64,
}

fn scale_rows(rows: &[Vec<f64>], s: f64) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|r| r.iter().map(|c| c * s).collect())
        .collect()
}

/// Contracts unit-norm prototypes towards the origin: `W_P = s W*`.
pub fn contract(unit_rows: &[Vec<f64>], slope: f64) -> Result<PrototypeSet> {
    check_unit_rows(unit_rows)?;
    if !(slope > 0.0 && slope <= MAX_NORM) {
        return Err(Error::invalid(format!(
            "slope {slope} outside (0, {MAX_NORM}]"
        )));
    }
    let points = scale_rows(unit_rows, slope)
        .into_iter()
        .map(BallPoint::from_clamped)
        .collect();
    Ok(PrototypeSet {
        points,
        slope,
        seed: 0,
    })
}

/// Optimised placement followed by contraction, recording `seed` in the set.
pub fn tammes_prototypes(
    classes: usize,
    dim: usize,
    slope: f64,
    seed: u64,
    cfg: &TammesConfig,
) -> Result<(PrototypeSet, TammesReport)> {
    let (rows, report) = optimize_prototypes(classes, dim, seed, cfg)?;
    Ok((contract(&rows, slope)?.with_seed(seed), report))
}

/// Uniformly random (not optimised) directions contracted by `slope`.
pub fn random_prototypes(classes: usize, dim: usize, slope: f64, seed: u64) -> Result<PrototypeSet> {
    if classes < 2 || dim == 0 {
        return Err(Error::invalid("need at least two classes and a positive dimension"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(contract(&random_unit_rows(classes, dim, &mut rng), slope)?.with_seed(seed))
}

const HEADER_LEN: usize = 32;

impl PrototypeSet {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn classes(&self) -> usize {
        self.points.len()
    }

    pub fn dim(&self) -> usize {
        self.points[0].dim()
    }

    pub fn slope(&self) -> f64 {
        self.slope
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn point(&self, class: usize) -> &BallPoint {
        &self.points[class]
    }

    pub fn points(&self) -> &[BallPoint] {
        &self.points
    }

    /// Layout: `C: u64, n: u64, s: f64, seed: u64`, then `C * n` row-major
    /// `f64` values. Everything little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * self.classes() * self.dim());
        out.extend_from_slice(&(self.classes() as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim() as u64).to_le_bytes());
        out.extend_from_slice(&self.slope.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        for p in &self.points {
            for c in p.coords() {
                out.extend_from_slice(&c.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let word = |i: usize| -> [u8; 8] { bytes[i * 8..i * 8 + 8].try_into().unwrap() };
        if bytes.len() < HEADER_LEN {
            return Err(Error::invalid("prototype file shorter than its header"));
        }
        let classes = u64::from_le_bytes(word(0)) as usize;
        let dim = u64::from_le_bytes(word(1)) as usize;
        let slope = f64::from_le_bytes(word(2));
        let seed = u64::from_le_bytes(word(3));
        if classes < 2 || dim == 0 {
            return Err(Error::invalid("prototype header has C < 2 or n = 0"));
        }
        let expected = classes
            .checked_mul(dim)
            .and_then(|v| v.checked_mul(8))
            .and_then(|v| v.checked_add(HEADER_LEN));
        if expected != Some(bytes.len()) {
            return Err(Error::invalid(format!(
                "prototype file has {} bytes, header implies {classes}x{dim}",
                bytes.len()
            )));
        }
        if !(slope > 0.0 && slope <= MAX_NORM) {
            return Err(Error::invalid(format!("prototype slope {slope} out of range")));
        }
        let mut points = Vec::with_capacity(classes);
        for c in 0..classes {
            let row: Vec<f64> = (0..dim)
                .map(|d| f64::from_le_bytes(word(4 + c * dim + d)))
                .collect();
            points.push(BallPoint::new(row)?);
        }
        Ok(PrototypeSet {
            points,
            slope,
            seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}
