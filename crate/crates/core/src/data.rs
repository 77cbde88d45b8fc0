//! Labeled vector datasets: synthetic generation, Dirichlet non-IID
//! partitioning, stratified local splits and a plain-text file format.
//!
//! File format (UTF-8 text): a header line `N d C`, then `N` lines each
//! holding `d` features followed by an integer label, whitespace separated.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::poincare::norm;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
    classes: usize,
}

impl LabeledDataset {
    /// `features` is row-major with `labels.len()` rows of width `dim`.
    pub fn new(features: Vec<f64>, labels: Vec<usize>, dim: usize, classes: usize) -> Result<Self> {
        if dim == 0 || classes == 0 {
            return Err(Error::invalid("dataset needs positive dimension and class count"));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::DimensionMismatch {
                expected: labels.len() * dim,
                got: features.len(),
            });
        }
        if let Some(i) = labels.iter().position(|&l| l >= classes) {
            return Err(Error::invalid(format!("row {i}: label {} >= {classes}", labels[i])));
        }
        if let Some(i) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("row {}: non-finite feature", i / dim)));
        }
        Ok(LabeledDataset {
            features,
            labels,
            dim,
            classes,
        })
    }

    pub fn empty(dim: usize, classes: usize) -> Self {
        LabeledDataset {
            features: Vec::new(),
            labels: Vec::new(),
            dim,
            classes,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        LabeledDataset {
            features,
            labels,
            dim: self.dim,
            classes: self.classes,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        writeln!(out, "{} {} {}", self.len(), self.dim, self.classes).unwrap();
        for i in 0..self.len() {
            for v in self.row(i) {
                write!(out, "{v} ").unwrap();
            }
            writeln!(out, "{}", self.labels[i]).unwrap();
        }
        fs::write(path, out)?;
        Ok(())
    }
}

/// Reads a labeled-vector text file; see the module docs for the layout.
pub fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    let text = fs::read_to_string(path)?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| parse_err(1, "missing header".into()))?;
    let head: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| parse_err(1, format!("malformed header: {e}")))?;
    let [n, dim, classes] = head[..] else {
        return Err(parse_err(1, "header must be `N d C`".into()));
    };
    if dim == 0 || classes == 0 {
        return Err(parse_err(1, "header has zero dimension or class count".into()));
    }
    let mut features = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    let mut last_line = 1;
    for (idx, line) in lines {
        let lineno = idx + 1;
        last_line = lineno;
        let row = labels.len();
        if row == n {
            return Err(parse_err(lineno, format!("more than the {n} declared records")));
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != dim + 1 {
            return Err(parse_err(
                lineno,
                format!("record {row}: expected {} fields, found {}", dim + 1, tokens.len()),
            ));
        }
        for t in &tokens[..dim] {
            let v: f64 = t
                .parse()
                .map_err(|_| parse_err(lineno, format!("record {row}: bad feature {t:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(lineno, format!("record {row}: non-finite feature")));
            }
            features.push(v);
        }
        let label: usize = tokens[dim]
            .parse()
            .map_err(|_| parse_err(lineno, format!("record {row}: bad label {:?}", tokens[dim])))?;
        if label >= classes {
            return Err(parse_err(
                lineno,
                format!("record {row}: label {label} out of range for {classes} classes"),
            ));
        }
        labels.push(label);
    }
    if labels.len() != n {
        return Err(parse_err(
            last_line + 1,
            format!("truncated: {} of {n} records present", labels.len()),
        ));
    }
    if n == 0 {
        return Err(parse_err(1, "dataset has no records".into()));
    }
    LabeledDataset::new(features, labels, dim, classes)
}

fn gram_schmidt_directions(count: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        if out.len() < dim {
            for u in &out {
                let proj: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= proj * b);
            }
        }
        let r = norm(&v);
        if r > 1e-8 {
            v.iter_mut().for_each(|a| *a /= r);
            out.push(v);
        }
    }
    out
}

/// Gaussian class clusters around unit-norm centers, orthogonal while
/// `classes <= dim`.
///
/// With `hierarchy_depth = D > 0` every class is a binary tree of
/// sub-clusters: a level-`l` node sits `spread / 2^(l-1)` away from its
/// parent in a random direction, and samples scatter around the `2^D`
/// leaves with per-coordinate standard deviation `spread / (2^D sqrt(d))`.
/// Rows are grouped by class, `per_class` each.
pub fn make_synthetic(
    classes: usize,
    dim: usize,
    per_class: usize,
    spread: f64,
    hierarchy_depth: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    if classes < 2 || per_class == 0 || dim == 0 {
        return Err(Error::invalid("synthetic data needs C >= 2, d >= 1, per_class >= 1"));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::invalid("spread must be finite and non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = gram_schmidt_directions(classes, dim, &mut rng);
    let leaves_per_class = 1usize << hierarchy_depth;
    let noise_sd = spread / (leaves_per_class as f64 * (dim as f64).sqrt());
    let noise = Normal::new(0.0, noise_sd).map_err(|e| Error::invalid(e.to_string()))?;

    let mut features = Vec::with_capacity(classes * per_class * dim);
    let mut labels = Vec::with_capacity(classes * per_class);
    for (c, center) in centers.iter().enumerate() {
        // Breadth-first tree of node centers; the last level are the leaves.
        let mut level = vec![center.clone()];
        for l in 1..=hierarchy_depth {
            let step = spread / (1usize << (l - 1)) as f64;
            level = level
                .iter()
                .flat_map(|parent| {
                    gram_schmidt_directions(2, dim, &mut rng)
                        .into_iter()
                        .map(|dir| parent.iter().zip(&dir).map(|(p, u)| p + step * u).collect::<Vec<_>>())
                        .collect::<Vec<_>>()
                })
                .collect();
        }
        for i in 0..per_class {
            let leaf = &level[i % leaves_per_class];
            features.extend(leaf.iter().map(|v| v + noise.sample(&mut rng)));
            labels.push(c);
        }
    }
    LabeledDataset::new(features, labels, dim, classes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub clients: usize,
    pub alpha: f64,
    pub seed: u64,
}

/// Assignment of dataset rows to clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub spec: PartitionSpec,
    /// Row indices held by each client.
    pub assignments: Vec<Vec<usize>>,
    /// `counts[k][c]`: rows of class `c` held by client `k`.
    pub counts: Vec<Vec<usize>>,
    /// Number of empty clients that were given a row from the largest one.
    pub repaired: usize,
}

impl Partition {
    pub fn pools(&self, ds: &LabeledDataset) -> Vec<LabeledDataset> {
        self.assignments.iter().map(|idx| ds.subset(idx)).collect()
    }

    /// Classes absent from client `k`.
    pub fn missing_classes(&self, k: usize) -> Vec<usize> {
        self.counts[k]
            .iter()
            .enumerate()
            .filter(|(_, &n)| n == 0)
            .map(|(c, _)| c)
            .collect()
    }

    /// JSON manifest with the spec, per-client per-class counts and repairs.
    pub fn manifest(&self) -> serde_json::Value {
        serde_json::json!({
            "clients": self.spec.clients,
            "alpha": self.spec.alpha,
            "seed": self.spec.seed,
            "counts": self.counts,
            "repaired": self.repaired,
        })
    }
}

fn dirichlet_draw(k: usize, alpha: f64, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::invalid(e.to_string()))?;
    let mut draw: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draw.iter().sum();
    if total > 0.0 && total.is_finite() {
        draw.iter_mut().for_each(|v| *v /= total);
    } else {
        // every variate underflowed; fall back to a single random owner
        let owner = rand::Rng::random_range(rng, 0..k);
        draw = vec![0.0; k];
        draw[owner] = 1.0;
    }
    Ok(draw)
}

/// Integer counts summing to `total` that follow `weights`: floors first,
/// leftover units to the largest fractional parts (lowest index on ties).
fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let wsum: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| w / wsum * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Splits every class across `spec.clients` clients with proportions drawn
/// from `Dir(alpha)`.
pub fn dirichlet_partition(ds: &LabeledDataset, spec: &PartitionSpec) -> Result<Partition> {
    if spec.clients == 0 {
        return Err(Error::invalid("need at least one client"));
    }
    if !(spec.alpha > 0.0 && spec.alpha.is_finite()) {
        return Err(Error::invalid("Dirichlet concentration must be positive"));
    }
    if ds.is_empty() {
        return Err(Error::invalid("cannot partition an empty dataset"));
    }
    let k = spec.clients;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.classes()];
    for (i, &l) in ds.labels().iter().enumerate() {
        by_class[l].push(i);
    }
    let mut assignments: Vec<Vec<usize>> = vec![Vec::new(); k];
    let mut counts = vec![vec![0usize; ds.classes()]; k];
    for (c, members) in by_class.iter_mut().enumerate() {
        let props = dirichlet_draw(k, spec.alpha, &mut rng)?;
        members.shuffle(&mut rng);
        let alloc = largest_remainder(members.len(), &props);
        let mut start = 0;
        for (client, &n) in alloc.iter().enumerate() {
            assignments[client].extend_from_slice(&members[start..start + n]);
            counts[client][c] += n;
            start += n;
        }
    }

    let mut repaired = 0;
    while let Some(empty) = assignments.iter().position(Vec::is_empty) {
        let donor = (0..k)
            .max_by(|&a, &b| assignments[a].len().cmp(&assignments[b].len()).then(b.cmp(&a)))
            .unwrap();
        if assignments[donor].len() < 2 {
            break;
        }
        let row = assignments[donor].pop().unwrap();
        let label = ds.label(row);
        counts[donor][label] -= 1;
        counts[empty][label] += 1;
        assignments[empty].push(row);
        repaired += 1;
        log::warn!("client {empty} received no data; moved one row from client {donor}");
    }
    for a in &mut assignments {
        a.sort_unstable();
    }

    Ok(Partition {
        spec: spec.clone(),
        assignments,
        counts,
        repaired,
    })
}

/// Stratified random split of `pool` into `(train, test)` index lists.
///
/// The train count is `round(len * train_fraction)`, kept within
/// `[1, len - 1]` when the pool has at least two rows; class quotas are
/// distributed by largest remainder.
pub fn stratified_indices(
    pool: &LabeledDataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_fraction > 0.0 && train_fraction <= 1.0) {
        return Err(Error::invalid("train fraction must lie in (0, 1]"));
    }
    let n = pool.len();
    if n <= 1 {
        return Ok(((0..n).collect(), Vec::new()));
    }
    let mut target = (n as f64 * train_fraction).round() as usize;
    target = target.clamp(1, n - 1);
    let class_counts = pool.class_counts();
    let weights: Vec<f64> = class_counts.iter().map(|&c| c as f64).collect();
    let mut quotas = largest_remainder(target, &weights);
    for (q, &avail) in quotas.iter_mut().zip(&class_counts) {
        *q = (*q).min(avail);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); pool.classes()];
    for (i, &l) in pool.labels().iter().enumerate() {
        by_class[l].push(i);
    }
    let mut train = Vec::with_capacity(target);
    let mut test = Vec::with_capacity(n - target);
    for (members, &q) in by_class.iter_mut().zip(&quotas) {
        members.shuffle(&mut rng);
        train.extend_from_slice(&members[..q]);
        test.extend_from_slice(&members[q..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientShard {
    pub id: usize,
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

impl ClientShard {
    pub fn n_train(&self) -> usize {
        self.train.len()
    }
}

/// Local train/test split of one client's pool.
pub fn split_local(id: usize, pool: &LabeledDataset, train_fraction: f64, seed: u64) -> Result<ClientShard> {
    let (train, test) = stratified_indices(pool, train_fraction, seed)?;
    if test.is_empty() {
        log::warn!("client {id}: pool of {} rows leaves no local test data", pool.len());
    }
    Ok(ClientShard {
        id,
        train: pool.subset(&train),
        test: pool.subset(&test),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_spread_collapses_to_centers() {
        let ds = make_synthetic(3, 4, 5, 0.0, 2, 1).unwrap();
        for c in 0..3 {
            let first = ds.row(c * 5).to_vec();
            for i in 0..5 {
                assert_eq!(ds.row(c * 5 + i), first.as_slice());
            }
            assert!((norm(&first) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn synthetic_shape_and_histogram() {
        let a = make_synthetic(3, 6, 100, 0.5, 1, 1).unwrap();
        let b = make_synthetic(3, 6, 100, 0.5, 1, 2).unwrap();
        assert_eq!(a.len(), 300);
        assert_eq!(a.class_counts(), vec![100, 100, 100]);
        assert_eq!(a.class_counts(), b.class_counts());
        assert_ne!(a.features(), b.features());
    }

    #[test]
    fn centers_are_orthogonal_when_possible() {
        let ds = make_synthetic(4, 6, 1, 0.0, 0, 3).unwrap();
        for i in 0..4 {
            for j in (i + 1)..4 {
                let d: f64 = ds.row(i).iter().zip(ds.row(j)).map(|(a, b)| a * b).sum();
                assert!(d.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn largest_remainder_conserves_total() {
        assert_eq!(largest_remainder(10, &[1.0, 1.0, 1.0]), vec![4, 3, 3]);
        assert_eq!(largest_remainder(7, &[0.0, 1.0]), vec![0, 7]);
        let c = largest_remainder(101, &[0.2, 0.3, 0.5]);
        assert_eq!(c.iter().sum::<usize>(), 101);
    }

    #[test]
    fn partition_conserves_class_counts() {
        let ds = make_synthetic(4, 3, 50, 0.3, 0, 0).unwrap();
        let part = dirichlet_partition(&ds, &PartitionSpec { clients: 6, alpha: 0.3, seed: 9 }).unwrap();
        for c in 0..4 {
            let total: usize = part.counts.iter().map(|row| row[c]).sum();
            assert_eq!(total, 50);
        }
        let mut all: Vec<usize> = part.assignments.concat();
        all.sort_unstable();
        assert_eq!(all, (0..200).collect::<Vec<_>>());
    }

    #[test]
    fn empty_clients_are_repaired() {
        let ds = make_synthetic(2, 2, 3, 0.1, 0, 0).unwrap();
        let part = dirichlet_partition(&ds, &PartitionSpec { clients: 5, alpha: 0.05, seed: 1 }).unwrap();
        assert!(part.assignments.iter().all(|a| !a.is_empty()));
        assert!(part.repaired > 0);
    }

    #[test]
    fn partition_is_deterministic() {
        let ds = make_synthetic(3, 2, 40, 0.3, 0, 0).unwrap();
        let spec = PartitionSpec { clients: 4, alpha: 0.5, seed: 77 };
        assert_eq!(dirichlet_partition(&ds, &spec).unwrap(), dirichlet_partition(&ds, &spec).unwrap());
    }

    #[test]
    fn split_counts() {
        let ds = make_synthetic(4, 2, 25, 0.3, 0, 0).unwrap();
        let shard = split_local(0, &ds, 0.75, 3).unwrap();
        assert_eq!(shard.n_train(), 75);
        assert_eq!(shard.test.len(), 25);
        assert_eq!(shard.train.class_counts(), vec![19, 19, 19, 18]);

        let single = ds.subset(&(0..25).collect::<Vec<_>>());
        let s = split_local(1, &single, 0.75, 3).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (19, 6));

        let (a, b) = stratified_indices(&ds, 0.75, 3).unwrap();
        assert_eq!(stratified_indices(&ds, 0.75, 3).unwrap(), (a.clone(), b.clone()));
        let mut all = [a, b].concat();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn single_row_pool_has_no_test() {
        let ds = make_synthetic(2, 2, 1, 0.3, 0, 0).unwrap().subset(&[0]);
        let s = split_local(0, &ds, 0.75, 0).unwrap();
        assert_eq!(s.n_train(), 1);
        assert!(s.test.is_empty());
    }
}
