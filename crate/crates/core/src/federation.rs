//! Round-based federated training, evaluation and run outputs.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{
    aggregate, compute_deviations, consistent_update, fedavg_weights, pareto_gap, AggregationWeights, CuConfig,
};
use crate::data::{
    dirichlet_partition, load_dataset, make_synthetic, split_local, stratified_indices, ClientShard, LabeledDataset,
    Partition, PartitionSpec,
};
use crate::error::{Error, Result};
use crate::learner::{
    local_train, predict_all, Activation, ExtractorConfig, Metric, ParamVector, TrainOptions, TripletConfig,
};
use crate::prototypes::{random_prototypes, tammes_prototypes, PrototypeSet, TammesConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregator {
    #[default]
    Consistent,
    Averaged,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrototypeMode {
    #[default]
    TammesFixed,
}

/// Which mechanism (if any) is switched off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    /// Random instead of uniformly spread prototypes, still shared and frozen.
    GeodesicMetricOnly,
    /// Every client keeps its own random frozen prototypes.
    FixedOnly,
    /// Shared prototypes that are regenerated every round.
    SharedOnly,
    /// Data-weighted averaging instead of the consistent update.
    Averaged,
}

impl Variant {
    pub const ABLATIONS: [Variant; 4] = [
        Variant::GeodesicMetricOnly,
        Variant::FixedOnly,
        Variant::SharedOnly,
        Variant::Averaged,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::GeodesicMetricOnly => "geodesic_metric_only",
            Variant::FixedOnly => "fixed_only",
            Variant::SharedOnly => "shared_only",
            Variant::Averaged => "averaged",
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Variant::Full]
            .into_iter()
            .chain(Variant::ABLATIONS)
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Hierarchical Gaussian classes; a stratified slice is held out as the
    /// global test set.
    Synthetic {
        classes: usize,
        dim: usize,
        per_class: usize,
        spread: f64,
        #[serde(default)]
        hierarchy_depth: usize,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
    },
    /// Pre-split text datasets.
    Files { train: PathBuf, test: PathBuf },
}

fn default_test_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    pub clients: usize,
    pub alpha: f64,
    /// Local train share of each client's pool; the rest is its P-FL test.
    pub train_fraction: f64,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        PartitionConfig {
            clients: 20,
            alpha: 0.5,
            train_fraction: 0.75,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorSection {
    pub hidden: Vec<usize>,
    /// Prototype and embedding dimension.
    pub output_dim: usize,
    pub activation: Activation,
}

impl Default for ExtractorSection {
    fn default() -> Self {
        ExtractorSection {
            hidden: vec![32],
            output_dim: 20,
            activation: Activation::Tanh,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TripletSection {
    pub margin: f64,
    pub negatives_per_sample: usize,
}

impl Default for TripletSection {
    fn default() -> Self {
        let t = TripletConfig::default();
        TripletSection {
            margin: t.margin,
            negatives_per_sample: t.negatives_per_sample,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every random stream in a run is derived from it.
    pub seed: u64,
    pub rounds: usize,
    /// Prototype radius inside the ball.
    pub slope: f64,
    pub lr: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub aggregator: Aggregator,
    pub prototype_mode: PrototypeMode,
    pub metric: Metric,
    pub variant: Variant,
    /// Local epochs of finetuning before each P-FL evaluation.
    pub finetune_epochs: usize,
    pub finetune_steps: Option<usize>,
    /// Write per-round aggregation details to `aggregation.jsonl`.
    pub debug_dump: bool,
    pub dataset: DatasetConfig,
    pub partition: PartitionConfig,
    pub extractor: ExtractorSection,
    pub triplet: TripletSection,
    pub tammes: TammesConfig,
    pub cu: CuConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            rounds: 30,
            slope: 0.9,
            lr: 0.3,
            local_epochs: 5,
            batch_size: 128,
            aggregator: Aggregator::Consistent,
            prototype_mode: PrototypeMode::TammesFixed,
            metric: Metric::Geodesic,
            variant: Variant::Full,
            finetune_epochs: 5,
            finetune_steps: None,
            debug_dump: false,
            dataset: DatasetConfig::Synthetic {
                classes: 5,
                dim: 16,
                per_class: 400,
                spread: 2.0,
                hierarchy_depth: 2,
                test_fraction: 0.2,
            },
            partition: PartitionConfig::default(),
            extractor: ExtractorSection::default(),
            triplet: TripletSection::default(),
            tammes: TammesConfig::default(),
            cu: CuConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Format {
            path: PathBuf::from("<config>"),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Format { message, .. } => Error::Format {
                path: path.to_path_buf(),
                message,
            },
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::invalid("rounds must be at least 1"));
        }
        if !(self.slope > 0.0 && self.slope < 1.0) {
            return Err(Error::invalid("slope must lie in (0, 1)"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("learning rate must be finite and non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if self.partition.clients == 0 {
            return Err(Error::invalid("need at least one client"));
        }
        if !(self.partition.alpha > 0.0 && self.partition.alpha.is_finite()) {
            return Err(Error::invalid("alpha must be positive"));
        }
        if !(self.partition.train_fraction > 0.0 && self.partition.train_fraction <= 1.0) {
            return Err(Error::invalid("train fraction must lie in (0, 1]"));
        }
        if let DatasetConfig::Synthetic { test_fraction, .. } = self.dataset {
            if !(test_fraction > 0.0 && test_fraction < 1.0) {
                return Err(Error::invalid("test fraction must lie in (0, 1)"));
            }
        }
        self.triplet_config(0).validate()?;
        ExtractorConfig {
            input_dim: 1,
            hidden: self.extractor.hidden.clone(),
            output_dim: self.extractor.output_dim,
            activation: self.extractor.activation,
            init_seed: 0,
        }
        .validate()
    }

    fn effective_aggregator(&self) -> Aggregator {
        if self.variant == Variant::Averaged {
            Aggregator::Averaged
        } else {
            self.aggregator
        }
    }

    fn triplet_config(&self, seed: u64) -> TripletConfig {
        TripletConfig {
            margin: self.triplet.margin,
            negatives_per_sample: self.triplet.negatives_per_sample,
            seed,
            metric: self.metric,
        }
    }

    fn train_options(&self) -> TrainOptions {
        TrainOptions {
            epochs: self.local_epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            max_steps: None,
        }
    }

    fn finetune_options(&self) -> TrainOptions {
        TrainOptions {
            epochs: self.finetune_epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            max_steps: self.finetune_steps,
        }
    }
}

/// Independent random streams of a run.
pub mod stream {
    pub const DATA: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const PARTITION: u64 = 3;
    pub const LOCAL_SPLIT: u64 = 4;
    pub const PROTOTYPES: u64 = 5;
    pub const CLIENT_PROTOTYPES: u64 = 6;
    pub const INIT: u64 = 7;
    pub const TRAIN: u64 = 8;
    pub const FINETUNE: u64 = 9;
}

/// Seed number `index` of stream `stream` under the master seed.
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stream);
    rng.set_word_pos(u128::from(index) * 2);
    rng.next_u64()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub gfl_accuracy: f64,
    /// Per-class global accuracy; `None` for classes absent from the test set.
    pub gfl_class_accuracy: Vec<Option<f64>>,
    /// Mean over clients that have local test data.
    pub pfl_accuracy: f64,
    /// `None` for clients without local test data.
    pub pfl_client_accuracy: Vec<Option<f64>>,
    pub mean_train_loss: f64,
    pub p: Vec<f64>,
    pub cu_iterations: usize,
    pub pareto_gap: f64,
    /// Not part of the metric stream, which must be reproducible byte for byte.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

/// Everything the server saw in one round, handed to the observer.
pub struct RoundTrace<'a> {
    pub round: usize,
    pub global_before: &'a ParamVector,
    pub locals: &'a [ParamVector],
    pub n_samples: &'a [usize],
    pub weights: &'a AggregationWeights,
    pub gram_diagonal: Vec<f64>,
    pub global_after: &'a ParamVector,
    /// Server prototype set used this round.
    pub prototypes: &'a PrototypeSet,
    pub record: &'a RoundRecord,
}

/// Materialised data of a run.
#[derive(Debug, Clone)]
pub struct Setup {
    pub global_test: LabeledDataset,
    pub partition: Partition,
    pub shards: Vec<ClientShard>,
    pub extractor: ExtractorConfig,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub config: ExperimentConfig,
    pub records: Vec<RoundRecord>,
    pub global: ParamVector,
    /// Client models from the last round.
    pub locals: Vec<ParamVector>,
    pub prototypes: PrototypeSet,
    pub setup: Setup,
    pub aggregation_log: Vec<serde_json::Value>,
}

fn load_splits(cfg: &ExperimentConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    match &cfg.dataset {
        DatasetConfig::Synthetic {
            classes,
            dim,
            per_class,
            spread,
            hierarchy_depth,
            test_fraction,
        } => {
            let all = make_synthetic(
                *classes,
                *dim,
                *per_class,
                *spread,
                *hierarchy_depth,
                derive_seed(cfg.seed, stream::DATA, 0),
            )?;
            let (train, test) = stratified_indices(&all, 1.0 - test_fraction, derive_seed(cfg.seed, stream::SPLIT, 0))?;
            Ok((all.subset(&train), all.subset(&test)))
        }
        DatasetConfig::Files { train, test } => {
            let train = load_dataset(train)?;
            let test = load_dataset(test)?;
            if train.dim() != test.dim() || train.classes() != test.classes() {
                return Err(Error::invalid("train and test files disagree on dimension or classes"));
            }
            Ok((train, test))
        }
    }
}

/// Builds datasets, client shards and the extractor shape for `cfg`.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Setup> {
    cfg.validate()?;
    let (train, global_test) = load_splits(cfg)?;
    if global_test.is_empty() {
        return Err(Error::invalid("global test set is empty"));
    }
    let partition = dirichlet_partition(
        &train,
        &PartitionSpec {
            clients: cfg.partition.clients,
            alpha: cfg.partition.alpha,
            seed: derive_seed(cfg.seed, stream::PARTITION, 0),
        },
    )?;
    let shards = partition
        .pools(&train)
        .iter()
        .enumerate()
        .map(|(k, pool)| {
            split_local(
                k,
                pool,
                cfg.partition.train_fraction,
                derive_seed(cfg.seed, stream::LOCAL_SPLIT, k as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let extractor = ExtractorConfig {
        input_dim: train.dim(),
        hidden: cfg.extractor.hidden.clone(),
        output_dim: cfg.extractor.output_dim,
        activation: cfg.extractor.activation,
        init_seed: derive_seed(cfg.seed, stream::INIT, 0),
    };
    Ok(Setup {
        global_test,
        partition,
        shards,
        extractor,
    })
}

/// Prototype sets in force for one round: the server's and each client's.
struct RoundPrototypes {
    server: PrototypeSet,
    clients: Option<Vec<PrototypeSet>>,
}

impl RoundPrototypes {
    fn for_client(&self, k: usize) -> &PrototypeSet {
        self.clients.as_ref().map_or(&self.server, |c| &c[k])
    }
}

fn tammes_set(cfg: &ExperimentConfig, classes: usize, seed: u64) -> Result<PrototypeSet> {
    let (set, report) = tammes_prototypes(classes, cfg.extractor.output_dim, cfg.slope, seed, &cfg.tammes)?;
    log::debug!(
        "prototypes: loss {:.6}, max cosine {:.6}, {} iterations",
        report.final_loss,
        report.max_pairwise_cosine,
        report.iterations
    );
    Ok(set)
}

fn round_prototypes(
    cfg: &ExperimentConfig,
    classes: usize,
    clients: usize,
    round: usize,
) -> Result<RoundPrototypes> {
    let n = cfg.extractor.output_dim;
    let base = derive_seed(cfg.seed, stream::PROTOTYPES, 0);
    match cfg.variant {
        Variant::SharedOnly => Ok(RoundPrototypes {
            server: tammes_set(cfg, classes, derive_seed(cfg.seed, stream::PROTOTYPES, round as u64))?,
            clients: None,
        }),
        Variant::Full | Variant::Averaged => Ok(RoundPrototypes {
            server: tammes_set(cfg, classes, base)?,
            clients: None,
        }),
        Variant::GeodesicMetricOnly => Ok(RoundPrototypes {
            server: random_prototypes(classes, n, cfg.slope, base)?,
            clients: None,
        }),
        Variant::FixedOnly => Ok(RoundPrototypes {
            server: random_prototypes(classes, n, cfg.slope, base)?,
            clients: Some(
                (0..clients)
                    .map(|k| {
                        random_prototypes(
                            classes,
                            n,
                            cfg.slope,
                            derive_seed(cfg.seed, stream::CLIENT_PROTOTYPES, k as u64),
                        )
                    })
                    .collect::<Result<_>>()?,
            ),
        }),
    }
}

fn correct_by_class(
    theta: &ParamVector,
    ecfg: &ExtractorConfig,
    protos: &PrototypeSet,
    data: &LabeledDataset,
    metric: Metric,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let pred = predict_all(theta, ecfg, protos, data, metric)?;
    let mut hits = vec![0; data.classes()];
    let mut totals = vec![0; data.classes()];
    for (i, p) in pred.into_iter().enumerate() {
        let y = data.label(i);
        totals[y] += 1;
        if p == y {
            hits[y] += 1;
        }
    }
    Ok((hits, totals))
}

/// Top-1 accuracy of the global model on the global test set.
pub fn evaluate_gfl(
    global: &ParamVector,
    ecfg: &ExtractorConfig,
    protos: &PrototypeSet,
    test: &LabeledDataset,
    metric: Metric,
) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::invalid("global test set is empty"));
    }
    let (hits, _) = correct_by_class(global, ecfg, protos, test, metric)?;
    Ok(hits.iter().sum::<usize>() as f64 / test.len() as f64)
}

/// Accuracy restricted to each class.
pub fn evaluate_gfl_per_class(
    global: &ParamVector,
    ecfg: &ExtractorConfig,
    protos: &PrototypeSet,
    test: &LabeledDataset,
    metric: Metric,
) -> Result<Vec<Option<f64>>> {
    let (hits, totals) = correct_by_class(global, ecfg, protos, test, metric)?;
    Ok(hits
        .iter()
        .zip(&totals)
        .map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64))
        .collect())
}

/// Finetunes a copy of `global` on each client's train split and scores it
/// on that client's test split. Clients without test data yield `None`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_pfl(
    global: &ParamVector,
    ecfg: &ExtractorConfig,
    shards: &[ClientShard],
    protos: &[&PrototypeSet],
    tcfg: &TripletConfig,
    opts: &TrainOptions,
    seeds: &[u64],
) -> Result<Vec<Option<f64>>> {
    if protos.len() != shards.len() || seeds.len() != shards.len() {
        return Err(Error::DimensionMismatch {
            expected: shards.len(),
            got: protos.len().min(seeds.len()),
        });
    }
    shards
        .par_iter()
        .enumerate()
        .map(|(k, shard)| {
            if shard.test.is_empty() {
                log::debug!("client {}: no local test data, skipped in P-FL", shard.id);
                return Ok(None);
            }
            let tuned = if opts.epochs == 0 || shard.train.is_empty() {
                global.clone()
            } else {
                let t = TripletConfig {
                    seed: seeds[k],
                    ..tcfg.clone()
                };
                local_train(global, &shard.train, protos[k], ecfg, &t, opts)?.params
            };
            let (hits, _) = correct_by_class(&tuned, ecfg, protos[k], &shard.test, tcfg.metric)?;
            Ok(Some(hits.iter().sum::<usize>() as f64 / shard.test.len() as f64))
        })
        .collect()
}

fn mean_some(values: &[Option<f64>]) -> f64 {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    if present.is_empty() {
        f64::NAN
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

/// Runs all rounds of `cfg` without observing them.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    run_experiment_with(cfg, &mut |_| Ok(()))
}

/// Runs all rounds, calling `observer` after each one. An error from any
/// round (including the observer) aborts the run and names the round.
pub fn run_experiment_with(
    cfg: &ExperimentConfig,
    observer: &mut dyn FnMut(&RoundTrace) -> Result<()>,
) -> Result<RunOutput> {
    let setup = prepare(cfg)?;
    let classes = setup.global_test.classes();
    let k_clients = setup.shards.len();
    let ecfg = &setup.extractor;
    let n_samples: Vec<usize> = setup.shards.iter().map(ClientShard::n_train).collect();
    let mut global = ecfg.init();
    let mut protos = round_prototypes(cfg, classes, k_clients, 0).map_err(|e| wrap(0, e))?;
    let mut records = Vec::with_capacity(cfg.rounds);
    let mut locals = Vec::new();
    let mut aggregation_log = Vec::new();

    for t in 0..cfg.rounds {
        let started = Instant::now();
        if t > 0 && cfg.variant == Variant::SharedOnly {
            protos = round_prototypes(cfg, classes, k_clients, t).map_err(|e| wrap(t, e))?;
        }
        let step = || -> Result<_> {
            let opts = cfg.train_options();
            let results = setup
                .shards
                .par_iter()
                .enumerate()
                .map(|(k, shard)| {
                    let seed = derive_seed(cfg.seed, stream::TRAIN, (t * k_clients + k) as u64);
                    local_train(&global, &shard.train, protos.for_client(k), ecfg, &cfg.triplet_config(seed), &opts)
                })
                .collect::<Result<Vec<_>>>()?;
            let mean_loss = results.iter().map(|r| r.mean_loss()).sum::<f64>() / k_clients as f64;
            let round_locals: Vec<ParamVector> = results.into_iter().map(|r| r.params).collect();

            let dev = compute_deviations(&global, &round_locals)?;
            let weights = match cfg.effective_aggregator() {
                Aggregator::Consistent => consistent_update(&dev, &n_samples, &cfg.cu)?,
                Aggregator::Averaged => {
                    let mut w = fedavg_weights(&n_samples)?;
                    w.pareto_gap = pareto_gap(&w.p, &dev.gram);
                    w
                }
            };
            let next = aggregate(&global, &dev, &weights)?;

            let gfl = evaluate_gfl(&next, ecfg, &protos.server, &setup.global_test, cfg.metric)?;
            let gfl_class = evaluate_gfl_per_class(&next, ecfg, &protos.server, &setup.global_test, cfg.metric)?;
            let client_protos: Vec<&PrototypeSet> = (0..k_clients).map(|k| protos.for_client(k)).collect();
            let seeds: Vec<u64> = (0..k_clients)
                .map(|k| derive_seed(cfg.seed, stream::FINETUNE, (t * k_clients + k) as u64))
                .collect();
            let pfl = evaluate_pfl(
                &next,
                ecfg,
                &setup.shards,
                &client_protos,
                &cfg.triplet_config(0),
                &cfg.finetune_options(),
                &seeds,
            )?;
            let record = RoundRecord {
                round: t,
                gfl_accuracy: gfl,
                gfl_class_accuracy: gfl_class,
                pfl_accuracy: mean_some(&pfl),
                pfl_client_accuracy: pfl,
                mean_train_loss: mean_loss,
                p: weights.p.clone(),
                cu_iterations: weights.cu_iterations,
                pareto_gap: weights.pareto_gap,
                wall_time_secs: started.elapsed().as_secs_f64(),
            };
            Ok((round_locals, dev.gram_diagonal(), weights, next, record))
        };
        let (round_locals, gram_diagonal, weights, next, record) = step().map_err(|e| wrap(t, e))?;
        if cfg.debug_dump {
            aggregation_log.push(serde_json::json!({
                "round": t,
                "p": weights.p,
                "cu_iterations": weights.cu_iterations,
                "pareto_gap": weights.pareto_gap,
                "gram_diagonal": gram_diagonal,
            }));
        }
        observer(&RoundTrace {
            round: t,
            global_before: &global,
            locals: &round_locals,
            n_samples: &n_samples,
            weights: &weights,
            gram_diagonal,
            global_after: &next,
            prototypes: &protos.server,
            record: &record,
        })
        .map_err(|e| wrap(t, e))?;
        log::info!(
            "round {t}: G-FL {:.4} P-FL {:.4} loss {:.4}",
            record.gfl_accuracy,
            record.pfl_accuracy,
            record.mean_train_loss
        );
        global = next;
        locals = round_locals;
        records.push(record);
    }

    Ok(RunOutput {
        config: cfg.clone(),
        records,
        global,
        locals,
        prototypes: protos.server,
        setup,
        aggregation_log,
    })
}

fn wrap(round: usize, e: Error) -> Error {
    match e {
        Error::Round { .. } => e,
        other => Error::Round {
            round,
            source: Box::new(other),
        },
    }
}

/// Runs `cfg` with one mechanism switched off and returns its records.
pub fn run_ablation(cfg: &ExperimentConfig, variant: Variant) -> Result<Vec<RoundRecord>> {
    let cfg = ExperimentConfig {
        variant,
        ..cfg.clone()
    };
    Ok(run_experiment(&cfg)?.records)
}

fn jsonl<T: Serialize>(items: impl IntoIterator<Item = T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, &item)?;
        out.push(b'\n');
    }
    Ok(out)
}

/// One JSON line per round.
pub fn metrics_jsonl(records: &[RoundRecord]) -> Result<Vec<u8>> {
    jsonl(records)
}

/// Writes every run artifact into `dir`.
pub fn write_outputs(dir: &Path, out: &RunOutput) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("metrics.jsonl"), metrics_jsonl(&out.records)?)?;
    fs::write(
        dir.join("timings.jsonl"),
        jsonl(
            out.records
                .iter()
                .map(|r| serde_json::json!({"round": r.round, "wall_time_secs": r.wall_time_secs})),
        )?,
    )?;
    out.global.save(&dir.join("global.ckpt"))?;
    for (k, local) in out.locals.iter().enumerate() {
        local.save(&dir.join(format!("client_{k}.ckpt")))?;
    }
    let mut manifest = fs::File::create(dir.join("partition.json"))?;
    serde_json::to_writer_pretty(&mut manifest, &out.setup.partition.manifest())?;
    manifest.write_all(b"\n")?;
    out.prototypes.save(&dir.join("prototypes.bin"))?;
    fs::write(dir.join("config.toml"), out.config.to_toml_string())?;
    if out.config.debug_dump {
        fs::write(dir.join("aggregation.jsonl"), jsonl(&out.aggregation_log)?)?;
    }
    Ok(())
}
