use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use hyperfed::data::{dirichlet_partition, load_dataset, split_local, PartitionSpec};
use hyperfed::federation::{
    evaluate_gfl_per_class, metrics_jsonl, run_experiment_with, write_outputs, ExperimentConfig, Variant,
};
use hyperfed::learner::{Activation, ExtractorConfig, Metric, ParamVector};
use hyperfed::prototypes::{tammes_prototypes, PrototypeSet, TammesConfig};

#[derive(Parser)]
#[command(name = "hyperfed", version, about = "Federated learning with hyperbolic prototypes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a federated experiment from a TOML config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the master seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// full, geodesic_metric_only, fixed_only, shared_only or averaged.
        #[arg(long)]
        variant: Option<String>,
    },
    /// Score a checkpoint on a dataset file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Defaults to prototypes.bin next to the checkpoint.
        #[arg(long)]
        protos: Option<PathBuf>,
        #[arg(long, default_value = "tanh")]
        activation: String,
        #[arg(long, default_value = "geodesic")]
        metric: String,
    },
    /// Build a Tammes prototype set.
    Protos {
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        dim: usize,
        #[arg(long)]
        slope: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Split a dataset file across clients.
    Partition {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        clients: usize,
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.75)]
        train_fraction: f64,
    },
}

fn run(config: &Path, seed: Option<u64>, out: &Path, variant: Option<&str>) -> Result<()> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if let Some(v) = variant {
        cfg.variant = v.parse::<Variant>()?;
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let metrics_path = out.join("metrics.jsonl");
    fs::write(&metrics_path, b"")?;
    // Append as rounds finish so an aborted run keeps its completed rounds.
    let result = run_experiment_with(&cfg, &mut |trace| {
        use std::io::Write;
        let mut f = fs::OpenOptions::new().append(true).open(&metrics_path)?;
        f.write_all(&metrics_jsonl(std::slice::from_ref(trace.record))?)?;
        Ok(())
    })?;
    write_outputs(out, &result)?;
    let last = result.records.last().expect("at least one round");
    println!(
        "{}",
        json!({
            "rounds": result.records.len(),
            "gfl_accuracy": last.gfl_accuracy,
            "pfl_accuracy": last.pfl_accuracy,
            "out": out,
        })
    );
    Ok(())
}

fn eval(checkpoint: &Path, data: &Path, protos: Option<&Path>, activation: &str, metric: &str) -> Result<()> {
    let theta = ParamVector::load(checkpoint)?;
    let activation: Activation = activation.parse()?;
    let metric: Metric = metric.parse()?;
    let cfg = ExtractorConfig::from_layout(theta.layout(), activation)?;
    let protos_path = match protos {
        Some(p) => p.to_path_buf(),
        None => checkpoint.with_file_name("prototypes.bin"),
    };
    let protos = PrototypeSet::load(&protos_path)?;
    let ds = load_dataset(data)?;
    let per_class = evaluate_gfl_per_class(&theta, &cfg, &protos, &ds, metric)?;
    let counts = ds.class_counts();
    let hits: f64 = per_class
        .iter()
        .zip(&counts)
        .map(|(a, &n)| a.unwrap_or(0.0) * n as f64)
        .sum();
    println!(
        "{}",
        json!({
            "instances": ds.len(),
            "accuracy": hits / ds.len() as f64,
            "class_accuracy": per_class,
        })
    );
    Ok(())
}

fn protos(classes: usize, dim: usize, slope: f64, out: &Path, seed: u64) -> Result<()> {
    let (set, report) = tammes_prototypes(classes, dim, slope, seed, &TammesConfig::default())?;
    set.save(out)?;
    println!(
        "{}",
        json!({
            "classes": classes,
            "dim": dim,
            "slope": slope,
            "seed": seed,
            "loss": report.final_loss,
            "max_pairwise_cosine": report.max_pairwise_cosine,
            "iterations": report.iterations,
            "converged": report.converged,
        })
    );
    Ok(())
}

fn partition(data: &Path, clients: usize, alpha: f64, out: &Path, seed: u64, train_fraction: f64) -> Result<()> {
    let ds = load_dataset(data)?;
    let part = dirichlet_partition(&ds, &PartitionSpec { clients, alpha, seed })?;
    fs::create_dir_all(out)?;
    for (k, pool) in part.pools(&ds).iter().enumerate() {
        let shard = split_local(k, pool, train_fraction, seed.wrapping_add(k as u64))?;
        shard.train.write(&out.join(format!("client_{k}_train.txt")))?;
        shard.test.write(&out.join(format!("client_{k}_test.txt")))?;
    }
    fs::write(out.join("partition.json"), serde_json::to_string_pretty(&part.manifest())? + "\n")?;
    println!("{}", json!({"clients": clients, "repaired": part.repaired, "out": out}));
    Ok(())
}

fn error_record(err: &anyhow::Error) -> serde_json::Value {
    let kind = err
        .downcast_ref::<hyperfed::Error>()
        .map(|e| e.kind())
        .or_else(|| err.downcast_ref::<std::io::Error>().map(|_| "io"))
        .unwrap_or("error");
    let mut record = json!({"error": kind, "message": format!("{err:#}")});
    if let Some(hyperfed::Error::Round { round, .. }) = err.downcast_ref::<hyperfed::Error>() {
        record["round"] = json!(round);
    }
    record
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", json!({"error": "usage", "message": e.to_string().trim_end()}));
            return ExitCode::from(2);
        }
    };
    let outcome = match &cli.command {
        Command::Run {
            config,
            seed,
            out,
            variant,
        } => run(config, *seed, out, variant.as_deref()),
        Command::Eval {
            checkpoint,
            data,
            protos: p,
            activation,
            metric,
        } => eval(checkpoint, data, p.as_deref(), activation, metric),
        Command::Protos {
            classes,
            dim,
            slope,
            out,
            seed,
        } => protos(*classes, *dim, *slope, out, *seed),
        Command::Partition {
            data,
            clients,
            alpha,
            out,
            seed,
            train_fraction,
        } => partition(data, *clients, *alpha, out, *seed, *train_fraction),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_record(&e));
            ExitCode::FAILURE
        }
    }
}
