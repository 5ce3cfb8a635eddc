//! `tsr`: train, evaluate and inspect networks.
//!
//! Settings are resolved in three layers: built-in defaults, then the TOML
//! file given with `--config`, then command-line flags. A flag always wins.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use serde::Serialize;
use toml::{Table, Value};

use tsr::architectures::{Architecture, ProfileName, Size};
use tsr::data::{self, DatasetSource};
use tsr::export;
use tsr::regularizers::pearson_filter_correlation;
use tsr::training::{self, OptimizerKind, RunData, TrainConfig};
use tsr::weights::{WeightsFile, ENGINE_VERSION};

const DEFAULT_CONFIG: &str = include_str!("../default.toml");
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_ECHO_FILE: &str = "config.toml";

#[derive(Parser)]
#[command(
    name = "tsr",
    version,
    about = "Train CNNs with per-layer entropy and filter decorrelation penalties"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network and write weights, diagnostics and a run manifest.
    Train(TrainArgs),
    /// Print validation loss and accuracy of a weights file.
    Eval {
        weights: PathBuf,
        /// CIFAR binary file or directory, or a run config (its validation
        /// split is used).
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Print layer shapes, parameter counts and mean |filter correlation|.
    Inspect { weights: PathBuf },
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    profile: Option<String>,
    #[arg(long)]
    network: Option<String>,
    #[arg(long)]
    size: Option<String>,
    /// CIFAR-10 (`cifar-10-batches-bin`) or CIFAR-100 (`cifar-100-binary`)
    /// directory; replaces the configured dataset.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    export_dir: Option<PathBuf>,
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Suppress per-epoch progress lines.
    #[arg(long)]
    quiet: bool,
}

/// Exit 2 for bad input (configuration, flags, files); 1 for failures
/// while running.
enum Failure {
    Input(anyhow::Error),
    Runtime(anyhow::Error),
}

type CliResult<T> = Result<T, Failure>;

fn input<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Input(e.into())
}

fn runtime<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Runtime(e.into())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd_train(&args),
        Command::Eval { weights, dataset } => cmd_eval(&weights, &dataset),
        Command::Inspect { weights } => cmd_inspect(&weights),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn set(table: &mut Table, path: &[&str], value: Value) {
    let (last, parents) = path.split_last().expect("non-empty key path");
    let mut t = table;
    for key in parents {
        t = t
            .entry(key.to_string())
            .or_insert_with(|| Value::Table(Table::new()))
            .as_table_mut()
            .expect("configuration section is a table");
    }
    t.insert(last.to_string(), value);
}

fn cifar_source(dir: &Path) -> CliResult<Table> {
    let kind = if dir.join("data_batch_1.bin").is_file() {
        "cifar10"
    } else if dir.join("train.bin").is_file() {
        "cifar100"
    } else {
        return Err(input(anyhow!(
            "--dataset {}: no CIFAR-10 (data_batch_1.bin) or CIFAR-100 (train.bin) files found",
            dir.display()
        )));
    };
    let mut t = Table::new();
    t.insert("kind".into(), Value::String(kind.into()));
    t.insert("path".into(), Value::String(dir.display().to_string()));
    Ok(t)
}

fn resolve_config(args: &TrainArgs) -> CliResult<TrainConfig> {
    let mut table: Table = DEFAULT_CONFIG.parse().expect("built-in config parses");
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))
            .map_err(input)?;
        let file: Table = text
            .parse()
            .with_context(|| format!("parsing config {}", path.display()))
            .map_err(input)?;
        for (k, v) in file {
            table.insert(k, v);
        }
    }
    if let Some(v) = args.seed {
        set(&mut table, &["seed"], Value::Integer(v as i64));
    }
    if let Some(v) = args.epochs {
        set(&mut table, &["epochs"], Value::Integer(v as i64));
    }
    if let Some(v) = &args.profile {
        v.parse::<ProfileName>()
            .map_err(|e| input(anyhow!("--profile: {e}")))?;
        set(&mut table, &["profile"], Value::String(v.clone()));
    }
    if let Some(v) = &args.network {
        let a: Architecture = v.parse().map_err(|e| input(anyhow!("--network: {e}")))?;
        set(
            &mut table,
            &["network", "name"],
            Value::String(a.to_string()),
        );
    }
    if let Some(v) = &args.size {
        v.parse::<Size>()
            .map_err(|e| input(anyhow!("--size: {e}")))?;
        set(&mut table, &["network", "size"], Value::String(v.clone()));
    }
    if let Some(dir) = &args.dataset {
        table.insert("dataset".into(), Value::Table(cifar_source(dir)?));
    }
    if let Some(v) = &args.export_dir {
        set(
            &mut table,
            &["export_dir"],
            Value::String(v.display().to_string()),
        );
    }
    if let Some(v) = &args.optimizer {
        let kind = match v.as_str() {
            "sgd" => OptimizerKind::Sgd,
            "adam" => OptimizerKind::Adam,
            _ => return Err(input(anyhow!("--optimizer: unknown optimizer `{v}`"))),
        };
        let name = if kind == OptimizerKind::Sgd {
            "sgd"
        } else {
            "adam"
        };
        set(&mut table, &["optimizer"], Value::String(name.into()));
    }
    if let Some(v) = args.lr {
        set(&mut table, &["learning_rate"], Value::Float(v));
    }
    if let Some(v) = args.batch_size {
        set(&mut table, &["batch_size"], Value::Integer(v as i64));
    }
    let config: TrainConfig = table
        .try_into()
        .map_err(|e: toml::de::Error| input(anyhow!("invalid configuration: {e}")))?;
    config.validate().map_err(input)?;
    Ok(config)
}

#[derive(Serialize)]
struct FinalMetrics {
    epoch: usize,
    train_loss: f64,
    val_loss: f64,
    val_accuracy: f64,
    best_val_accuracy: f64,
    min_val_loss: f64,
    mean_entropy: Vec<(String, f64)>,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    config: &'a TrainConfig,
    engine_version: &'static str,
    dataset_checksum: String,
    wall_clock_seconds: f64,
    final_metrics: FinalMetrics,
    files: Vec<String>,
}

fn dataset_checksum(data: &RunData) -> String {
    [&data.train, &data.validation, &data.monitor]
        .iter()
        .map(|d| d.checksum())
        .collect::<Vec<_>>()
        .join(":")
}

fn cmd_train(args: &TrainArgs) -> CliResult<()> {
    let mut config = resolve_config(args)?;
    let dir = config
        .export_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("tsr-run"));
    config.export_dir = Some(dir.clone());
    let data = RunData::load(&config).map_err(input)?;
    let started = Instant::now();
    let stdout = io::stdout();
    let mut lock = stdout.lock();
    let progress: Option<&mut dyn Write> = if args.quiet { None } else { Some(&mut lock) };
    let objective = training::Regularized {
        profile: tsr::architectures::regularization_profile(config.profile),
        mode: config.decorrelation,
    };
    let outcome = training::train_with(&config, &data, &objective, progress)
        .context("training failed")
        .map_err(runtime)?;
    let elapsed = started.elapsed().as_secs_f64();

    fs::create_dir_all(&dir)
        .with_context(|| format!("creating {}", dir.display()))
        .map_err(runtime)?;
    let mut files = export::export_all(&outcome.history, &dir).map_err(runtime)?;
    let weights = dir.join(WEIGHTS_FILE);
    WeightsFile::from_network(&outcome.network)
        .save(&weights)
        .map_err(runtime)?;
    files.push(weights);
    let echo = dir.join(CONFIG_ECHO_FILE);
    fs::write(&echo, config.to_toml())
        .with_context(|| format!("writing {}", echo.display()))
        .map_err(runtime)?;
    files.push(echo);

    let h = &outcome.history;
    let last = h.last();
    let manifest = RunManifest {
        config: &config,
        engine_version: ENGINE_VERSION,
        dataset_checksum: dataset_checksum(&data),
        wall_clock_seconds: elapsed,
        final_metrics: FinalMetrics {
            epoch: last.epoch,
            train_loss: last.train_loss,
            val_loss: last.val_loss,
            val_accuracy: last.val_accuracy,
            best_val_accuracy: h.best_val_accuracy(),
            min_val_loss: h.min_val_loss(),
            mean_entropy: h
                .layers
                .iter()
                .cloned()
                .zip(last.mean_entropy.iter().copied())
                .collect(),
        },
        files: files
            .iter()
            .map(|p| p.strip_prefix(&dir).unwrap_or(p).display().to_string())
            .collect(),
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).map_err(runtime)?;
    fs::write(&path, json + "\n")
        .with_context(|| format!("writing {}", path.display()))
        .map_err(runtime)?;
    if !args.quiet {
        println!("wrote {}", dir.display());
    }
    Ok(())
}

fn load_weights(path: &Path) -> CliResult<WeightsFile> {
    WeightsFile::load(path)
        .with_context(|| format!("loading weights {}", path.display()))
        .map_err(input)
}

fn evaluation_set(path: &Path) -> CliResult<data::Dataset> {
    if path.is_dir() {
        let source = cifar_source(path)?;
        let source: DatasetSource = Value::Table(source).try_into().map_err(input)?;
        return Ok(source.load().map_err(input)?.validation);
    }
    if path.extension().is_some_and(|e| e == "toml") {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))
            .map_err(input)?;
        let config = TrainConfig::from_toml(&text).map_err(input)?;
        return Ok(RunData::load(&config).map_err(input)?.validation);
    }
    data::read_cifar_file(path)
        .with_context(|| format!("reading dataset {}", path.display()))
        .map_err(input)
}

fn cmd_eval(weights: &Path, dataset: &Path) -> CliResult<()> {
    let file = load_weights(weights)?;
    let data = evaluation_set(dataset)?;
    if data.image_shape() != file.spec.input || data.class_count() != file.spec.classes {
        return Err(input(anyhow!(
            "dataset has {:?} images in {} classes, network expects {:?} and {}",
            data.image_shape(),
            data.class_count(),
            file.spec.input,
            file.spec.classes
        )));
    }
    let mut network = file.into_network().map_err(input)?;
    let (loss, accuracy) = training::evaluate(&mut network, &data).map_err(runtime)?;
    println!("samples\t{}", data.len());
    println!("loss\t{loss}");
    println!("accuracy\t{accuracy}");
    Ok(())
}

fn shape_string(shape: &[usize]) -> String {
    shape
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join("x")
}

fn cmd_inspect(weights: &Path) -> CliResult<()> {
    let file = load_weights(weights)?;
    let spec = &file.spec;
    println!(
        "network\t{}\t{}\t{}\t{}",
        spec.name,
        spec.size,
        shape_string(&spec.input),
        spec.classes
    );
    println!("layer\tfilters\tparameters\tweight_shape\tmean_abs_correlation");
    for (name, w) in &file.tensors {
        let Some(layer) = name.strip_suffix(".weight") else {
            continue;
        };
        let bias = file.tensor(&format!("{layer}.bias")).map_or(0, |b| b.len());
        let corr = pearson_filter_correlation(w).map_err(runtime)?;
        println!(
            "{layer}\t{}\t{}\t{}\t{}",
            w.shape()[0],
            w.len() + bias,
            shape_string(w.shape()),
            corr.mean_abs_lower()
        );
    }
    println!("tensor\tshape");
    for (name, t) in &file.tensors {
        println!("{name}\t{}", shape_string(t.shape()));
    }
    Ok(())
}
