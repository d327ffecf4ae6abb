//! `noisykd` — teacher-student distillation with noisy logits, plus the
//! architecture cost analyzer.

use clap::{Args, Parser, Subcommand, ValueEnum};
use noisykd_core::analysis::{evaluate, loss_decomposition, run_sweep, sweep_csv, SweepGrid};
use noisykd_core::arch::{
    compression_ratio, count_mults, display_compression_ratio, display_megamults, parse_arch,
    render_arch, ArchError,
};
use noisykd_core::checkpoint::{read_checkpoint, write_checkpoint, CheckpointError};
use noisykd_core::config::{
    parse_config, ConfigError, DatasetConfig, DatasetName, ExperimentConfig,
};
use noisykd_core::data::DataError;
use noisykd_core::distill::{DistillConfig, NoiseConfig, NoiseSharing, NoiseTarget, SigmaSchedule};
use noisykd_core::net::Network;
use noisykd_core::optim::{OptimizerConfig, OptimizerKind};
use noisykd_core::pipeline::{
    load_dataset, prepare_logits, run_pipeline, DatasetBundle, PipelineError,
};
use noisykd_core::teacher::{
    export_logits, load_logits, merge_teachers, train_teacher, LogitCacheError, LogitRecordSet,
};
use noisykd_core::tensor::Tensor;
use noisykd_core::{LoopConfig, TrainError};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;

struct CliError {
    category: &'static str,
    message: String,
}

impl CliError {
    fn new(category: &'static str, message: impl Into<String>) -> Self {
        CliError {
            category,
            message: message.into(),
        }
    }
}

macro_rules! from_error {
    ($ty:ty, $category:expr) => {
        impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::new($category, e.to_string())
            }
        }
    };
}

from_error!(DataError, "data");
from_error!(LogitCacheError, "logit-cache");
from_error!(CheckpointError, "checkpoint");
from_error!(ConfigError, "config");
from_error!(PipelineError, "pipeline");
from_error!(noisykd_core::net::EngineError, "engine");
from_error!(std::io::Error, "io");

impl From<ArchError> for CliError {
    fn from(e: ArchError) -> Self {
        let category = match e {
            ArchError::Syntax { .. } => "arch-syntax",
            ArchError::Semantic { .. } => "arch-semantic",
            ArchError::Shape(_) => "arch-shape",
            ArchError::ZeroDenominator => "arch-ratio",
        };
        CliError::new(category, e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let category = match e {
            TrainError::Divergence { .. } => "divergence",
            _ => "train",
        };
        CliError::new(category, e.to_string())
    }
}

type CliResult = Result<(), CliError>;

#[derive(Parser)]
#[command(
    name = "noisykd",
    version,
    about = "Knowledge distillation with noisy teachers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OutputFormat {
    Plain,
    Csv,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitName {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TargetName {
    Teacher,
    Student,
    None,
}

impl From<TargetName> for NoiseTarget {
    fn from(t: TargetName) -> Self {
        match t {
            TargetName::Teacher => NoiseTarget::Teacher,
            TargetName::Student => NoiseTarget::Student,
            TargetName::None => NoiseTarget::None,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SharingName {
    Sample,
    Batch,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OptimizerName {
    Adam,
    Sgd,
}

/// Dataset selection shared by the training commands. Directories default
/// to `$NOISYKD_DATA_DIR/<dataset>`.
#[derive(Args)]
struct DataArgs {
    /// Dataset name
    #[arg(long, value_parser = ["mnist", "cifar10"])]
    dataset: String,
    /// Directory with the four raw MNIST IDX files
    #[arg(long)]
    mnist_dir: Option<PathBuf>,
    /// Directory with the CIFAR-10 binary batches
    #[arg(long)]
    cifar_dir: Option<PathBuf>,
    /// Samples held out of the training set for validation
    #[arg(long, default_value_t = 10_000)]
    val_count: usize,
    /// Seed of the deterministic validation split
    #[arg(long, default_value_t = 1)]
    split_seed: u64,
}

impl DataArgs {
    fn load(&self) -> Result<DatasetBundle, CliError> {
        let name = match self.dataset.as_str() {
            "mnist" => DatasetName::Mnist,
            _ => DatasetName::Cifar10,
        };
        let cfg = DatasetConfig {
            name,
            mnist_dir: self.mnist_dir.clone(),
            cifar_dir: self.cifar_dir.clone(),
            validation_count: self.val_count,
            split_seed: self.split_seed,
        };
        Ok(load_dataset(&cfg)?)
    }
}

/// Optimization settings shared by `train-teacher` and `distill`.
#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value_t = 15)]
    epochs: usize,
    /// Epochs without validation improvement before stopping
    #[arg(long, default_value_t = 5)]
    patience: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, value_enum, default_value_t = OptimizerName::Adam)]
    optimizer: OptimizerName,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.0)]
    weight_decay: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

impl TrainArgs {
    fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            kind: match self.optimizer {
                OptimizerName::Adam => OptimizerKind::Adam,
                OptimizerName::Sgd => OptimizerKind::Sgd,
            },
            learning_rate: self.lr,
            weight_decay: self.weight_decay,
            ..OptimizerConfig::default()
        }
    }

    fn loop_config(&self) -> LoopConfig {
        LoopConfig {
            batch_size: self.batch_size,
            epochs: self.epochs,
            patience: self.patience,
            seed: self.seed,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Per-layer shapes, parameter and multiplication counts for an
    /// architecture string, with optional compression ratio vs a teacher
    Analyze {
        /// Architecture in shorthand notation, e.g. "FC800-FC800-FC10"
        arch: String,
        /// Input size as HxWxC, e.g. 32x32x3
        #[arg(long)]
        input: String,
        /// Teacher architecture for the compression ratio
        #[arg(long)]
        teacher: Option<String>,
        #[arg(long, value_enum, default_value_t = OutputFormat::Plain)]
        format: OutputFormat,
    },
    /// Train a teacher network on hard labels
    TrainTeacher {
        #[arg(long)]
        arch: String,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// Checkpoint output path
        #[arg(long)]
        out: PathBuf,
        /// Metrics CSV output path
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Run a trained teacher over a split and cache its logits
    ExportLogits {
        /// Teacher checkpoint
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum, default_value_t = SplitName::Train)]
        split: SplitName,
        /// Logit cache output path
        #[arg(long)]
        out: PathBuf,
        /// Free-form teacher tag stored in the cache (max 32 bytes)
        #[arg(long, default_value = "")]
        tag: String,
    },
    /// Train a student on cached teacher logits
    Distill {
        /// Student architecture
        #[arg(long)]
        arch: String,
        /// Teacher logit cache
        #[arg(long)]
        logits: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Noise standard deviation
        #[arg(long, default_value_t = 0.5)]
        sigma: f64,
        /// Per-sample perturbation probability
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        #[arg(long, value_enum, default_value_t = TargetName::Teacher)]
        target: TargetName,
        #[arg(long, value_enum, default_value_t = SharingName::Sample)]
        sharing: SharingName,
        /// Draw sigma uniformly from "lo,hi" each mini-batch
        #[arg(long)]
        sigma_random: Option<String>,
        #[command(flatten)]
        train: TrainArgs,
        /// Checkpoint output path
        #[arg(long)]
        out: PathBuf,
        /// Metrics CSV output path
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Error rate of a checkpoint on a dataset split
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum, default_value_t = SplitName::Test)]
        split: SplitName,
    },
    /// Average two logit caches sample-by-sample (two-teacher merging)
    MergeLogits {
        #[arg(long)]
        first: PathBuf,
        #[arg(long)]
        second: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a sigma/alpha/dropout/target grid from a config file
    Sweep {
        /// Experiment config with a [grid] section
        #[arg(long)]
        grid: PathBuf,
        /// Sweep table output path
        #[arg(long)]
        out: PathBuf,
    },
    /// Check the noise-regularizer identity on random instances
    VerifyDecomposition {
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Execute a full experiment pipeline from a config file
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed list with a single seed
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn parse_input_shape(text: &str) -> Result<(usize, usize, usize), CliError> {
    let parts: Vec<&str> = text.split('x').collect();
    if parts.len() != 3 {
        return Err(CliError::new(
            "usage",
            format!("--input expects HxWxC, found '{}'", text),
        ));
    }
    let dims: Result<Vec<usize>, _> = parts.iter().map(|p| p.parse::<usize>()).collect();
    match dims {
        Ok(d) if d.iter().all(|&v| v > 0) => Ok((d[0], d[1], d[2])),
        _ => Err(CliError::new(
            "usage",
            format!("--input expects positive integers HxWxC, found '{}'", text),
        )),
    }
}

fn parse_sigma_random(text: &str) -> Result<SigmaSchedule, CliError> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    if parts.len() != 2 {
        return Err(CliError::new(
            "usage",
            format!("--sigma-random expects 'lo,hi', found '{}'", text),
        ));
    }
    let lo: f64 = parts[0]
        .parse()
        .map_err(|_| CliError::new("usage", "--sigma-random bounds must be numbers"))?;
    let hi: f64 = parts[1]
        .parse()
        .map_err(|_| CliError::new("usage", "--sigma-random bounds must be numbers"))?;
    if !(lo >= 0.0 && hi >= lo) {
        return Err(CliError::new(
            "usage",
            "--sigma-random range must satisfy 0 <= lo <= hi",
        ));
    }
    Ok(SigmaSchedule::UniformRandom { lo, hi })
}

fn pick_split(
    bundle: &DatasetBundle,
    split: SplitName,
) -> Result<&noisykd_core::data::LabeledSet, CliError> {
    match split {
        SplitName::Train => Ok(&bundle.train),
        SplitName::Test => Ok(&bundle.test),
        SplitName::Val => bundle
            .val
            .as_ref()
            .ok_or_else(|| CliError::new("usage", "no validation split (val-count is 0)")),
    }
}

fn layer_token(layer: &noisykd_core::arch::LayerSpec) -> String {
    render_arch(&noisykd_core::arch::ArchSpec::new(vec![layer.clone()]))
}

fn cmd_analyze(arch: &str, input: &str, teacher: Option<&str>, format: OutputFormat) -> CliResult {
    let input = parse_input_shape(input)?;
    let spec = parse_arch(arch)?;
    let report = count_mults(&spec, input)?;
    match format {
        OutputFormat::Plain => {
            println!(
                "{:<24} {:>12} {:>14} {:>14}",
                "layer", "output", "params", "mults"
            );
            for (i, layer) in spec.layers.iter().enumerate() {
                println!(
                    "{:<24} {:>12} {:>14} {:>14}",
                    layer_token(layer),
                    report.shape_trace[i].to_string(),
                    report.per_layer_params[i],
                    report.per_layer_mults[i]
                );
            }
            println!(
                "{:<24} {:>12} {:>14} {:>14}",
                "total", "", report.total_params, report.total_mults
            );
            println!(
                "total multiplications: {} ({} million at display precision)",
                report.total_mults,
                display_megamults(report.total_mults)
            );
        }
        OutputFormat::Csv => {
            println!("layer,output_shape,params,mults");
            for (i, layer) in spec.layers.iter().enumerate() {
                println!(
                    "{},{},{},{}",
                    layer_token(layer),
                    report.shape_trace[i],
                    report.per_layer_params[i],
                    report.per_layer_mults[i]
                );
            }
            println!("total,,{},{}", report.total_params, report.total_mults);
        }
    }
    if let Some(teacher_arch) = teacher {
        let teacher_spec = parse_arch(teacher_arch)?;
        let teacher_report = count_mults(&teacher_spec, input)?;
        let exact = compression_ratio(teacher_report.total_mults, report.total_mults)?;
        let rounded = display_compression_ratio(
            display_megamults(teacher_report.total_mults),
            display_megamults(report.total_mults),
        )?;
        match format {
            OutputFormat::Plain => {
                println!("teacher multiplications: {}", teacher_report.total_mults);
                println!("compression ratio (exact): {:.4}", exact);
                println!("compression ratio (display megamults): {:.2}", rounded);
            }
            OutputFormat::Csv => {
                println!("# teacher_mults={}", teacher_report.total_mults);
                println!("# compression_exact={:.6}", exact);
                println!("# compression_display={:.2}", rounded);
            }
        }
    }
    Ok(())
}

fn cmd_train_teacher(
    arch: &str,
    data: &DataArgs,
    train: &TrainArgs,
    out: &PathBuf,
    metrics_path: Option<&PathBuf>,
) -> CliResult {
    let bundle = data.load()?;
    let (h, w, c) = bundle.train.sample_shape();
    let spec = parse_arch(arch)?;
    let net = Network::new(spec.clone(), (h, w, c))?;
    let (params, mut metrics) = train_teacher(
        &net,
        &bundle.train,
        bundle.val.as_ref(),
        train.optimizer_config(),
        &train.loop_config(),
    )?;
    let test_error = evaluate(&net, &params, &bundle.test)?;
    metrics.test_error = Some(test_error);
    write_checkpoint(out, &spec, &params)?;
    if let Some(p) = metrics_path {
        std::fs::write(p, metrics.to_csv_string())?;
    }
    println!("checkpoint: {}", out.display());
    println!("epochs_run: {}", metrics.epoch_train_loss.len());
    println!("test_error: {}", test_error);
    Ok(())
}

fn cmd_export_logits(
    ckpt: &PathBuf,
    data: &DataArgs,
    split: SplitName,
    out: &PathBuf,
    tag: &str,
) -> CliResult {
    let bundle = data.load()?;
    let set = pick_split(&bundle, split)?;
    let (h, w, c) = set.sample_shape();
    let (spec, params) = read_checkpoint(ckpt)?;
    let net = Network::new(spec, (h, w, c))?;
    let records = export_logits(&net, &params, set, LogitRecordSet::tag_from_str(tag))?;
    records.write(out)?;
    println!("records: {}", records.records.len());
    println!("classes: {}", records.n_classes);
    println!("cache: {}", out.display());
    Ok(())
}

fn cmd_distill(
    arch: &str,
    logits: &PathBuf,
    data: &DataArgs,
    noise: NoiseConfig,
    train: &TrainArgs,
    out: &PathBuf,
    metrics_path: Option<&PathBuf>,
) -> CliResult {
    let bundle = data.load()?;
    let logit_set = load_logits(logits)?;
    let cfg = DistillConfig {
        student: parse_arch(arch)?,
        noise,
        optimizer: train.optimizer_config(),
        train: train.loop_config(),
        fingerprint: String::new(),
    };
    let (params, metrics) = noisykd_core::distill::distill(
        &cfg,
        &logit_set,
        &bundle.train,
        bundle.val.as_ref(),
        Some(&bundle.test),
    )?;
    write_checkpoint(out, &cfg.student, &params)?;
    if let Some(p) = metrics_path {
        std::fs::write(p, metrics.to_csv_string())?;
    }
    println!("checkpoint: {}", out.display());
    println!("epochs_run: {}", metrics.epoch_train_loss.len());
    println!(
        "test_error: {}",
        metrics.test_error.expect("test split always evaluated")
    );
    Ok(())
}

fn cmd_eval(ckpt: &PathBuf, data: &DataArgs, split: SplitName) -> CliResult {
    let bundle = data.load()?;
    let set = pick_split(&bundle, split)?;
    let (h, w, c) = set.sample_shape();
    let (spec, params) = read_checkpoint(ckpt)?;
    let net = Network::new(spec, (h, w, c))?;
    let err = evaluate(&net, &params, set)?;
    println!("samples: {}", set.len());
    println!("test_error: {}", err);
    Ok(())
}

fn cmd_sweep(grid_path: &PathBuf, out: &PathBuf) -> CliResult {
    let cfg = parse_config(grid_path)?;
    for w in &cfg.warnings {
        eprintln!("warning: {}", w);
    }
    let prepared = prepare_logits(&cfg)?;
    for s in &prepared.stages {
        println!("[{}] {}", s.name, if s.reused { "reused" } else { "built" });
    }
    let base = DistillConfig {
        student: parse_arch(&cfg.student_arch)?,
        noise: cfg.noise,
        optimizer: cfg.distill_train.optimizer.clone(),
        train: LoopConfig {
            batch_size: cfg.batch_size,
            epochs: cfg.distill_train.epochs,
            patience: cfg.distill_train.patience,
            seed: cfg.seeds[0],
        },
        fingerprint: prepared.fingerprint.clone(),
    };
    let grid = SweepGrid {
        sigmas: if cfg.grid.sigmas.is_empty() {
            vec![cfg.noise.sigma]
        } else {
            cfg.grid.sigmas.clone()
        },
        alphas: if cfg.grid.alphas.is_empty() {
            vec![cfg.noise.alpha]
        } else {
            cfg.grid.alphas.clone()
        },
        dropouts: if cfg.grid.dropouts.is_empty() {
            vec![0.0]
        } else {
            cfg.grid.dropouts.clone()
        },
        targets: if cfg.grid.targets.is_empty() {
            vec![cfg.noise.target]
        } else {
            cfg.grid.targets.clone()
        },
        seeds: cfg.seeds.clone(),
        base,
    };
    let rows = run_sweep(
        &grid,
        &prepared.logit_set,
        &prepared.bundle.train,
        prepared.bundle.val.as_ref(),
        &prepared.bundle.test,
    )?;
    let csv = sweep_csv(&rows);
    std::fs::write(out, &csv)?;
    println!("rows: {}", rows.len());
    println!("table: {}", out.display());
    Ok(())
}

fn cmd_verify_decomposition(trials: usize, seed: u64) -> CliResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_scaled_residual = 0.0f64;
    for _ in 0..trials {
        let rows = rng.gen_range(1..8);
        let classes = rng.gen_range(2..11);
        let batch = rng.gen_range(1..16);
        let draw = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.gen_range(-4.0..4.0)).collect()
        };
        let g = Tensor::from_vec(&[rows, classes], draw(&mut rng, rows * classes))
            .expect("sized by construction");
        let z = Tensor::from_vec(&[rows, classes], draw(&mut rng, rows * classes))
            .expect("sized by construction");
        let sigma = rng.gen_range(0.05..1.5);
        let mask: Vec<bool> = (0..rows).map(|_| rng.gen::<bool>()).collect();
        let noise: Vec<Vec<f64>> = mask
            .iter()
            .map(|&sel| {
                if sel {
                    (0..classes)
                        .map(|_| sigma * rng.gen_range(-3.0..3.0))
                        .collect()
                } else {
                    Vec::new()
                }
            })
            .collect();
        let b = loss_decomposition(&g, &z, &noise, &mask, batch)?;
        let scaled = (b.loss_noisy - b.loss_clean - b.reg_term).abs() / (1.0 + b.loss_noisy.abs());
        max_scaled_residual = max_scaled_residual.max(scaled);
    }
    println!("trials: {}", trials);
    println!("max_scaled_residual: {:e}", max_scaled_residual);
    println!("tolerance: 1e-9");
    if max_scaled_residual <= 1e-9 {
        println!("decomposition identity: PASS");
        Ok(())
    } else {
        Err(CliError::new(
            "decomposition",
            format!(
                "identity violated: max scaled residual {:e} exceeds 1e-9",
                max_scaled_residual
            ),
        ))
    }
}

fn cmd_run(config: &PathBuf, seed: Option<u64>) -> CliResult {
    let mut cfg: ExperimentConfig = parse_config(config)?;
    for w in &cfg.warnings {
        eprintln!("warning: {}", w);
    }
    if let Some(s) = seed {
        cfg.seeds = vec![s];
    }
    let outcome = run_pipeline(&cfg)?;
    for s in &outcome.stages {
        println!("[{}] {}", s.name, if s.reused { "reused" } else { "built" });
    }
    println!("fingerprint: {}", outcome.fingerprint);
    println!("artifacts: {}", outcome.dir.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn dispatch(cli: Cli) -> CliResult {
    match &cli.command {
        Command::Analyze {
            arch,
            input,
            teacher,
            format,
        } => cmd_analyze(arch, input, teacher.as_deref(), *format),
        Command::TrainTeacher {
            arch,
            data,
            train,
            out,
            metrics,
        } => cmd_train_teacher(arch, data, train, out, metrics.as_ref()),
        Command::ExportLogits {
            ckpt,
            data,
            split,
            out,
            tag,
        } => cmd_export_logits(ckpt, data, *split, out, tag),
        Command::Distill {
            arch,
            logits,
            data,
            sigma,
            alpha,
            target,
            sharing,
            sigma_random,
            train,
            out,
            metrics,
        } => {
            let schedule = match sigma_random {
                Some(text) => parse_sigma_random(text)?,
                None => SigmaSchedule::Fixed,
            };
            let noise = NoiseConfig {
                sigma: *sigma,
                alpha: *alpha,
                target: (*target).into(),
                sharing: match sharing {
                    SharingName::Sample => NoiseSharing::PerSample,
                    SharingName::Batch => NoiseSharing::PerBatch,
                },
                sigma_schedule: schedule,
            };
            cmd_distill(arch, logits, data, noise, train, out, metrics.as_ref())
        }
        Command::Eval { ckpt, data, split } => cmd_eval(ckpt, data, *split),
        Command::MergeLogits { first, second, out } => {
            let a = load_logits(first)?;
            let b = load_logits(second)?;
            let merged = merge_teachers(&a, &b)?;
            merged.write(out)?;
            println!("records: {}", merged.records.len());
            println!("cache: {}", out.display());
            Ok(())
        }
        Command::Sweep { grid, out } => cmd_sweep(grid, out),
        Command::VerifyDecomposition { trials, seed } => cmd_verify_decomposition(*trials, *seed),
        Command::Run { config, seed } => cmd_run(config, *seed),
    }
}

fn main() {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error[{}]: {}", e.category, e.message);
            std::process::exit(1);
        }
    }
}
