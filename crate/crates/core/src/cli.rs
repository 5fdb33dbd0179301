//! `swa` command-line interface.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or numeric error. Every
//! output file is written to a temp file and renamed into place.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::Error;
use crate::fsutil::{fmt_g17, write_atomic};
use crate::landscape::{interpolate_loss, perturbation_sharpness};
use crate::schedules::{emit_schedule, schedule_to_csv, CosineCycleSpec, ScheduleSpec, StepScheduleSpec};
use crate::swa_average::{average_window, AveragingWindow, SkipPolicy};
use crate::tensor_store::{read_checkpoint, write_checkpoint, DType};
use crate::trainer::{
    aggregate_to_csv, evaluate, recompute_bn_statistics, run_protocol, run_protocol_seeds, train, DatasetLoss,
    Parameters, TrainConfig,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "swa", version, about = "Cyclical-LR training, checkpoint averaging, and landscape probes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain, then train the cyclical phase writing one checkpoint per epoch.
    Train(TrainArgs),
    /// Train, average the cyclical-phase checkpoints, and evaluate everything.
    RunProtocol(ProtocolArgs),
    /// Average checkpoints elementwise.
    Average(AverageArgs),
    /// Emit a learning-rate schedule as CSV.
    Schedule(ScheduleArgs),
    /// Interpolation or perturbation-sharpness probe.
    Probe(ProbeArgs),
    /// Recompute batch-norm statistics with one pass over the training split.
    RecomputeBn(RecomputeArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the config's checkpoint_dir.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProtocolArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Run seeds `seed..seed+N`, one subdirectory each, plus aggregate.csv.
    #[arg(long)]
    pub seeds: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AverageArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub output: PathBuf,
    /// Glob of tensor names carried from the first input instead of averaged.
    #[arg(long)]
    pub skip: Vec<String>,
    #[arg(long, value_enum, default_value_t = DtypeArg::F64)]
    pub out_dtype: DtypeArg,
    /// Epoch number of the first input, for the window label.
    #[arg(long, default_value_t = 1)]
    pub first_epoch: u32,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum DtypeArg {
    F32,
    F64,
}

impl From<DtypeArg> for DType {
    fn from(d: DtypeArg) -> Self {
        match d {
            DtypeArg::F32 => DType::F32,
            DtypeArg::F64 => DType::F64,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ScheduleKind {
    Cosine,
    Step,
}

#[derive(Debug, Args)]
pub struct ScheduleArgs {
    #[arg(long, value_enum)]
    pub kind: ScheduleKind,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub lr_max: Option<f64>,
    #[arg(long)]
    pub lr_min: Option<f64>,
    #[arg(long)]
    pub cycle_iters: Option<u32>,
    #[arg(long)]
    pub cycles: Option<u32>,
    #[arg(long)]
    pub base_lr: Option<f64>,
    /// Comma-separated 1-indexed epochs, e.g. `9,12`.
    #[arg(long, value_delimiter = ',')]
    pub decay_epochs: Vec<u32>,
    #[arg(long, default_value_t = 0.1)]
    pub decay_factor: f64,
    #[arg(long)]
    pub epochs: Option<u32>,
    #[arg(long)]
    pub iters_per_epoch: Option<u32>,
    /// Defaults to the schedule's full length.
    #[arg(long)]
    pub total_iters: Option<u64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ProbeKindArg {
    Interpolate,
    Sharpness,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long, value_enum)]
    pub kind: ProbeKindArg,
    /// Model and dataset definition; the probe scores on the validation split.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub a: PathBuf,
    /// Second endpoint (interpolation only).
    #[arg(long)]
    pub b: Option<PathBuf>,
    /// Evenly spaced α values in [0, 1].
    #[arg(long, default_value_t = 11)]
    pub points: usize,
    #[arg(long, default_value_t = 0.5)]
    pub radius: f64,
    #[arg(long, default_value_t = 32)]
    pub dirs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "*running_*")]
    pub skip: Vec<String>,
    /// CSV `coord,loss`.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON summary block.
    #[arg(long)]
    pub summary: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RecomputeArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Val)]
    pub split: Split,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Data(e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `args` (including the program name), runs the command, prints
/// its summary or error, and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(summary) => {
            println!("{summary}");
            EXIT_OK
        }
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(CliError::Data(e)) => {
            eprintln!("error: {e}");
            EXIT_DATA
        }
    }
}

/// Runs a parsed command and returns its one-line summary.
pub fn dispatch(cli: &Cli) -> CliResult<String> {
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::RunProtocol(a) => cmd_protocol(a),
        Command::Average(a) => cmd_average(a),
        Command::Schedule(a) => cmd_schedule(a),
        Command::Probe(a) => cmd_probe(a),
        Command::RecomputeBn(a) => cmd_recompute(a),
        Command::Eval(a) => cmd_eval(a),
    }
}

fn load_config(path: &Path, seed: Option<u64>, out_dir: Option<&PathBuf>) -> CliResult<TrainConfig> {
    let mut cfg = TrainConfig::from_file(path)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if let Some(dir) = out_dir {
        cfg.checkpoint_dir = dir.clone();
    }
    Ok(cfg)
}

fn cmd_train(a: &TrainArgs) -> CliResult<String> {
    let cfg = load_config(&a.config, a.seed, a.out_dir.as_ref())?;
    let run = train(&cfg)?;
    let last = run.metrics.last().expect("at least one epoch");
    Ok(format!(
        "trained seed {}: {} swa checkpoints in {}, final val_loss {} val_acc {}",
        cfg.seed,
        run.swa_checkpoints.len(),
        cfg.checkpoint_dir.display(),
        fmt_g17(last.val_loss),
        fmt_g17(last.val_acc)
    ))
}

fn cmd_protocol(a: &ProtocolArgs) -> CliResult<String> {
    let cfg = load_config(&a.config, a.seed, a.out_dir.as_ref())?;
    match a.seeds {
        None => {
            let r = run_protocol(&cfg)?;
            let (fin, swa) = (r.final_epoch(), r.swa_full());
            Ok(format!(
                "seed {}: final epoch val_loss {} val_acc {}; {} val_loss {} val_acc {}; report {}",
                r.seed,
                fmt_g17(fin.val_loss),
                fmt_g17(fin.val_acc),
                swa.model,
                fmt_g17(swa.val_loss),
                fmt_g17(swa.val_acc),
                r.report_path.display()
            ))
        }
        Some(0) => Err(CliError::Usage("--seeds must be at least 1".into())),
        Some(n) => {
            let seeds: Vec<u64> = (0..n).map(|i| cfg.seed + i).collect();
            let reports = run_protocol_seeds(&cfg, &seeds)?;
            let path = cfg.checkpoint_dir.join("aggregate.csv");
            write_atomic(&path, aggregate_to_csv(&reports).as_bytes())?;
            let better = reports
                .iter()
                .filter(|r| r.swa_full().val_loss <= r.final_epoch().val_loss)
                .count();
            Ok(format!(
                "{n} seeds: SWA val_loss <= final epoch in {better}/{n}; aggregate {}",
                path.display()
            ))
        }
    }
}

fn cmd_average(a: &AverageArgs) -> CliResult<String> {
    if a.first_epoch == 0 {
        return Err(CliError::Usage("--first-epoch is 1-indexed".into()));
    }
    let skip = SkipPolicy::globs(&a.skip).map_err(|e| CliError::Usage(e.to_string()))?;
    let last = a.first_epoch + a.inputs.len() as u32 - 1;
    let window = AveragingWindow::new(a.first_epoch, last, a.inputs.clone())?;
    average_window(&window, &skip, a.out_dtype.into(), &a.output)?;
    Ok(format!(
        "averaged {} checkpoints (window {}) into {}",
        a.inputs.len(),
        window.label(),
        a.output.display()
    ))
}

fn require<T: Copy>(v: Option<T>, flag: &str, kind: &str) -> CliResult<T> {
    v.ok_or_else(|| CliError::Usage(format!("--kind {kind} requires {flag}")))
}

fn cmd_schedule(a: &ScheduleArgs) -> CliResult<String> {
    let spec = match a.kind {
        ScheduleKind::Cosine => ScheduleSpec::Cosine(CosineCycleSpec {
            lr_max: require(a.lr_max, "--lr-max", "cosine")?,
            lr_min: require(a.lr_min, "--lr-min", "cosine")?,
            cycle_len_iters: require(a.cycle_iters, "--cycle-iters", "cosine")?,
            num_cycles: require(a.cycles, "--cycles", "cosine")?,
        }),
        ScheduleKind::Step => ScheduleSpec::Step(StepScheduleSpec {
            base_lr: require(a.base_lr, "--base-lr", "step")?,
            decay_epochs: a.decay_epochs.clone(),
            decay_factor: a.decay_factor,
            total_epochs: require(a.epochs, "--epochs", "step")?,
            iters_per_epoch: require(a.iters_per_epoch, "--iters-per-epoch", "step")?,
        }),
    };
    let total = a.total_iters.unwrap_or_else(|| spec.total_iters());
    let records = emit_schedule(&spec, total)?;
    write_atomic(&a.out, schedule_to_csv(&records).as_bytes())?;
    Ok(format!("wrote {} schedule rows to {}", records.len(), a.out.display()))
}

fn cmd_probe(a: &ProbeArgs) -> CliResult<String> {
    let cfg = TrainConfig::from_file(&a.config)?;
    let splits = cfg.dataset.generate(cfg.model.input_dim, cfg.model.output_dim)?;
    let oracle = DatasetLoss { spec: &cfg.model, data: &splits.val };
    let skip = SkipPolicy::globs(&a.skip).map_err(|e| CliError::Usage(e.to_string()))?;
    let w_a = read_checkpoint(&a.a)?;
    let result = match a.kind {
        ProbeKindArg::Interpolate => {
            let b = a
                .b
                .as_ref()
                .ok_or_else(|| CliError::Usage("--kind interpolate requires --b".into()))?;
            if a.points < 2 {
                return Err(CliError::Usage("--points must be at least 2".into()));
            }
            let w_b = read_checkpoint(b)?;
            let alphas: Vec<f64> = (0..a.points).map(|i| i as f64 / (a.points - 1) as f64).collect();
            interpolate_loss(&w_a, &w_b, &alphas, &oracle, &skip)?
        }
        ProbeKindArg::Sharpness => perturbation_sharpness(&w_a, a.radius, a.dirs, &oracle, a.seed, &skip)?,
    };
    write_atomic(&a.out, result.to_csv().as_bytes())?;
    if let Some(path) = &a.summary {
        write_atomic(path, result.summary_json().as_bytes())?;
    }
    Ok(format!(
        "{} points; mean loss increase {}; wrote {}",
        result.grid.len(),
        fmt_g17(result.summary.mean_loss_increase),
        a.out.display()
    ))
}

fn cmd_recompute(a: &RecomputeArgs) -> CliResult<String> {
    let cfg = TrainConfig::from_file(&a.config)?;
    let splits = cfg.dataset.generate(cfg.model.input_dim, cfg.model.output_dim)?;
    let ckpt = read_checkpoint(&a.input)?;
    let params = Parameters::from_checkpoint(&cfg.model, &ckpt)?;
    let updated = recompute_bn_statistics(&params, &splits.train.x)?;
    let mut out = updated.to_checkpoint();
    for (k, v) in ckpt.metadata() {
        out.set_metadata(k.clone(), v.clone());
    }
    out.set_metadata("bn_recomputed", "true");
    write_checkpoint(&out, &a.output)?;
    Ok(format!(
        "recomputed BN statistics over {} samples into {}",
        splits.train.len(),
        a.output.display()
    ))
}

fn cmd_eval(a: &EvalArgs) -> CliResult<String> {
    let cfg = TrainConfig::from_file(&a.config)?;
    let splits = cfg.dataset.generate(cfg.model.input_dim, cfg.model.output_dim)?;
    let params = Parameters::from_checkpoint(&cfg.model, &read_checkpoint(&a.input)?)?;
    let data = match a.split {
        Split::Train => &splits.train,
        Split::Val => &splits.val,
    };
    let m = evaluate(&params, data)?;
    Ok(format!("loss {} accuracy {}", fmt_g17(m.loss), fmt_g17(m.accuracy)))
}
