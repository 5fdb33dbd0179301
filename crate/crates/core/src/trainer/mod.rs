//! Deterministic desk-scale training: an MLP trained with SGD under a step
//! (or fixed) schedule, then extra epochs under a one-epoch cyclical cosine
//! schedule with a checkpoint at the end of each, followed by averaging.

pub mod config;
pub mod data;
pub mod model;
pub mod optim;

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{ConfigFile, ProtocolOptions, TrainConfig};
pub use data::{Dataset, DatasetSpec, Generator, Splits};
pub use model::{
    forward, loss_and_grad, normalized_preactivations, BatchStats, ForwardOutput, Gradients, Matrix, Mode,
    ModelSpec, Parameters,
};
pub use optim::{sgd_step, SgdConfig};

use crate::error::{Error, Result};
use crate::fsutil::{fmt_g17, write_atomic};
use crate::landscape::{perturbation_sharpness, LossOracle};
use crate::schedules::{cyclical_cosine_lr, step_lr};
use crate::swa_average::{average_window_in_memory, AveragingWindow, SkipPolicy};
use crate::tensor_store::{write_checkpoint, Checkpoint, DType};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Swa,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Pretrain => "pretrain",
            Phase::Swa => "swa",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalMetrics {
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    /// 1-indexed within its phase.
    pub epoch: u32,
    pub phase: Phase,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    /// Learning rate at the first iteration of the epoch.
    pub lr: f64,
}

pub fn metrics_to_csv(rows: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,phase,train_loss,val_loss,val_acc,lr\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.epoch,
            r.phase,
            fmt_g17(r.train_loss),
            fmt_g17(r.val_loss),
            fmt_g17(r.val_acc),
            fmt_g17(r.lr)
        );
    }
    out
}

#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub pretrain_checkpoints: Vec<PathBuf>,
    /// One per SWA-phase epoch, in order.
    pub swa_checkpoints: Vec<PathBuf>,
    pub metrics: Vec<EpochMetrics>,
    pub metrics_path: PathBuf,
    /// Model at the end of pretraining (the starting point of the SWA phase).
    pub pretrained: Checkpoint,
    pub final_params: Parameters,
}

/// Eval-mode loss and argmax accuracy over the whole dataset, ties broken
/// toward the lower class index.
pub fn evaluate(params: &Parameters, data: &Dataset) -> Result<EvalMetrics> {
    if data.is_empty() {
        return Err(Error::Dataset("cannot evaluate on an empty dataset".into()));
    }
    let out = forward(params, &data.x, Mode::Eval)?;
    let (loss, _) = model::cross_entropy(&out.logits, &data.labels)?;
    let correct = data
        .labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| argmax(out.logits.row(i)) == y)
        .count();
    Ok(EvalMetrics { loss, accuracy: correct as f64 / data.len() as f64 })
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Replaces every BN layer's running statistics with the exact mean and
/// biased variance of its inputs over `data`. Layers are visited in order, so
/// each layer sees inputs normalized with the already-recomputed statistics
/// of the layers before it. Accumulation uses shifted sums in f64.
pub fn recompute_bn_statistics(params: &Parameters, data: &Matrix) -> Result<Parameters> {
    if !params.spec.use_batchnorm {
        return Err(Error::Config("model has no batch-norm layers".into()));
    }
    if data.rows < 2 {
        return Err(Error::Dataset(format!("BN recompute needs at least 2 samples, got {}", data.rows)));
    }
    let mut out = params.clone();
    for l in 0..out.bn.len() {
        // input to layer l under the statistics recomputed so far
        let trace = model::forward_trace(&out, data, Mode::Eval)?;
        let z = out.layers[l].apply(&trace.inputs[l]);
        let (mean, var) = shifted_moments(&z);
        out.bn[l].running_mean = mean;
        out.bn[l].running_var = var;
    }
    Ok(out)
}

/// Mean and biased variance per column from sum and sum of squares of
/// `x - x[0]`, which keeps the single pass numerically stable.
fn shifted_moments(z: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let shift = z.row(0).to_vec();
    let mut sum = vec![0.0; z.cols];
    let mut sum_sq = vec![0.0; z.cols];
    for i in 0..z.rows {
        for (j, &v) in z.row(i).iter().enumerate() {
            let d = v - shift[j];
            sum[j] += d;
            sum_sq[j] += d * d;
        }
    }
    let n = z.rows as f64;
    let mean = sum.iter().zip(&shift).map(|(s, k)| k + s / n).collect();
    let var = sum
        .iter()
        .zip(&sum_sq)
        .map(|(s, ss)| (ss / n - (s / n) * (s / n)).max(0.0))
        .collect();
    (mean, var)
}

/// Scores checkpoints by eval-mode loss of `spec` on `data`.
pub struct DatasetLoss<'a> {
    pub spec: &'a ModelSpec,
    pub data: &'a Dataset,
}

impl LossOracle for DatasetLoss<'_> {
    fn loss(&self, ckpt: &Checkpoint) -> Result<f64> {
        let params = Parameters::from_checkpoint(self.spec, ckpt)?;
        Ok(evaluate(&params, self.data)?.loss)
    }
}

fn shuffled(n: usize, seed: u64, global_epoch: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // stream 0 is parameter init
    rng.set_stream(global_epoch + 1);
    idx.shuffle(&mut rng);
    idx
}

fn run_epoch(
    params: &mut Parameters,
    config: &TrainConfig,
    train: &Dataset,
    global_epoch: u64,
    lr_at: impl Fn(usize) -> Result<f64>,
) -> Result<f64> {
    let order = shuffled(train.len(), config.seed, global_epoch);
    let ipe = config.iters_per_epoch();
    let mut total = 0.0;
    for it in 0..ipe {
        let idx = &order[it * config.batch_size..(it + 1) * config.batch_size];
        let batch = train.subset(idx);
        let lr = lr_at(it)?;
        let mut step = || -> Result<f64> {
            let (loss, grads, stats) = loss_and_grad(params, &batch.x, &batch.labels)?;
            params.update_running_stats(&stats);
            sgd_step(params, &grads, lr, config.optimizer.momentum, config.optimizer.weight_decay);
            Ok(loss)
        };
        total += step().map_err(|e| e.context(format!("iteration {it}")))?;
    }
    Ok(total / ipe as f64)
}

fn epoch_checkpoint(params: &Parameters, epoch: u32, phase: Phase, seed: u64) -> Checkpoint {
    let mut ckpt = params.to_checkpoint();
    ckpt.set_metadata("epoch", epoch.to_string());
    ckpt.set_metadata("phase", phase.to_string());
    ckpt.set_metadata("seed", seed.to_string());
    ckpt
}

pub fn checkpoint_path(dir: &Path, phase: Phase, epoch: u32) -> PathBuf {
    dir.join(format!("{phase}_epoch_{epoch:03}.ckpt"))
}

/// Runs pretraining then the cyclical phase, writing a checkpoint at the end
/// of every SWA-phase epoch and `metrics.csv` into `checkpoint_dir`.
pub fn train(config: &TrainConfig) -> Result<RunArtifacts> {
    config.validate()?;
    let splits = config.dataset.generate(config.model.input_dim, config.model.output_dim)?;
    train_on(config, &splits)
}

pub fn train_on(config: &TrainConfig, splits: &Splits) -> Result<RunArtifacts> {
    config.validate()?;
    let dir = &config.checkpoint_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut params = Parameters::init(&config.model, config.seed)?;
    let mut metrics = Vec::new();
    let mut pretrain_checkpoints = Vec::new();
    let mut swa_checkpoints = Vec::new();
    let ipe = config.iters_per_epoch() as u64;

    let pretrain = &config.pretrain_schedule;
    for epoch in 1..=pretrain.total_epochs {
        let lr = step_lr(pretrain, epoch)?;
        let global = u64::from(epoch - 1);
        let train_loss = run_epoch(&mut params, config, &splits.train, global, |_| Ok(lr))
            .map_err(|e| e.context(format!("pretrain epoch {epoch}")))?;
        let val = evaluate(&params, &splits.val)?;
        metrics.push(EpochMetrics {
            epoch,
            phase: Phase::Pretrain,
            train_loss,
            val_loss: val.loss,
            val_acc: val.accuracy,
            lr,
        });
        if config.save_pretrain_checkpoints {
            let path = checkpoint_path(dir, Phase::Pretrain, epoch);
            write_checkpoint(&epoch_checkpoint(&params, epoch, Phase::Pretrain, config.seed), &path)?;
            pretrain_checkpoints.push(path);
        }
    }
    let pretrained = epoch_checkpoint(&params, pretrain.total_epochs, Phase::Pretrain, config.seed);

    let cycles = &config.swa_cycles;
    for epoch in 1..=config.swa_epochs {
        let start = u64::from(epoch - 1) * ipe;
        let global = u64::from(pretrain.total_epochs + epoch - 1);
        let train_loss = run_epoch(&mut params, config, &splits.train, global, |it| {
            cyclical_cosine_lr(cycles, start + it as u64)
        })
        .map_err(|e| e.context(format!("swa epoch {epoch}")))?;
        let val = evaluate(&params, &splits.val)?;
        metrics.push(EpochMetrics {
            epoch,
            phase: Phase::Swa,
            train_loss,
            val_loss: val.loss,
            val_acc: val.accuracy,
            lr: cyclical_cosine_lr(cycles, start)?,
        });
        let path = checkpoint_path(dir, Phase::Swa, epoch);
        write_checkpoint(&epoch_checkpoint(&params, epoch, Phase::Swa, config.seed), &path)?;
        swa_checkpoints.push(path);
    }

    let metrics_path = dir.join("metrics.csv");
    write_atomic(&metrics_path, metrics_to_csv(&metrics).as_bytes())?;
    Ok(RunArtifacts {
        pretrain_checkpoints,
        swa_checkpoints,
        metrics,
        metrics_path,
        pretrained,
        final_params: params,
    })
}

/// One evaluated model in a protocol report.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    /// `pretrained`, `epoch_<i>`, `swa_<m>-<n>`, or `swa_<m>-<n>+bn`.
    pub model: String,
    pub val_loss: f64,
    pub val_acc: f64,
    pub sharpness: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct ProtocolReport {
    pub seed: u64,
    pub swa_epochs: u32,
    pub rows: Vec<ReportRow>,
    /// `(label, path)` for every averaged model written.
    pub swa_models: Vec<(String, PathBuf)>,
    pub metrics_path: PathBuf,
    pub report_path: PathBuf,
}

impl ProtocolReport {
    pub fn row(&self, model: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.model == model)
    }

    /// The last per-epoch checkpoint of the SWA phase.
    pub fn final_epoch(&self) -> &ReportRow {
        self.row(&format!("epoch_{}", self.swa_epochs)).expect("every epoch is reported")
    }

    /// The full-window SWA model, with recomputed BN statistics when available.
    pub fn swa_full(&self) -> &ReportRow {
        let label = format!("swa_1-{}", self.swa_epochs);
        self.row(&format!("{label}+bn"))
            .or_else(|| self.row(&label))
            .expect("full window is always averaged")
    }

    /// Mean sharpness over the per-epoch checkpoints, if probed.
    pub fn mean_epoch_sharpness(&self) -> Option<f64> {
        let vals: Option<Vec<f64>> = (1..=self.swa_epochs)
            .map(|e| self.row(&format!("epoch_{e}")).and_then(|r| r.sharpness))
            .collect();
        vals.map(|v| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,val_loss,val_acc,sharpness\n");
        for r in &self.rows {
            let sharp = r.sharpness.map(fmt_g17).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{}", r.model, fmt_g17(r.val_loss), fmt_g17(r.val_acc), sharp);
        }
        out
    }
}

/// Averaging windows reported for an `n`-epoch SWA phase: `1-6` (when it
/// is a proper sub-window) and `1-n`.
pub fn protocol_windows(n: u32) -> Vec<(u32, u32)> {
    if n > 6 {
        vec![(1, 6), (1, n)]
    } else {
        vec![(1, n)]
    }
}

/// Train, average the SWA-phase checkpoints, optionally recompute BN
/// statistics, and evaluate every per-epoch and averaged model on the
/// validation split. Writes `report.csv` next to the checkpoints.
pub fn run_protocol(config: &TrainConfig) -> Result<ProtocolReport> {
    config.validate()?;
    let splits = config.dataset.generate(config.model.input_dim, config.model.output_dim)?;
    let run = train_on(config, &splits)?;
    let dir = &config.checkpoint_dir;
    let opts = &config.protocol;
    let oracle = DatasetLoss { spec: &config.model, data: &splits.val };
    let probe_skip = SkipPolicy::globs(["*running_*"])?;

    let score = |model: String, ckpt: &Checkpoint| -> Result<ReportRow> {
        let params = Parameters::from_checkpoint(&config.model, ckpt)?;
        let m = evaluate(&params, &splits.val)?;
        let sharpness = if opts.probe_dirs > 0 {
            let probe =
                perturbation_sharpness(ckpt, opts.probe_radius, opts.probe_dirs, &oracle, opts.probe_seed, &probe_skip)?;
            Some(probe.summary.mean_loss_increase)
        } else {
            None
        };
        Ok(ReportRow { model, val_loss: m.loss, val_acc: m.accuracy, sharpness })
    };

    let mut rows = vec![score("pretrained".into(), &run.pretrained)?];
    for (i, path) in run.swa_checkpoints.iter().enumerate() {
        let ckpt = crate::tensor_store::read_checkpoint(path)?;
        rows.push(score(format!("epoch_{}", i + 1), &ckpt)?);
    }

    let mut swa_models = Vec::new();
    for (m, n) in protocol_windows(config.swa_epochs) {
        let paths = run.swa_checkpoints[(m - 1) as usize..n as usize].to_vec();
        let window = AveragingWindow::new(m, n, paths)?;
        let label = format!("swa_{}", window.label());
        let avg = average_window_in_memory(&window, &SkipPolicy::none(), DType::F64)?;
        let path = dir.join(format!("{label}.ckpt"));
        write_checkpoint(&avg, &path)?;
        rows.push(score(label.clone(), &avg)?);
        swa_models.push((label.clone(), path));

        if config.model.use_batchnorm && opts.recompute_bn {
            let params = Parameters::from_checkpoint(&config.model, &avg)?;
            let recomputed = recompute_bn_statistics(&params, &splits.train.x)?;
            let mut ckpt = recomputed.to_checkpoint();
            for (k, v) in avg.metadata() {
                ckpt.set_metadata(k.clone(), v.clone());
            }
            ckpt.set_metadata("bn_recomputed", "true");
            let label = format!("{label}+bn");
            let path = dir.join(format!("{label}.ckpt"));
            write_checkpoint(&ckpt, &path)?;
            rows.push(score(label.clone(), &ckpt)?);
            swa_models.push((label, path));
        }
    }

    let report = ProtocolReport {
        seed: config.seed,
        swa_epochs: config.swa_epochs,
        rows,
        swa_models,
        metrics_path: run.metrics_path,
        report_path: dir.join("report.csv"),
    };
    write_atomic(&report.report_path, report.to_csv().as_bytes())?;
    Ok(report)
}

/// Runs the protocol once per seed, each in `<checkpoint_dir>/seed_<s>`.
pub fn run_protocol_seeds(config: &TrainConfig, seeds: &[u64]) -> Result<Vec<ProtocolReport>> {
    seeds
        .iter()
        .map(|&seed| {
            let mut cfg = config.with_seed(seed);
            cfg.checkpoint_dir = config.checkpoint_dir.join(format!("seed_{seed}"));
            run_protocol(&cfg).map_err(|e| e.context(format!("seed {seed}")))
        })
        .collect()
}

/// Per-seed SWA-versus-final-epoch deltas (SWA minus final epoch).
pub fn aggregate_to_csv(reports: &[ProtocolReport]) -> String {
    let mut out = String::from(
        "seed,final_val_loss,swa_val_loss,delta_val_loss,final_val_acc,swa_val_acc,delta_val_acc,epoch_mean_sharpness,swa_sharpness\n",
    );
    let opt = |v: Option<f64>| v.map(fmt_g17).unwrap_or_default();
    for r in reports {
        let (fin, swa) = (r.final_epoch(), r.swa_full());
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.seed,
            fmt_g17(fin.val_loss),
            fmt_g17(swa.val_loss),
            fmt_g17(swa.val_loss - fin.val_loss),
            fmt_g17(fin.val_acc),
            fmt_g17(swa.val_acc),
            fmt_g17(swa.val_acc - fin.val_acc),
            opt(r.mean_epoch_sharpness()),
            opt(swa.sharpness),
        );
    }
    out
}
