//! Learning-rate policies: per-epoch step decay and per-iteration cyclical
//! cosine annealing.

use std::f64::consts::PI;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::fmt_g17;

/// Step decay: `base_lr * decay_factor^k`, where `k` counts the decay epochs
/// reached so far. Epochs are 1-indexed and a decay applies from its named
/// epoch onward. An empty `decay_epochs` gives a fixed learning rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepScheduleSpec {
    pub base_lr: f64,
    pub decay_epochs: Vec<u32>,
    pub decay_factor: f64,
    pub total_epochs: u32,
    pub iters_per_epoch: u32,
}

impl StepScheduleSpec {
    /// The conventional 12-epoch recipe: x0.1 at epochs 9 and 12.
    pub fn schedule_1x(base_lr: f64, iters_per_epoch: u32) -> Self {
        Self {
            base_lr,
            decay_epochs: vec![9, 12],
            decay_factor: 0.1,
            total_epochs: 12,
            iters_per_epoch,
        }
    }

    /// The conventional 24-epoch recipe: x0.1 at epochs 17 and 23.
    pub fn schedule_2x(base_lr: f64, iters_per_epoch: u32) -> Self {
        Self {
            base_lr,
            decay_epochs: vec![17, 23],
            decay_factor: 0.1,
            total_epochs: 24,
            iters_per_epoch,
        }
    }

    pub fn fixed(lr: f64, total_epochs: u32, iters_per_epoch: u32) -> Self {
        Self {
            base_lr: lr,
            decay_epochs: Vec::new(),
            decay_factor: 0.1,
            total_epochs,
            iters_per_epoch,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::InvalidSchedule(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor.is_finite()) {
            return Err(Error::InvalidSchedule(format!(
                "decay_factor must be positive, got {}",
                self.decay_factor
            )));
        }
        if self.total_epochs == 0 || self.iters_per_epoch == 0 {
            return Err(Error::InvalidSchedule(
                "total_epochs and iters_per_epoch must be positive".into(),
            ));
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidSchedule(format!(
                "decay_epochs {:?} must be strictly ascending",
                self.decay_epochs
            )));
        }
        if let Some(&e) = self.decay_epochs.iter().find(|&&e| e < 1 || e > self.total_epochs) {
            return Err(Error::InvalidSchedule(format!(
                "decay epoch {e} outside [1, {}]",
                self.total_epochs
            )));
        }
        Ok(())
    }

    /// Learning rate in effect at the end of training.
    pub fn final_lr(&self) -> f64 {
        self.base_lr * self.decay_factor.powi(self.decay_epochs.len() as i32)
    }

    pub fn total_iters(&self) -> u64 {
        u64::from(self.total_epochs) * u64::from(self.iters_per_epoch)
    }
}

/// Cosine annealing from `lr_max` to `lr_min` within each cycle of
/// `cycle_len_iters` iterations, restarting at `lr_max`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineCycleSpec {
    pub lr_max: f64,
    pub lr_min: f64,
    pub cycle_len_iters: u32,
    pub num_cycles: u32,
}

impl CosineCycleSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min > 0.0 && self.lr_min.is_finite() && self.lr_max.is_finite()) {
            return Err(Error::InvalidSchedule(format!(
                "learning rates must be positive and finite, got ({}, {})",
                self.lr_max, self.lr_min
            )));
        }
        if self.lr_min > self.lr_max {
            return Err(Error::InvalidSchedule(format!(
                "lr_min {} exceeds lr_max {}",
                self.lr_min, self.lr_max
            )));
        }
        if self.cycle_len_iters == 0 || self.num_cycles == 0 {
            return Err(Error::InvalidSchedule(
                "cycle_len_iters and num_cycles must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn total_iters(&self) -> u64 {
        u64::from(self.cycle_len_iters) * u64::from(self.num_cycles)
    }
}

/// Learning rate for a 1-indexed epoch under step decay.
pub fn step_lr(spec: &StepScheduleSpec, epoch: u32) -> Result<f64> {
    spec.validate()?;
    if epoch < 1 || epoch > spec.total_epochs {
        return Err(Error::OutOfRange {
            what: "epoch",
            value: u64::from(epoch),
            range: format!("[1, {}]", spec.total_epochs),
        });
    }
    let k = spec.decay_epochs.iter().filter(|&&d| d <= epoch).count();
    Ok(spec.base_lr * spec.decay_factor.powi(k as i32))
}

/// Learning rate for a 0-indexed global iteration under cyclical cosine
/// annealing. The first iteration of every cycle returns exactly `lr_max`
/// and the last returns exactly `lr_min`.
pub fn cyclical_cosine_lr(spec: &CosineCycleSpec, global_iter: u64) -> Result<f64> {
    spec.validate()?;
    if global_iter >= spec.total_iters() {
        return Err(Error::OutOfRange {
            what: "iteration",
            value: global_iter,
            range: format!("[0, {})", spec.total_iters()),
        });
    }
    let period = u64::from(spec.cycle_len_iters);
    let t = global_iter % period;
    if t == 0 {
        return Ok(spec.lr_max);
    }
    if t == period - 1 {
        return Ok(spec.lr_min);
    }
    let phase = t as f64 / (period - 1) as f64;
    Ok(spec.lr_min + 0.5 * (spec.lr_max - spec.lr_min) * (1.0 + (PI * phase).cos()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleSpec {
    Step(StepScheduleSpec),
    Cosine(CosineCycleSpec),
}

impl ScheduleSpec {
    /// Learning rate at a 0-indexed global iteration.
    pub fn lr_at(&self, global_iter: u64) -> Result<f64> {
        match self {
            ScheduleSpec::Step(spec) => {
                let epoch = global_iter / u64::from(spec.iters_per_epoch.max(1)) + 1;
                let epoch = u32::try_from(epoch).map_err(|_| Error::OutOfRange {
                    what: "iteration",
                    value: global_iter,
                    range: format!("[0, {})", spec.total_iters()),
                })?;
                step_lr(spec, epoch)
            }
            ScheduleSpec::Cosine(spec) => cyclical_cosine_lr(spec, global_iter),
        }
    }

    pub fn total_iters(&self) -> u64 {
        match self {
            ScheduleSpec::Step(s) => s.total_iters(),
            ScheduleSpec::Cosine(s) => s.total_iters(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrRecord {
    pub iter: u64,
    pub lr: f64,
}

/// One record per iteration in `0..total_iters`.
pub fn emit_schedule(spec: &ScheduleSpec, total_iters: u64) -> Result<Vec<LrRecord>> {
    if total_iters == 0 {
        return Err(Error::InvalidSchedule("total_iters must be at least 1".into()));
    }
    (0..total_iters)
        .map(|iter| Ok(LrRecord { iter, lr: spec.lr_at(iter)? }))
        .collect()
}

/// CSV with header `iter,lr`; rates printed with 17 significant digits.
pub fn schedule_to_csv(records: &[LrRecord]) -> String {
    let mut out = String::with_capacity(16 + records.len() * 24);
    out.push_str("iter,lr\n");
    for r in records {
        let _ = writeln!(out, "{},{}", r.iter, fmt_g17(r.lr));
    }
    out
}
