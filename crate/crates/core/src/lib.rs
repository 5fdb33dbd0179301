//! Stochastic weight averaging toolkit.
//!
//! - [`tensor_store`]: checkpoints and their binary file format
//! - [`schedules`]: step and cyclical cosine learning rates
//! - [`swa_average`]: streaming checkpoint averaging
//! - [`trainer`]: desk-scale MLP training, BN recompute, and the full
//!   pretrain / cyclical / average protocol
//! - [`landscape`]: interpolation and perturbation-sharpness probes
//! - [`cli`]: the `swa` command-line front end

pub mod cli;
pub mod error;
pub mod fsutil;
pub mod landscape;
pub mod schedules;
pub mod swa_average;
pub mod tensor_store;
pub mod trainer;

pub use error::{Error, Result};
pub use landscape::{interpolate_loss, perturbation_sharpness, LossOracle, ProbeKind, ProbeResult, ProbeSummary};
pub use schedules::{
    cyclical_cosine_lr, emit_schedule, schedule_to_csv, step_lr, CosineCycleSpec, LrRecord, ScheduleSpec,
    StepScheduleSpec,
};
pub use swa_average::{average_checkpoints, average_window, AveragingWindow, RunningAverage, SkipPolicy};
pub use tensor_store::{
    checkpoint_l2_distance, read_checkpoint, write_checkpoint, Checkpoint, DType, NamedTensor, TensorData,
};
