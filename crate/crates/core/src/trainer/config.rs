//! Training configuration and its flat `key = value` file form.
//!
//! ```toml
//! seed = 0
//! batch_size = 32
//! momentum = 0.9
//! weight_decay = 1e-4
//!
//! input_dim = 2
//! hidden_dims = [32, 32]
//! output_dim = 4
//! use_batchnorm = false
//!
//! dataset = "gaussian_blobs"     # or "two_rings", "csv_file" (with dataset_path)
//! n_train = 2000
//! n_val = 1000
//! noise_sigma = 0.5
//! data_seed = 1
//!
//! pretrain_epochs = 16
//! pretrain_lr = 0.02
//! pretrain_decay_epochs = []     # e.g. [9, 12] for a 1x schedule
//! pretrain_decay_factor = 0.1
//!
//! swa_epochs = 12
//! swa_lr_max = 0.02              # defaults to pretrain_lr
//! swa_lr_min = 0.0002            # defaults to the final pretrain lr
//!
//! checkpoint_dir = "runs/seed0"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::data::{DatasetSpec, Generator};
use super::model::ModelSpec;
use super::optim::SgdConfig;
use crate::error::{Error, Result};
use crate::schedules::{CosineCycleSpec, StepScheduleSpec};

/// Options for the post-training steps of a protocol run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolOptions {
    /// Also report SWA models with BN statistics recomputed on the training set.
    pub recompute_bn: bool,
    /// Sharpness probe: radius in global L2 norm; 0 directions disables it.
    pub probe_radius: f64,
    pub probe_dirs: usize,
    pub probe_seed: u64,
}

impl Default for ProtocolOptions {
    fn default() -> Self {
        Self { recompute_bn: true, probe_radius: 0.5, probe_dirs: 0, probe_seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelSpec,
    pub dataset: DatasetSpec,
    pub seed: u64,
    pub batch_size: usize,
    pub optimizer: SgdConfig,
    pub pretrain_schedule: StepScheduleSpec,
    pub swa_cycles: CosineCycleSpec,
    pub swa_epochs: u32,
    pub checkpoint_dir: PathBuf,
    pub save_pretrain_checkpoints: bool,
    pub protocol: ProtocolOptions,
}

impl TrainConfig {
    /// Iterations per epoch; a trailing partial batch is dropped.
    pub fn iters_per_epoch(&self) -> usize {
        self.dataset.n_train / self.batch_size.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.model.use_batchnorm && self.batch_size < 2 {
            return Err(Error::Config("batch-norm training needs batch_size >= 2".into()));
        }
        let ipe = self.iters_per_epoch();
        if ipe == 0 {
            return Err(Error::Config(format!(
                "n_train {} is smaller than batch_size {}",
                self.dataset.n_train, self.batch_size
            )));
        }
        self.pretrain_schedule.validate()?;
        self.swa_cycles.validate()?;
        if self.pretrain_schedule.iters_per_epoch as usize != ipe {
            return Err(Error::Config(format!(
                "pretrain schedule has {} iterations per epoch, data gives {ipe}",
                self.pretrain_schedule.iters_per_epoch
            )));
        }
        if self.swa_cycles.cycle_len_iters as usize != ipe {
            return Err(Error::Config(format!(
                "cycle length {} must equal one epoch ({ipe} iterations)",
                self.swa_cycles.cycle_len_iters
            )));
        }
        if self.swa_epochs == 0 || self.swa_cycles.num_cycles != self.swa_epochs {
            return Err(Error::Config(format!(
                "swa_epochs {} must be positive and match num_cycles {}",
                self.swa_epochs, self.swa_cycles.num_cycles
            )));
        }
        if !(self.protocol.probe_radius >= 0.0) {
            return Err(Error::Config("probe_radius must be non-negative".into()));
        }
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ConfigFile =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = file.into_config()?;
        // relative paths resolve against the config file's directory
        let base = path.parent().unwrap_or(Path::new("."));
        if let Generator::CsvFile { path: p } = &mut cfg.dataset.generator {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if cfg.checkpoint_dir.is_relative() {
            cfg.checkpoint_dir = base.join(&cfg.checkpoint_dir);
        }
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: ConfigFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        file.into_config()
    }

    /// Same configuration with a different training seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

/// Flat on-disk configuration; every key is optional except the dataset
/// sizes and model widths, which have defaults suited to small runs.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConfigFile {
    pub seed: u64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,

    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub use_batchnorm: bool,
    pub bn_eps: f64,
    pub bn_momentum: f64,

    pub dataset: String,
    pub dataset_path: Option<PathBuf>,
    pub n_train: usize,
    pub n_val: usize,
    pub noise_sigma: f64,
    pub data_seed: u64,

    pub pretrain_epochs: u32,
    pub pretrain_lr: f64,
    pub pretrain_decay_epochs: Vec<u32>,
    pub pretrain_decay_factor: f64,

    pub swa_epochs: u32,
    pub swa_lr_max: Option<f64>,
    pub swa_lr_min: Option<f64>,

    pub checkpoint_dir: PathBuf,
    pub save_pretrain_checkpoints: bool,

    pub recompute_bn: bool,
    pub probe_radius: f64,
    pub probe_dirs: usize,
    pub probe_seed: u64,
}

impl Default for ConfigFile {
    fn default() -> Self {
        let model = ModelSpec::default();
        let opt = SgdConfig::default();
        let protocol = ProtocolOptions::default();
        Self {
            seed: 0,
            batch_size: 32,
            momentum: opt.momentum,
            weight_decay: opt.weight_decay,
            input_dim: model.input_dim,
            hidden_dims: model.hidden_dims,
            output_dim: model.output_dim,
            use_batchnorm: model.use_batchnorm,
            bn_eps: model.bn_eps,
            bn_momentum: model.bn_momentum,
            dataset: "gaussian_blobs".into(),
            dataset_path: None,
            n_train: 2000,
            n_val: 1000,
            noise_sigma: 0.5,
            data_seed: 0,
            pretrain_epochs: 16,
            pretrain_lr: 0.02,
            pretrain_decay_epochs: Vec::new(),
            pretrain_decay_factor: 0.1,
            swa_epochs: 12,
            swa_lr_max: None,
            swa_lr_min: None,
            checkpoint_dir: PathBuf::from("checkpoints"),
            save_pretrain_checkpoints: false,
            recompute_bn: protocol.recompute_bn,
            probe_radius: protocol.probe_radius,
            probe_dirs: protocol.probe_dirs,
            probe_seed: protocol.probe_seed,
        }
    }
}

impl ConfigFile {
    pub fn into_config(self) -> Result<TrainConfig> {
        let generator = match self.dataset.as_str() {
            "gaussian_blobs" => Generator::GaussianBlobs,
            "two_rings" => Generator::TwoRings,
            "csv_file" => Generator::CsvFile {
                path: self
                    .dataset_path
                    .clone()
                    .ok_or_else(|| Error::Config("dataset = \"csv_file\" needs dataset_path".into()))?,
            },
            other => return Err(Error::Config(format!("unknown dataset {other:?}"))),
        };
        let ipe = u32::try_from(self.n_train / self.batch_size.max(1))
            .map_err(|_| Error::Config("too many iterations per epoch".into()))?;
        let pretrain_schedule = StepScheduleSpec {
            base_lr: self.pretrain_lr,
            decay_epochs: self.pretrain_decay_epochs,
            decay_factor: self.pretrain_decay_factor,
            total_epochs: self.pretrain_epochs,
            iters_per_epoch: ipe,
        };
        let swa_cycles = CosineCycleSpec {
            lr_max: self.swa_lr_max.unwrap_or(pretrain_schedule.base_lr),
            lr_min: self.swa_lr_min.unwrap_or_else(|| pretrain_schedule.final_lr()),
            cycle_len_iters: ipe,
            num_cycles: self.swa_epochs,
        };
        let cfg = TrainConfig {
            model: ModelSpec {
                input_dim: self.input_dim,
                hidden_dims: self.hidden_dims,
                output_dim: self.output_dim,
                use_batchnorm: self.use_batchnorm,
                bn_eps: self.bn_eps,
                bn_momentum: self.bn_momentum,
            },
            dataset: DatasetSpec {
                generator,
                n_train: self.n_train,
                n_val: self.n_val,
                noise_sigma: self.noise_sigma,
                seed: self.data_seed,
            },
            seed: self.seed,
            batch_size: self.batch_size,
            optimizer: SgdConfig { momentum: self.momentum, weight_decay: self.weight_decay },
            pretrain_schedule,
            swa_cycles,
            swa_epochs: self.swa_epochs,
            checkpoint_dir: self.checkpoint_dir,
            save_pretrain_checkpoints: self.save_pretrain_checkpoints,
            protocol: ProtocolOptions {
                recompute_bn: self.recompute_bn,
                probe_radius: self.probe_radius,
                probe_dirs: self.probe_dirs,
                probe_seed: self.probe_seed,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_and_wire_cycle_to_epoch() {
        let cfg = TrainConfig::from_toml_str("").unwrap();
        assert_eq!(cfg.iters_per_epoch(), 62);
        assert_eq!(cfg.swa_cycles.cycle_len_iters, 62);
        assert_eq!(cfg.swa_cycles.num_cycles, 12);
        // fixed-lr pretraining: the cycle's lr pair collapses unless set
        assert_eq!((cfg.swa_cycles.lr_max, cfg.swa_cycles.lr_min), (0.02, 0.02));
    }

    #[test]
    fn lr_pair_defaults_to_pretrain_endpoints() {
        let cfg = TrainConfig::from_toml_str(
            "pretrain_epochs = 12\npretrain_decay_epochs = [9, 12]\npretrain_lr = 0.02",
        )
        .unwrap();
        assert_eq!(cfg.swa_cycles.lr_max, 0.02);
        assert!((cfg.swa_cycles.lr_min - 0.0002).abs() < 1e-18);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(TrainConfig::from_toml_str("learning_rate = 0.1").is_err());
        assert!(TrainConfig::from_toml_str("dataset = \"coco\"").is_err());
        assert!(TrainConfig::from_toml_str("dataset = \"csv_file\"").is_err());
        assert!(TrainConfig::from_toml_str("batch_size = 5000").is_err());
        assert!(TrainConfig::from_toml_str("swa_lr_min = 0.5").is_err());
        assert!(TrainConfig::from_toml_str("use_batchnorm = true\nhidden_dims = []").is_err());
    }
}
