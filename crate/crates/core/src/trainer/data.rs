//! Synthetic and file-backed classification datasets.

use std::f64::consts::TAU;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::model::Matrix;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "snake_case")]
pub enum Generator {
    /// One isotropic Gaussian per class, centers evenly spaced on the unit
    /// circle in the first two input dimensions.
    GaussianBlobs,
    /// Two concentric rings (radius 1 and 2), binary labels.
    TwoRings,
    /// Rows of `features..., label`; the first `n_train` rows train, the
    /// next `n_val` validate.
    CsvFile { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub generator: Generator,
    pub n_train: usize,
    pub n_val: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(x: Matrix, labels: Vec<usize>) -> Result<Self> {
        if x.rows != labels.len() {
            return Err(Error::Dataset(format!("{} rows but {} labels", x.rows, labels.len())));
        }
        Ok(Self { x, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
}

const TRAIN_STREAM: u64 = 1;
const VAL_STREAM: u64 = 2;

impl DatasetSpec {
    pub fn generate(&self, input_dim: usize, classes: usize) -> Result<Splits> {
        if self.n_train == 0 || self.n_val == 0 {
            return Err(Error::Dataset("n_train and n_val must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Dataset(format!("noise_sigma {} is negative", self.noise_sigma)));
        }
        match &self.generator {
            Generator::GaussianBlobs => Ok(Splits {
                train: self.blobs(self.n_train, TRAIN_STREAM, input_dim, classes),
                val: self.blobs(self.n_val, VAL_STREAM, input_dim, classes),
            }),
            Generator::TwoRings => {
                if classes != 2 || input_dim < 2 {
                    return Err(Error::Dataset(
                        "two_rings needs 2 classes and at least 2 input dimensions".into(),
                    ));
                }
                Ok(Splits {
                    train: self.rings(self.n_train, TRAIN_STREAM, input_dim),
                    val: self.rings(self.n_val, VAL_STREAM, input_dim),
                })
            }
            Generator::CsvFile { path } => self.load_csv(path, input_dim, classes),
        }
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }

    fn blobs(&self, n: usize, stream: u64, dim: usize, classes: usize) -> Dataset {
        let mut rng = self.rng(stream);
        let mut data = Vec::with_capacity(n * dim);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % classes;
            let angle = TAU * c as f64 / classes as f64;
            let center = [angle.cos(), angle.sin()];
            for d in 0..dim {
                let mu = if dim == 1 { c as f64 } else { center.get(d).copied().unwrap_or(0.0) };
                let z: f64 = rng.sample(StandardNormal);
                data.push(mu + self.noise_sigma * z);
            }
            labels.push(c);
        }
        Dataset { x: Matrix { rows: n, cols: dim, data }, labels }
    }

    fn rings(&self, n: usize, stream: u64, dim: usize) -> Dataset {
        let mut rng = self.rng(stream);
        let mut data = Vec::with_capacity(n * dim);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % 2;
            let radius = 1.0 + c as f64;
            let theta = rng.random::<f64>() * TAU;
            for d in 0..dim {
                let base = match d {
                    0 => radius * theta.cos(),
                    1 => radius * theta.sin(),
                    _ => 0.0,
                };
                let z: f64 = rng.sample(StandardNormal);
                data.push(base + self.noise_sigma * z);
            }
            labels.push(c);
        }
        Dataset { x: Matrix { rows: n, cols: dim, data }, labels }
    }

    fn load_csv(&self, path: &PathBuf, dim: usize, classes: usize) -> Result<Splits> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for (row, record) in reader.records().enumerate() {
            let record = record.map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
            if record.len() != dim + 1 {
                return Err(Error::Dataset(format!(
                    "{} row {}: expected {} columns, got {}",
                    path.display(),
                    row + 1,
                    dim + 1,
                    record.len()
                )));
            }
            let parsed: std::result::Result<Vec<f64>, _> = record.iter().take(dim).map(str::parse).collect();
            let label = record[dim].parse::<usize>();
            match (parsed, label) {
                (Ok(features), Ok(label)) if label < classes => {
                    data.extend(features);
                    labels.push(label);
                }
                // a non-numeric first row is a header
                (Err(_), _) | (_, Err(_)) if row == 0 => continue,
                _ => {
                    return Err(Error::Dataset(format!(
                        "{} row {}: bad features or label (classes = {classes})",
                        path.display(),
                        row + 1
                    )))
                }
            }
        }
        let total = labels.len();
        if total < self.n_train + self.n_val {
            return Err(Error::Dataset(format!(
                "{} has {total} rows, need {}",
                path.display(),
                self.n_train + self.n_val
            )));
        }
        let all = Dataset { x: Matrix { rows: total, cols: dim, data }, labels };
        let train_idx: Vec<usize> = (0..self.n_train).collect();
        let val_idx: Vec<usize> = (self.n_train..self.n_train + self.n_val).collect();
        Ok(Splits { train: all.subset(&train_idx), val: all.subset(&val_idx) })
    }
}
