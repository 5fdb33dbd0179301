//! Python bindings: checkpoints, schedules, averaging, training and the
//! full protocol run.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;
use swa_core::trainer::{self, Parameters, ReportRow};
use swa_core::{CosineCycleSpec, DType, Error, NamedTensor, SkipPolicy, StepScheduleSpec, TensorData};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn parse_dtype(s: &str) -> PyResult<DType> {
    match s.to_ascii_uppercase().as_str() {
        "F32" => Ok(DType::F32),
        "F64" => Ok(DType::F64),
        _ => Err(PyValueError::new_err(format!("unsupported dtype {s:?}"))),
    }
}

/// An ordered collection of named F32/F64 tensors plus string metadata.
#[pyclass(name = "Checkpoint", module = "swa_toolkit", from_py_object)]
#[derive(Clone)]
struct PyCheckpoint {
    inner: swa_core::Checkpoint,
}

#[pymethods]
impl PyCheckpoint {
    #[new]
    fn new() -> Self {
        Self { inner: swa_core::Checkpoint::new() }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: swa_core::read_checkpoint(path).map_err(to_py)? })
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(Self { inner: swa_core::Checkpoint::from_bytes(data).map_err(to_py)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        swa_core::write_checkpoint(&self.inner, path).map_err(to_py)
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.inner.to_bytes())
    }

    /// Add a tensor given as a flat row-major list of values.
    #[pyo3(signature = (name, shape, values, dtype = "F64"))]
    fn insert(&mut self, name: String, shape: Vec<usize>, values: Vec<f64>, dtype: &str) -> PyResult<()> {
        let data = TensorData::from_f64(values, parse_dtype(dtype)?);
        let tensor = NamedTensor::new(name, shape, data).map_err(to_py)?;
        self.inner.insert(tensor).map_err(to_py)
    }

    /// `(shape, values, dtype)` for one tensor; values are widened to float.
    fn get(&self, name: &str) -> PyResult<(Vec<usize>, Vec<f64>, &'static str)> {
        let t = self
            .inner
            .get(name)
            .ok_or_else(|| PyValueError::new_err(format!("no tensor named {name:?}")))?;
        Ok((t.shape().to_vec(), t.to_f64_vec(), t.dtype().as_str()))
    }

    fn names(&self) -> Vec<String> {
        self.inner.names().map(str::to_owned).collect()
    }

    fn metadata(&self) -> BTreeMap<String, String> {
        self.inner.metadata().clone()
    }

    fn set_metadata(&mut self, key: String, value: String) {
        self.inner.set_metadata(key, value);
    }

    fn bits_eq(&self, other: &PyCheckpoint) -> bool {
        self.inner.bits_eq(&other.inner)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __contains__(&self, name: &str) -> bool {
        self.inner.get(name).is_some()
    }

    fn __repr__(&self) -> String {
        format!("Checkpoint({} tensors)", self.inner.len())
    }
}

/// A validated experiment configuration loaded from TOML.
#[pyclass(name = "TrainConfig", module = "swa_toolkit", skip_from_py_object)]
#[derive(Clone)]
struct PyTrainConfig {
    inner: trainer::TrainConfig,
}

#[pymethods]
impl PyTrainConfig {
    #[staticmethod]
    fn from_file(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: trainer::TrainConfig::from_file(path).map_err(to_py)? })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Self { inner: trainer::TrainConfig::from_toml_str(text).map_err(to_py)? })
    }

    fn with_seed(&self, seed: u64) -> Self {
        Self { inner: self.inner.with_seed(seed) }
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn swa_epochs(&self) -> u32 {
        self.inner.swa_epochs
    }

    #[getter]
    fn checkpoint_dir(&self) -> PathBuf {
        self.inner.checkpoint_dir.clone()
    }

    #[setter]
    fn set_checkpoint_dir(&mut self, dir: PathBuf) {
        self.inner.checkpoint_dir = dir;
    }

    fn iters_per_epoch(&self) -> usize {
        self.inner.iters_per_epoch()
    }
}

#[pyfunction]
fn cyclical_cosine_lr(lr_max: f64, lr_min: f64, cycle_len_iters: u32, num_cycles: u32, global_iter: u64) -> PyResult<f64> {
    let spec = CosineCycleSpec { lr_max, lr_min, cycle_len_iters, num_cycles };
    swa_core::cyclical_cosine_lr(&spec, global_iter).map_err(to_py)
}

/// Learning rate at a 1-indexed epoch under step decay.
#[pyfunction]
#[pyo3(signature = (base_lr, decay_epochs, total_epochs, epoch, decay_factor = 0.1))]
fn step_lr(base_lr: f64, decay_epochs: Vec<u32>, total_epochs: u32, epoch: u32, decay_factor: f64) -> PyResult<f64> {
    let spec = StepScheduleSpec { base_lr, decay_epochs, decay_factor, total_epochs, iters_per_epoch: 1 };
    swa_core::step_lr(&spec, epoch).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (checkpoints, skip = Vec::new(), out_dtype = "F64"))]
fn average_checkpoints(checkpoints: Vec<PyCheckpoint>, skip: Vec<String>, out_dtype: &str) -> PyResult<PyCheckpoint> {
    let ckpts: Vec<_> = checkpoints.into_iter().map(|c| c.inner).collect();
    let skip = SkipPolicy::globs(skip).map_err(to_py)?;
    let inner = swa_core::average_checkpoints(&ckpts, &skip, parse_dtype(out_dtype)?).map_err(to_py)?;
    Ok(PyCheckpoint { inner })
}

#[pyfunction]
fn l2_distance(a: &PyCheckpoint, b: &PyCheckpoint) -> PyResult<f64> {
    swa_core::checkpoint_l2_distance(&a.inner, &b.inner).map_err(to_py)
}

/// Eval-mode `(loss, accuracy)` of a checkpoint on the config's validation split.
#[pyfunction]
fn evaluate(config: &PyTrainConfig, checkpoint: &PyCheckpoint) -> PyResult<(f64, f64)> {
    let cfg = &config.inner;
    let splits = cfg.dataset.generate(cfg.model.input_dim, cfg.model.output_dim).map_err(to_py)?;
    let params = Parameters::from_checkpoint(&cfg.model, &checkpoint.inner).map_err(to_py)?;
    let m = trainer::evaluate(&params, &splits.val).map_err(to_py)?;
    Ok((m.loss, m.accuracy))
}

/// Recompute BN running statistics on the config's training split.
#[pyfunction]
fn recompute_bn(config: &PyTrainConfig, checkpoint: &PyCheckpoint) -> PyResult<PyCheckpoint> {
    let cfg = &config.inner;
    let splits = cfg.dataset.generate(cfg.model.input_dim, cfg.model.output_dim).map_err(to_py)?;
    let params = Parameters::from_checkpoint(&cfg.model, &checkpoint.inner).map_err(to_py)?;
    let fresh = trainer::recompute_bn_statistics(&params, &splits.train.x).map_err(to_py)?;
    Ok(PyCheckpoint { inner: fresh.to_checkpoint() })
}

/// Train both phases; returns the per-epoch SWA-phase checkpoint paths.
#[pyfunction]
fn train(py: Python<'_>, config: &PyTrainConfig) -> PyResult<Vec<PathBuf>> {
    let cfg = config.inner.clone();
    let run = py.detach(|| trainer::train(&cfg)).map_err(to_py)?;
    Ok(run.swa_checkpoints)
}

type Row = (String, f64, f64, Option<f64>);

/// Full protocol run; returns report rows as `(model, val_loss, val_acc, sharpness)`.
#[pyfunction]
fn run_protocol(py: Python<'_>, config: &PyTrainConfig) -> PyResult<Vec<Row>> {
    let cfg = config.inner.clone();
    let report = py.detach(|| trainer::run_protocol(&cfg)).map_err(to_py)?;
    Ok(report
        .rows
        .into_iter()
        .map(|ReportRow { model, val_loss, val_acc, sharpness }| (model, val_loss, val_acc, sharpness))
        .collect())
}

#[pymodule]
fn swa_toolkit(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCheckpoint>()?;
    m.add_class::<PyTrainConfig>()?;
    m.add_function(wrap_pyfunction!(cyclical_cosine_lr, m)?)?;
    m.add_function(wrap_pyfunction!(step_lr, m)?)?;
    m.add_function(wrap_pyfunction!(average_checkpoints, m)?)?;
    m.add_function(wrap_pyfunction!(l2_distance, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(recompute_bn, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(run_protocol, m)?)?;
    Ok(())
}
