//! Multilayer perceptron with optional batch-norm on every hidden layer.
//!
//! Hidden layer: `z = x W^T (+ b)`, then BN (when enabled), then ReLU. BN
//! layers carry no linear bias since the shift `beta` subsumes it. The output
//! layer is plain affine and feeds softmax cross-entropy.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_store::{Checkpoint, NamedTensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub use_batchnorm: bool,
    /// Added to the variance before the square root. Zero gives exact
    /// standardization; a feature with zero variance then normalizes to 0.
    pub bn_eps: f64,
    /// Weight of the newest batch in the running-statistics EMA.
    pub bn_momentum: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            input_dim: 2,
            hidden_dims: vec![32],
            output_dim: 2,
            use_batchnorm: false,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.use_batchnorm && self.hidden_dims.is_empty() {
            return Err(Error::Config("batch-norm requires at least one hidden layer".into()));
        }
        if !(self.bn_eps >= 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("bn_eps must be >= 0 and bn_momentum in [0, 1]".into()));
        }
        Ok(())
    }

    fn widths(&self) -> Vec<usize> {
        std::iter::once(self.input_dim)
            .chain(self.hidden_dims.iter().copied())
            .chain(std::iter::once(self.output_dim))
            .collect()
    }
}

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidBatch(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix { rows: idx.len(), cols: self.cols, data }
    }

    /// Per-column mean and biased variance (two-pass).
    pub fn column_stats(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.rows as f64;
        let mut mean = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (m, &v) in mean.iter_mut().zip(self.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; self.cols];
        for i in 0..self.rows {
            for ((s, &v), &m) in var.iter_mut().zip(self.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= n);
        (mean, var)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    /// `out_dim x in_dim`, row-major.
    pub weight: Vec<f64>,
    /// Empty when followed by batch-norm.
    pub bias: Vec<f64>,
}

impl Dense {
    pub(crate) fn apply(&self, x: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(x.rows, self.out_dim);
        for i in 0..x.rows {
            let xi = x.row(i);
            let oi = &mut out.data[i * self.out_dim..(i + 1) * self.out_dim];
            for (o, slot) in oi.iter_mut().enumerate() {
                let w = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
                let mut acc = self.bias.get(o).copied().unwrap_or(0.0);
                for (a, b) in w.iter().zip(xi) {
                    acc += a * b;
                }
                *slot = acc;
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-feature statistics of one BN layer's input over a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Weights, BN state, and SGD momentum buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters {
    pub spec: ModelSpec,
    pub layers: Vec<Dense>,
    /// One per hidden layer when batch-norm is enabled, else empty.
    pub bn: Vec<BatchNorm>,
    /// Momentum buffers in [`Parameters::trainable`] order.
    pub velocity: Vec<Vec<f64>>,
}

/// Gradients in [`Parameters::trainable`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &Parameters) -> Self {
        Self {
            tensors: params.trainable().iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }
}

fn inv_std(var: f64, eps: f64) -> f64 {
    let denom = (var + eps).sqrt();
    if denom > 0.0 {
        1.0 / denom
    } else {
        0.0
    }
}

impl Parameters {
    /// He-normal weights, zero biases, unit BN scale; all draws from `seed`.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = spec.widths();
        let n_hidden = spec.hidden_dims.len();
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for (l, pair) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            let weight = (0..fan_in * fan_out).map(|_| normal.sample(&mut rng)).collect();
            let has_bias = !(spec.use_batchnorm && l < n_hidden);
            layers.push(Dense {
                in_dim: fan_in,
                out_dim: fan_out,
                weight,
                bias: if has_bias { vec![0.0; fan_out] } else { Vec::new() },
            });
        }
        let bn = if spec.use_batchnorm {
            spec.hidden_dims
                .iter()
                .map(|&w| BatchNorm {
                    gamma: vec![1.0; w],
                    beta: vec![0.0; w],
                    running_mean: vec![0.0; w],
                    running_var: vec![1.0; w],
                })
                .collect()
        } else {
            Vec::new()
        };
        let mut params = Self { spec: spec.clone(), layers, bn, velocity: Vec::new() };
        params.reset_velocity();
        Ok(params)
    }

    pub fn reset_velocity(&mut self) {
        self.velocity = self.trainable().iter().map(|t| vec![0.0; t.len()]).collect();
    }

    /// Trainable tensors: per layer `weight`, `bias` (if any), then per BN
    /// layer `gamma`, `beta`. Running statistics are excluded.
    pub fn trainable(&self) -> Vec<&Vec<f64>> {
        let mut out = Vec::new();
        for d in &self.layers {
            out.push(&d.weight);
            if !d.bias.is_empty() {
                out.push(&d.bias);
            }
        }
        for b in &self.bn {
            out.push(&b.gamma);
            out.push(&b.beta);
        }
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::new();
        for d in &mut self.layers {
            out.push(&mut d.weight);
            if !d.bias.is_empty() {
                out.push(&mut d.bias);
            }
        }
        for b in &mut self.bn {
            out.push(&mut b.gamma);
            out.push(&mut b.beta);
        }
        out
    }

    /// Folds one batch's statistics into the running EMA.
    pub fn update_running_stats(&mut self, stats: &[BatchStats]) {
        let m = self.spec.bn_momentum;
        for (bn, s) in self.bn.iter_mut().zip(stats) {
            for (r, &x) in bn.running_mean.iter_mut().zip(&s.mean) {
                *r = (1.0 - m) * *r + m * x;
            }
            for (r, &x) in bn.running_var.iter_mut().zip(&s.var) {
                *r = (1.0 - m) * *r + m * x;
            }
        }
    }

    /// Model tensors as a checkpoint; momentum buffers are not included.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        let mut put = |name: String, shape: Vec<usize>, data: &[f64]| {
            ckpt.insert(NamedTensor::from_f64(name, shape, data.to_vec()).expect("consistent shape"))
                .expect("unique names");
        };
        for (l, d) in self.layers.iter().enumerate() {
            put(format!("layer{l}.weight"), vec![d.out_dim, d.in_dim], &d.weight);
            if !d.bias.is_empty() {
                put(format!("layer{l}.bias"), vec![d.out_dim], &d.bias);
            }
        }
        for (l, b) in self.bn.iter().enumerate() {
            let w = b.gamma.len();
            put(format!("layer{l}.bn.gamma"), vec![w], &b.gamma);
            put(format!("layer{l}.bn.beta"), vec![w], &b.beta);
            put(format!("layer{l}.bn.running_mean"), vec![w], &b.running_mean);
            put(format!("layer{l}.bn.running_var"), vec![w], &b.running_var);
        }
        ckpt
    }

    /// Rebuilds parameters for `spec` from a checkpoint with exactly the
    /// tensors [`Parameters::to_checkpoint`] produces. Velocity starts at zero.
    pub fn from_checkpoint(spec: &ModelSpec, ckpt: &Checkpoint) -> Result<Self> {
        let mut params = Self::init(spec, 0)?;
        let template = params.to_checkpoint();
        let names = template.incompatible_names(&ckpt_as_f64_shape(ckpt));
        if !names.is_empty() {
            return Err(Error::Incompatible { names });
        }
        let load = |name: String| ckpt.get(&name).expect("checked").to_f64_vec();
        for (l, d) in params.layers.iter_mut().enumerate() {
            d.weight = load(format!("layer{l}.weight"));
            if !d.bias.is_empty() {
                d.bias = load(format!("layer{l}.bias"));
            }
        }
        for (l, b) in params.bn.iter_mut().enumerate() {
            b.gamma = load(format!("layer{l}.bn.gamma"));
            b.beta = load(format!("layer{l}.bn.beta"));
            b.running_mean = load(format!("layer{l}.bn.running_mean"));
            b.running_var = load(format!("layer{l}.bn.running_var"));
        }
        Ok(params)
    }
}

// Checkpoints may hold F32 tensors; compare names and shapes only.
fn ckpt_as_f64_shape(ckpt: &Checkpoint) -> Checkpoint {
    let mut out = Checkpoint::new();
    for t in ckpt.tensors() {
        let zeros = vec![0.0; t.numel()];
        out.insert(NamedTensor::from_f64(t.name(), t.shape().to_vec(), zeros).expect("valid"))
            .expect("unique");
    }
    out
}

/// Intermediate values of one forward pass, kept for backprop.
pub(crate) struct Trace {
    /// Input to each layer (`inputs[0]` is the batch).
    pub inputs: Vec<Matrix>,
    /// Normalized pre-activations per BN layer, before scale and shift.
    pub normalized: Vec<Matrix>,
    /// Post-BN, pre-ReLU values per hidden layer.
    pub pre_relu: Vec<Matrix>,
    pub inv_std: Vec<Vec<f64>>,
    pub stats: Vec<BatchStats>,
    pub logits: Matrix,
}

fn ensure_finite(m: &Matrix, layer: usize) -> Result<()> {
    if m.data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { layer: format!("layer{layer}") })
    }
}

pub(crate) fn forward_trace(params: &Parameters, x: &Matrix, mode: Mode) -> Result<Trace> {
    let spec = &params.spec;
    if x.cols != spec.input_dim {
        return Err(Error::InvalidBatch(format!(
            "batch has {} features, model expects {}",
            x.cols, spec.input_dim
        )));
    }
    if x.rows == 0 {
        return Err(Error::InvalidBatch("empty batch".into()));
    }
    if spec.use_batchnorm && mode == Mode::Train && x.rows < 2 {
        return Err(Error::InvalidBatch(
            "batch-norm in train mode needs at least 2 samples".into(),
        ));
    }
    let n_hidden = spec.hidden_dims.len();
    let mut trace = Trace {
        inputs: Vec::with_capacity(n_hidden + 1),
        normalized: Vec::new(),
        pre_relu: Vec::new(),
        inv_std: Vec::new(),
        stats: Vec::new(),
        logits: Matrix::zeros(0, 0),
    };
    let mut h = x.clone();
    for (l, dense) in params.layers.iter().enumerate() {
        let z = dense.apply(&h);
        ensure_finite(&z, l)?;
        trace.inputs.push(h);
        if l == n_hidden {
            trace.logits = z;
            return Ok(trace);
        }
        let y = if let Some(bn) = params.bn.get(l) {
            let (mean, var) = match mode {
                Mode::Train => z.column_stats(),
                Mode::Eval => (bn.running_mean.clone(), bn.running_var.clone()),
            };
            let istd: Vec<f64> = var.iter().map(|&v| inv_std(v, spec.bn_eps)).collect();
            let mut xhat = z;
            for i in 0..xhat.rows {
                let row = &mut xhat.data[i * xhat.cols..(i + 1) * xhat.cols];
                for (j, v) in row.iter_mut().enumerate() {
                    *v = (*v - mean[j]) * istd[j];
                }
            }
            let mut y = xhat.clone();
            for i in 0..y.rows {
                let row = &mut y.data[i * y.cols..(i + 1) * y.cols];
                for (j, v) in row.iter_mut().enumerate() {
                    *v = bn.gamma[j] * *v + bn.beta[j];
                }
            }
            ensure_finite(&y, l)?;
            trace.normalized.push(xhat);
            trace.inv_std.push(istd);
            trace.stats.push(BatchStats { mean, var });
            y
        } else {
            z
        };
        h = Matrix {
            rows: y.rows,
            cols: y.cols,
            data: y.data.iter().map(|&v| v.max(0.0)).collect(),
        };
        trace.pre_relu.push(y);
    }
    unreachable!("output layer returns above")
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub logits: Matrix,
    /// Batch statistics used by each BN layer (train mode) or the running
    /// statistics that were applied (eval mode).
    pub batch_stats: Vec<BatchStats>,
}

pub fn forward(params: &Parameters, x: &Matrix, mode: Mode) -> Result<ForwardOutput> {
    let trace = forward_trace(params, x, mode)?;
    Ok(ForwardOutput { logits: trace.logits, batch_stats: trace.stats })
}

/// Normalized BN inputs (before scale and shift) for every BN layer.
pub fn normalized_preactivations(params: &Parameters, x: &Matrix, mode: Mode) -> Result<Vec<Matrix>> {
    Ok(forward_trace(params, x, mode)?.normalized)
}

/// Mean softmax cross-entropy and the softmax probabilities.
pub(crate) fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if labels.len() != logits.rows {
        return Err(Error::InvalidBatch(format!(
            "{} labels for {} samples",
            labels.len(),
            logits.rows
        )));
    }
    let mut probs = logits.clone();
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= logits.cols {
            return Err(Error::InvalidBatch(format!("label {y} outside [0, {})", logits.cols)));
        }
        let row = &mut probs.data[i * logits.cols..(i + 1) * logits.cols];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
        total += -(logits.data[i * logits.cols + y] - max - sum.ln());
    }
    Ok((total / logits.rows as f64, probs))
}

/// Mean cross-entropy over the batch (train-mode BN) and its gradient with
/// respect to every trainable tensor.
pub fn loss_and_grad(params: &Parameters, x: &Matrix, labels: &[usize]) -> Result<(f64, Gradients, Vec<BatchStats>)> {
    let trace = forward_trace(params, x, Mode::Train)?;
    let (loss, probs) = cross_entropy(&trace.logits, labels)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite { layer: format!("layer{}", params.layers.len() - 1) });
    }
    let n = x.rows as f64;
    let mut delta = probs;
    for (i, &y) in labels.iter().enumerate() {
        delta.data[i * delta.cols + y] -= 1.0;
    }
    delta.data.iter_mut().for_each(|v| *v /= n);

    let n_layers = params.layers.len();
    let mut layer_grads: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); n_layers];
    let mut bn_grads: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); params.bn.len()];

    for l in (0..n_layers).rev() {
        let dense = &params.layers[l];
        if l < n_layers - 1 {
            // delta holds dL/d(relu output); convert to dL/dz.
            let pre = &trace.pre_relu[l];
            for (d, &p) in delta.data.iter_mut().zip(&pre.data) {
                if p <= 0.0 {
                    *d = 0.0;
                }
            }
            if let Some(bn) = params.bn.get(l) {
                let xhat = &trace.normalized[l];
                let istd = &trace.inv_std[l];
                let cols = delta.cols;
                let mut dgamma = vec![0.0; cols];
                let mut dbeta = vec![0.0; cols];
                for i in 0..delta.rows {
                    for j in 0..cols {
                        let d = delta.data[i * cols + j];
                        dgamma[j] += d * xhat.data[i * cols + j];
                        dbeta[j] += d;
                    }
                }
                // dxhat = dy * gamma; dz = istd * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
                let mut sum_dxhat = vec![0.0; cols];
                let mut sum_dxhat_xhat = vec![0.0; cols];
                for i in 0..delta.rows {
                    for j in 0..cols {
                        let dx = delta.data[i * cols + j] * bn.gamma[j];
                        sum_dxhat[j] += dx;
                        sum_dxhat_xhat[j] += dx * xhat.data[i * cols + j];
                    }
                }
                for i in 0..delta.rows {
                    for j in 0..cols {
                        let k = i * cols + j;
                        let dx = delta.data[k] * bn.gamma[j];
                        delta.data[k] = istd[j] * (dx - sum_dxhat[j] / n - xhat.data[k] * sum_dxhat_xhat[j] / n);
                    }
                }
                bn_grads[l] = (dgamma, dbeta);
            }
        }
        let input = &trace.inputs[l];
        let mut dw = vec![0.0; dense.out_dim * dense.in_dim];
        for i in 0..delta.rows {
            let xi = input.row(i);
            for o in 0..dense.out_dim {
                let d = delta.data[i * dense.out_dim + o];
                if d != 0.0 {
                    for (w, &xv) in dw[o * dense.in_dim..(o + 1) * dense.in_dim].iter_mut().zip(xi) {
                        *w += d * xv;
                    }
                }
            }
        }
        let db = if dense.bias.is_empty() {
            Vec::new()
        } else {
            let mut db = vec![0.0; dense.out_dim];
            for i in 0..delta.rows {
                for (b, &d) in db.iter_mut().zip(delta.row(i)) {
                    *b += d;
                }
            }
            db
        };
        if l > 0 {
            let mut dx = Matrix::zeros(delta.rows, dense.in_dim);
            for i in 0..delta.rows {
                for o in 0..dense.out_dim {
                    let d = delta.data[i * dense.out_dim + o];
                    if d != 0.0 {
                        let w = &dense.weight[o * dense.in_dim..(o + 1) * dense.in_dim];
                        for (x, &wv) in dx.data[i * dense.in_dim..(i + 1) * dense.in_dim].iter_mut().zip(w) {
                            *x += d * wv;
                        }
                    }
                }
            }
            delta = dx;
        }
        layer_grads[l] = (dw, db);
    }

    let mut tensors = Vec::new();
    for (dw, db) in layer_grads {
        tensors.push(dw);
        if !db.is_empty() {
            tensors.push(db);
        }
    }
    for (dg, db) in bn_grads {
        tensors.push(dg);
        tensors.push(db);
    }
    Ok((loss, Gradients { tensors }, trace.stats))
}
