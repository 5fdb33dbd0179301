//! Helpers shared by the integration tests: random fixtures and independent
//! reference implementations.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use swa_core::trainer::{loss_and_grad, Matrix, ModelSpec, Parameters};
use swa_core::{Checkpoint, NamedTensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A checkpoint with 0..=max_tensors F64 tensors of random shape (rank 0..=3),
/// including empty and scalar tensors.
pub fn random_checkpoint(rng: &mut ChaCha8Rng, max_tensors: usize) -> Checkpoint {
    let n = rng.random_range(0..=max_tensors);
    let mut ckpt = Checkpoint::new();
    for i in 0..n {
        let rank = rng.random_range(0..=3);
        let shape: Vec<usize> = (0..rank).map(|_| rng.random_range(0..=4)).collect();
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.random_range(-1e3..1e3)).collect();
        ckpt.insert(NamedTensor::from_f64(format!("t{i}.w"), shape, data).unwrap()).unwrap();
    }
    ckpt
}

/// Checkpoints sharing one random layout, each with fresh values.
pub fn same_layout_checkpoints(rng: &mut ChaCha8Rng, count: usize) -> Vec<Checkpoint> {
    let layout = random_checkpoint(rng, 6);
    (0..count)
        .map(|_| {
            let mut c = Checkpoint::new();
            for t in layout.tensors() {
                let data = (0..t.numel()).map(|_| rng.random_range(-10.0..10.0)).collect();
                c.insert(NamedTensor::from_f64(t.name(), t.shape().to_vec(), data).unwrap()).unwrap();
            }
            c
        })
        .collect()
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect();
    Matrix::new(rows, cols, data).unwrap()
}

pub fn random_labels(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..classes)).collect()
}

/// Parameters with every trainable and BN-statistic entry randomized, so
/// tests do not depend on the zero/one initial values.
pub fn random_params(spec: &ModelSpec, seed: u64) -> Parameters {
    let mut p = Parameters::init(spec, seed).unwrap();
    let mut r = rng(seed ^ 0x9e37_79b9);
    for t in p.trainable_mut() {
        for v in t.iter_mut() {
            *v += r.random_range(-0.3..0.3);
        }
    }
    for bn in &mut p.bn {
        for v in &mut bn.running_mean {
            *v = r.random_range(-0.5..0.5);
        }
        for v in &mut bn.running_var {
            *v = r.random_range(0.5..2.0);
        }
    }
    p
}

/// Per-sample reference forward pass. `stats` supplies the BN mean and
/// variance per layer; `None` means use the running statistics.
pub fn reference_logits(p: &Parameters, x: &Matrix, stats: Option<&[(Vec<f64>, Vec<f64>)]>) -> Vec<Vec<f64>> {
    (0..x.rows)
        .map(|i| {
            let mut h: Vec<f64> = x.row(i).to_vec();
            for (l, d) in p.layers.iter().enumerate() {
                let mut z = vec![0.0; d.out_dim];
                for o in 0..d.out_dim {
                    let mut acc = if d.bias.is_empty() { 0.0 } else { d.bias[o] };
                    for k in 0..d.in_dim {
                        acc += d.weight[o * d.in_dim + k] * h[k];
                    }
                    z[o] = acc;
                }
                if l == p.layers.len() - 1 {
                    return z;
                }
                if let Some(bn) = p.bn.get(l) {
                    let (mean, var) = match stats {
                        Some(s) => (s[l].0.clone(), s[l].1.clone()),
                        None => (bn.running_mean.clone(), bn.running_var.clone()),
                    };
                    for j in 0..z.len() {
                        let denom = (var[j] + p.spec.bn_eps).sqrt();
                        let xhat = if denom > 0.0 { (z[j] - mean[j]) / denom } else { 0.0 };
                        z[j] = bn.gamma[j] * xhat + bn.beta[j];
                    }
                }
                h = z.iter().map(|v| v.max(0.0)).collect();
            }
            unreachable!()
        })
        .collect()
}

/// Cross-entropy of one logit row, computed with log-sum-exp.
pub fn reference_ce(logits: &[f64], y: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - logits[y]
}

/// Largest relative error between analytic and central-difference gradients
/// over every trainable entry. The denominator is floored at `floor`.
pub fn max_gradient_error(p: &Parameters, x: &Matrix, labels: &[usize], eps: f64, floor: f64) -> f64 {
    let (_, grads, _) = loss_and_grad(p, x, labels).unwrap();
    let mut worst: f64 = 0.0;
    let mut probe = p.clone();
    for (t, analytic) in grads.tensors.iter().enumerate() {
        for j in 0..analytic.len() {
            let orig = probe.trainable()[t][j];
            probe.trainable_mut()[t][j] = orig + eps;
            let up = loss_and_grad(&probe, x, labels).unwrap().0;
            probe.trainable_mut()[t][j] = orig - eps;
            let down = loss_and_grad(&probe, x, labels).unwrap().0;
            probe.trainable_mut()[t][j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst = worst.max(err);
        }
    }
    worst
}

pub fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let scale = x.abs().max(y.abs());
            if scale == 0.0 {
                0.0
            } else {
                (x - y).abs() / scale
            }
        })
        .fold(0.0, f64::max)
}

/// `‖a - b‖ / ‖b‖`, or `‖a - b‖` when `b` is zero.
pub fn norm_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let norm = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if norm == 0.0 {
        diff
    } else {
        diff / norm
    }
}
