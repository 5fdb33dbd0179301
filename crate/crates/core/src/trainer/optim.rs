use serde::{Deserialize, Serialize};

use super::model::{Gradients, Parameters};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { momentum: 0.9, weight_decay: 1e-4 }
    }
}

/// One SGD step with heavy-ball momentum and L2 weight decay:
/// `buf = momentum * buf + grad + weight_decay * param; param -= lr * buf`.
/// BN running statistics are not trainable and stay untouched.
pub fn sgd_step(params: &mut Parameters, grads: &Gradients, lr: f64, momentum: f64, weight_decay: f64) {
    let mut velocity = std::mem::take(&mut params.velocity);
    for ((param, grad), buf) in params.trainable_mut().into_iter().zip(&grads.tensors).zip(&mut velocity) {
        for ((p, &g), b) in param.iter_mut().zip(grad).zip(buf.iter_mut()) {
            *b = momentum * *b + g + weight_decay * *p;
            *p -= lr * *b;
        }
    }
    params.velocity = velocity;
}
