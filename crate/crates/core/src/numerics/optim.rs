//! AdamW: Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use super::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

impl AdamW {
    /// Apply one update using the gradients currently stored in `params`.
    ///
    /// `step` is 1-based and drives bias correction. Bias correction is folded
    /// into the step size, so `eps` is added to the uncorrected `sqrt(v)`.
    pub fn step(&self, params: &mut ParamStore, step: u64) {
        assert!(step >= 1, "AdamW step counter is 1-based");
        let bc1 = 1.0 - self.beta1.powi(step as i32);
        let bc2 = 1.0 - self.beta2.powi(step as i32);
        let lr_t = self.lr * bc2.sqrt() / bc1;
        let decay = 1.0 - self.lr * self.weight_decay;
        for p in params.iter_mut() {
            let value = p.value.data_mut();
            let (g, m, v) = (p.grad.data(), p.m.data_mut(), p.v.data_mut());
            for i in 0..value.len() {
                value[i] *= decay;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                value[i] -= lr_t * m[i] / (v[i].sqrt() + self.eps);
            }
        }
    }
}

/// Scale all gradients so their joint L2 norm is at most `max_norm`.
pub fn clip_grad_norm(params: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = params.grad_norm();
    if norm > max_norm {
        let s = max_norm / norm;
        for p in params.iter_mut() {
            for g in p.grad.data_mut() {
                *g *= s;
            }
        }
    }
    norm
}
