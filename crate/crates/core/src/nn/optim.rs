//! AdamW with decoupled weight decay, and global-norm gradient clipping.

use super::ParamSet;
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Adaptive-moment optimizer with decoupled weight decay.
#[derive(Debug, Clone, Copy)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW { lr, weight_decay, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    /// One update over every parameter. Gradients are read, never modified;
    /// the caller zeroes them. The shared step counter advances by one.
    pub fn step<S: Scalar>(&self, ps: &mut ParamSet<S>) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::Param(format!("learning rate must be positive, got {}", self.lr)));
        }
        ps.step += 1;
        let t = ps.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for e in ps.entries.iter_mut() {
            let n = e.value.len();
            for i in 0..n {
                let g = e.grad.data()[i].to_f64();
                let m = self.beta1 * e.m.data()[i].to_f64() + (1.0 - self.beta1) * g;
                let v = self.beta2 * e.v.data()[i].to_f64() + (1.0 - self.beta2) * g * g;
                e.m.data_mut()[i] = S::from_f64(m);
                e.v.data_mut()[i] = S::from_f64(v);
                let update = (m / bc1) / ((v / bc2).sqrt() + self.eps);
                let p = e.value.data()[i].to_f64();
                e.value.data_mut()[i] =
                    S::from_f64(p - self.lr * update - self.lr * self.weight_decay * p);
            }
        }
        Ok(())
    }
}

impl<S: Scalar> ParamSet<S> {
    /// Scale the gradients of `ids` so their global L2 norm does not exceed
    /// `max_norm`. Returns the scale applied (1.0 when under the bound).
    pub fn clip_grad_norm(&mut self, ids: &[super::ParamId], max_norm: f64) -> f64 {
        let norm = self.grad_norm(ids);
        if norm <= max_norm || norm == 0.0 {
            return 1.0;
        }
        let scale = max_norm / norm;
        let s = S::from_f64(scale);
        for &id in ids {
            for g in self.entries[id].grad.data_mut() {
                *g = *g * s;
            }
        }
        scale
    }
}
