//! Adaptive-moment optimizer with decoupled weight decay, and global-norm clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::params::{self, ParamVisit};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamWConfig {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        Self { learning_rate, weight_decay, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moment buffers, aligned with the parameter traversal order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl AdamW {
    pub fn new<P: ParamVisit>(config: AdamWConfig, params: &P) -> Self {
        let shapes: Vec<Matrix> = params::named_params(params)
            .into_iter()
            .map(|(_, p)| Matrix::zeros(p.rows(), p.cols()))
            .collect();
        Self { config, step: 0, m: shapes.clone(), v: shapes }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// `w <- w - lr * (m_hat / (sqrt(v_hat) + eps) + wd * w)`.
    pub fn step<P: ParamVisit>(&mut self, weights: &mut P, grads: &P) -> Result<()> {
        let grads = params::named_params(grads);
        for (name, g) in &grads {
            if !g.is_finite() {
                return Err(Error::numeric(format!("gradient of parameter '{name}'")));
            }
        }
        let mut weights = params::named_params_mut(weights);
        if weights.len() != grads.len() || weights.len() != self.m.len() {
            return Err(Error::dim(
                "optimizer_step",
                format!("{} weights, {} gradients, {} buffers", weights.len(), grads.len(), self.m.len()),
            ));
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, ((name, w), (_, g))) in weights.iter_mut().zip(&grads).enumerate() {
            if !w.same_shape(g) || !w.same_shape(&self.m[i]) {
                return Err(Error::dim("optimizer_step", format!("shape of '{name}'")));
            }
            let m = self.m[i].as_mut_slice();
            let v = self.v[i].as_mut_slice();
            for (((w, &g), m), v) in w.as_mut_slice().iter_mut().zip(g.as_slice()).zip(m).zip(v) {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= c.learning_rate * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * *w);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` so that their global norm is at most `max_norm`; returns the norm
/// before clipping.
pub fn clip_global_norm<P: ParamVisit>(grads: &mut P, max_norm: f64) -> f64 {
    let norm = params::global_norm(grads);
    if norm > max_norm && norm.is_finite() {
        params::scale(grads, max_norm / norm);
    }
    norm
}
