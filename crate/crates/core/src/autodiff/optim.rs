use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};

/// Adam with bias correction. Moments are keyed by parameter path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: ParamStore,
    pub v: ParamStore,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: params.zeros_like(), v: params.zeros_like() }
    }

    /// Updates every parameter in `params`; paths missing from `grads` count as zero gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore, lr: f64) -> Result<()> {
        for (path, g) in grads.iter() {
            if !g.is_finite() {
                return Err(Error::numeric(format!("gradient of {path}")));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (path, p) in params.iter_mut() {
            let g = grads.get(path).ok().map(|t| t.values.as_slice());
            let m = self.m.get_mut(path)?;
            let v = self.v.get_mut(path)?;
            for i in 0..p.values.len() {
                let gi = g.map_or(0.0, |g| g[i]);
                m.values[i] = self.beta1 * m.values[i] + (1.0 - self.beta1) * gi;
                v.values[i] = self.beta2 * v.values[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m.values[i] / bc1;
                let vh = v.values[i] / bc2;
                p.values[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

pub fn adam_step(opt: &mut Adam, params: &mut ParamStore, grads: &ParamStore, lr: f64) -> Result<()> {
    opt.step(params, grads, lr)
}

/// Rescales `grads` so the global L2 norm is at most `max_norm`. Returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut ParamStore, max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::invalid(format!("max_norm must be positive, got {max_norm}")));
    }
    let norm = grads.l2_norm_sq().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for (_, t) in grads.iter_mut() {
            t.values.iter_mut().for_each(|v| *v *= k);
        }
    }
    Ok(norm)
}
