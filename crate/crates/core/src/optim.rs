//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Params;
use crate::nn::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self { learning_rate, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be >= 0, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("Adam epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// First and second moment estimates, shaped like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub m: Params<T>,
    pub v: Params<T>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, like: &Params<T>) -> Self {
        Self { config, m: Params::zeros_like(like), v: Params::zeros_like(like), t: 0 }
    }

    /// One update. Element math runs in f64 and is rounded back to `T`.
    pub fn step(&mut self, params: &mut Params<T>, grads: &Params<T>) -> Result<()> {
        if grads.layout != params.layout || self.m.layout != params.layout {
            return Err(Error::Dimension("gradient or moment layout does not match parameters".into()));
        }
        let AdamConfig { learning_rate: lr, beta1: b1, beta2: b2, eps } = self.config;
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (((p, g), m), v) in params
            .arrays
            .iter_mut()
            .zip(&grads.arrays)
            .zip(self.m.arrays.iter_mut())
            .zip(self.v.arrays.iter_mut())
        {
            for i in 0..p.len() {
                let gi = g[i].as_f64();
                let mi = b1 * m[i].as_f64() + (1.0 - b1) * gi;
                let vi = b2 * v[i].as_f64() + (1.0 - b2) * gi * gi;
                m[i] = T::of(mi);
                v[i] = T::of(vi);
                let upd = lr * (mi / c1) / ((vi / c2).sqrt() + eps);
                p[i] = T::of(p[i].as_f64() - upd);
            }
        }
        Ok(())
    }
}
