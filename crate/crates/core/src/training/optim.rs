//! Adam with linear warmup, inverse-sqrt decay and global gradient clipping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Params;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimConfig {
    /// Peak learning rate, reached at the end of warmup.
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_warmup")]
    pub warmup: usize,
    /// Global gradient-norm ceiling; gradients are rescaled above it.
    #[serde(default = "default_clip")]
    pub clip: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_lr() -> f64 {
    3e-4
}
fn default_warmup() -> usize {
    400
}
fn default_clip() -> f64 {
    1.0
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.98
}
fn default_eps() -> f64 {
    1e-9
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: default_lr(),
            warmup: default_warmup(),
            clip: default_clip(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::config("learning rate must be positive"));
        }
        if self.warmup == 0 {
            return Err(Error::config("warmup must be at least 1 step"));
        }
        if self.clip <= 0.0 {
            return Err(Error::config("gradient clip must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("betas must lie in [0, 1)"));
        }
        Ok(())
    }

    /// lr * min(step/warmup, sqrt(warmup/step)): linear ramp to the peak,
    /// then inverse square-root decay. `step` counts from 1.
    pub fn lr_at(&self, step: usize) -> f64 {
        let s = step.max(1) as f64;
        let w = self.warmup as f64;
        self.lr * (s / w).min((w / s).sqrt())
    }
}

/// First and second moment estimates for one parameter tensor. Kept in f64
/// regardless of the model scalar so updates round identically across runs.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: OptimConfig,
    /// Completed update steps.
    pub step: usize,
    pub state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(cfg: OptimConfig) -> Self {
        Adam { cfg, step: 0, state: BTreeMap::new() }
    }

    /// One update over every parameter in the visitor. Returns (lr used,
    /// pre-clip gradient norm).
    pub fn apply<S: Scalar>(&mut self, model: &mut dyn Params<S>) -> (f64, f64) {
        let mut sq = 0.0;
        model.visit("", &mut |p| {
            sq += p.grad.iter().map(|g| g.as_f64().powi(2)).sum::<f64>();
        });
        let norm = sq.sqrt();
        let rescale = if norm > self.cfg.clip { self.cfg.clip / norm } else { 1.0 };

        self.step += 1;
        let lr = self.cfg.lr_at(self.step);
        let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let state = &mut self.state;
        model.visit("", &mut |p| {
            let entry = state.entry(p.name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; p.value.len()],
                v: vec![0.0; p.value.len()],
            });
            assert_eq!(entry.m.len(), p.value.len(), "shape drift for {}", p.name);
            for i in 0..p.value.len() {
                let g = p.grad[i].as_f64() * rescale;
                entry.m[i] = b1 * entry.m[i] + (1.0 - b1) * g;
                entry.v[i] = b2 * entry.v[i] + (1.0 - b2) * g * g;
                let mhat = entry.m[i] / bc1;
                let vhat = entry.v[i] / bc2;
                let updated = p.value[i].as_f64() - lr * mhat / (vhat.sqrt() + eps);
                p.value[i] = S::of_f64(updated);
            }
        });
        (lr, norm)
    }
}
