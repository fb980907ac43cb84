//! AdamW with decoupled weight decay and a cosine learning-rate schedule.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Grads, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: usize,
    pub min_lr: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-3,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            warmup_steps: 0,
            min_lr: 0.0,
            clip_norm: 0.0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.min_lr >= 0.0
            && self.min_lr <= self.lr
            && self.clip_norm >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config("optimizer: need lr > 0, 0 <= min_lr <= lr, betas in [0,1), eps > 0".into()))
        }
    }
}

/// Linear warmup then half-cosine decay from `base` to `min_lr` at the last step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub base: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn new(cfg: &OptimConfig, total_steps: usize) -> Self {
        CosineSchedule {
            base: cfg.lr,
            min_lr: cfg.min_lr,
            warmup_steps: cfg.warmup_steps.min(total_steps),
            total_steps,
        }
    }

    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps + 1);
        if span == 0 {
            return self.base;
        }
        let t = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.min_lr + (self.base - self.min_lr) * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * t))
    }
}

/// Matrices named `*.weight` are decayed; biases, norms, tokens and scalar
/// fusion weights are not.
pub fn decays(name: &str, value: &Tensor) -> bool {
    name.ends_with(".weight") && value.rows() > 1 && value.cols() > 1
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: OptimConfig,
    step: u64,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl AdamW {
    pub fn new(cfg: OptimConfig) -> Self {
        AdamW {
            cfg,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update at learning rate `lr`. Parameters without a gradient keep
    /// their value and moments.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads, lr: f64) {
        let n = params.len();
        self.m.resize(n, None);
        self.v.resize(n, None);
        self.step += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - libm::pow(c.beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(c.beta2, self.step as f64);
        let norm = grads.global_norm();
        let clip = if c.clip_norm > 0.0 && norm > c.clip_norm {
            c.clip_norm / norm
        } else {
            1.0
        };
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let decay = decays(params.name(id), params.get(id));
            let (rows, cols) = g.shape();
            let m = self.m[id.0].get_or_insert_with(|| Tensor::zeros(rows, cols));
            let v = self.v[id.0].get_or_insert_with(|| Tensor::zeros(rows, cols));
            let p = params.get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i] * clip;
                let mi = c.beta1 * m.data()[i] + (1.0 - c.beta1) * gi;
                let vi = c.beta2 * v.data()[i] + (1.0 - c.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                if decay {
                    p[i] -= lr * c.weight_decay * p[i];
                }
                p[i] -= lr * (mi / bc1) / (libm::sqrt(vi / bc2) + c.eps);
            }
        }
    }
}
