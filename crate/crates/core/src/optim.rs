//! Adaptive first-order optimizers with decoupled weight decay and an
//! optional cosine learning-rate schedule.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::models::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    /// Bias-corrected squared-gradient scaling without momentum.
    RmsProp,
    /// Bias-corrected first and second moments.
    AdamW,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    /// First-moment decay (AdamW only).
    pub beta1: f64,
    /// Second-moment decay.
    pub beta2: f64,
    pub eps: f64,
    pub cosine: bool,
    /// Linear warm-up steps before the schedule starts.
    pub warmup: usize,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        OptimizerSpec {
            kind: OptimizerKind::RmsProp,
            lr: 1e-3,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            cosine: true,
            warmup: 0,
        }
    }
}

impl OptimizerSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
}

pub struct Optimizer {
    spec: OptimizerSpec,
    total_steps: usize,
    step: usize,
    slots: BTreeMap<String, Slot>,
}

impl Optimizer {
    /// `total_steps` sets the cosine horizon.
    pub fn new(spec: OptimizerSpec, total_steps: usize) -> Result<Self> {
        spec.validate()?;
        Ok(Optimizer {
            spec,
            total_steps,
            step: 0,
            slots: BTreeMap::new(),
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Learning rate used for step `t` (0-based).
    pub fn lr_at(&self, t: usize) -> f64 {
        let s = &self.spec;
        if t < s.warmup {
            return s.lr * (t + 1) as f64 / s.warmup as f64;
        }
        if !s.cosine || self.total_steps <= s.warmup {
            return s.lr;
        }
        let span = (self.total_steps - s.warmup) as f64;
        let progress = ((t - s.warmup) as f64 / span).min(1.0);
        0.5 * s.lr * (1.0 + libm::cos(core::f64::consts::PI * progress))
    }

    /// Update every parameter that has a gradient. Decay applies to
    /// matrices and kernels only (rank ≥ 2).
    pub fn step(&mut self, params: &ParamStore) -> Result<()> {
        let lr = self.lr_at(self.step);
        self.step += 1;
        let s = self.spec.clone();
        let t = self.step as i32;
        let bc1 = 1.0 - libm::pow(s.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(s.beta2, t as f64);
        for (name, p) in params.iter() {
            if !p.requires_grad() {
                continue;
            }
            let Some(g) = p.grad() else { continue };
            if let Some(bad) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("non-finite gradient in {name}[{bad}]")));
            }
            let slot = self.slots.entry(String::from(name)).or_insert_with(|| Slot {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
            });
            let decay = if p.rank() >= 2 { lr * s.weight_decay } else { 0.0 };
            p.update_leaf(|w| {
                for i in 0..w.len() {
                    let gi = g[i];
                    slot.v[i] = s.beta2 * slot.v[i] + (1.0 - s.beta2) * gi * gi;
                    let num = match s.kind {
                        OptimizerKind::AdamW => {
                            slot.m[i] = s.beta1 * slot.m[i] + (1.0 - s.beta1) * gi;
                            slot.m[i] / bc1
                        }
                        OptimizerKind::RmsProp => gi,
                    };
                    let denom = libm::sqrt(slot.v[i] / bc2) + s.eps;
                    w[i] -= decay * w[i] + lr * num / denom;
                }
            })?;
        }
        Ok(())
    }
}
