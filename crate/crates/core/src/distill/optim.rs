use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;

fn default_lr() -> f32 {
    5e-3
}
fn default_weight_decay() -> f32 {
    0.01
}
fn default_beta1() -> f32 {
    0.9
}
fn default_beta2() -> f32 {
    0.999
}
fn default_eps() -> f32 {
    1e-8
}
fn default_warmup_epochs() -> usize {
    10
}
fn default_warmup_lr() -> f32 {
    1e-7
}

/// AdamW hyperparameters plus the warmup/cosine schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    #[serde(default = "default_lr")]
    pub lr: f32,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f32,
    #[serde(default = "default_beta1")]
    pub beta1: f32,
    #[serde(default = "default_beta2")]
    pub beta2: f32,
    #[serde(default = "default_eps")]
    pub eps: f32,
    #[serde(default = "default_warmup_epochs")]
    pub warmup_epochs: usize,
    #[serde(default = "default_warmup_lr")]
    pub warmup_lr: f32,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: default_lr(),
            weight_decay: default_weight_decay(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            warmup_epochs: default_warmup_epochs(),
            warmup_lr: default_warmup_lr(),
        }
    }
}

impl OptimConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let check = |name: &str, ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(format!("{prefix}.{name}"), msg))
            }
        };
        check(
            "lr",
            self.lr > 0.0 && self.lr.is_finite(),
            "must be positive",
        )?;
        check(
            "weight_decay",
            self.weight_decay >= 0.0 && self.weight_decay.is_finite(),
            "must be nonnegative",
        )?;
        check(
            "beta1",
            (0.0..1.0).contains(&self.beta1),
            "must lie in [0, 1)",
        )?;
        check(
            "beta2",
            (0.0..1.0).contains(&self.beta2),
            "must lie in [0, 1)",
        )?;
        check("eps", self.eps > 0.0, "must be positive")?;
        check(
            "warmup_lr",
            self.warmup_lr >= 0.0 && self.warmup_lr.is_finite(),
            "must be nonnegative",
        )
    }
}

/// Linear warmup from `warmup_lr` to `base_lr`, then cosine decay reaching
/// exactly zero at the final step `total_steps − 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f32,
    pub warmup_lr: f32,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn new(config: &OptimConfig, steps_per_epoch: u64, epochs: u64) -> Self {
        Self {
            base_lr: config.lr,
            warmup_lr: config.warmup_lr,
            warmup_steps: config.warmup_epochs as u64 * steps_per_epoch,
            total_steps: epochs * steps_per_epoch,
        }
    }

    pub fn at(&self, step: u64) -> f32 {
        let (base, warm) = (self.base_lr as f64, self.warmup_lr as f64);
        if step < self.warmup_steps {
            return (warm + (base - warm) * step as f64 / self.warmup_steps as f64) as f32;
        }
        let last = self.total_steps.saturating_sub(1);
        if step >= last && last > self.warmup_steps {
            return 0.0;
        }
        let span = last.saturating_sub(self.warmup_steps);
        if span == 0 {
            return self.base_lr;
        }
        let progress = (step - self.warmup_steps) as f64 / span as f64;
        (base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())) as f32
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
}

/// AdamW state for the trainable parameters of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub weight_decay: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(model: &Model, config: &OptimConfig) -> Self {
        let moments = model
            .parameters()
            .iter()
            .filter(|p| p.trainable)
            .map(|p| {
                let n = p.tensor.numel();
                (
                    p.name.clone(),
                    Moments {
                        m: vec![0.0; n],
                        v: vec![0.0; n],
                    },
                )
            })
            .collect();
        Self {
            weight_decay: config.weight_decay,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps,
            step: 0,
            moments,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Names of the parameters that carry moment state.
    pub fn tracked(&self) -> impl Iterator<Item = &str> {
        self.moments.keys().map(String::as_str)
    }

    /// One update with learning rate `lr`. `grads` is aligned with
    /// `model.parameters()`; every trainable entry must be `Some`.
    ///
    /// Decay is decoupled and applied first: `θ ← θ(1 − lr·wd)`, then
    /// `θ ← θ − lr·m̂/(√v̂ + eps)`.
    pub fn step(&mut self, model: &mut Model, grads: &[Option<Vec<f32>>], lr: f32) -> Result<()> {
        if grads.len() != model.parameters().len() {
            return Err(Error::Internal(format!(
                "{} gradients for {} parameters",
                grads.len(),
                model.parameters().len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - (self.beta1 as f64).powi(t);
        let bc2 = 1.0 - (self.beta2 as f64).powi(t);
        let decay = 1.0 - lr * self.weight_decay;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps as f64);
        for (p, g) in model.parameters_mut().iter_mut().zip(grads) {
            if !p.trainable {
                continue;
            }
            let g = g.as_ref().ok_or_else(|| {
                Error::Internal(format!("missing gradient for trainable {}", p.name))
            })?;
            let state = self
                .moments
                .get_mut(&p.name)
                .ok_or_else(|| Error::Internal(format!("no optimizer state for {}", p.name)))?;
            if g.len() != p.tensor.numel() || state.m.len() != g.len() {
                return Err(Error::Internal(format!(
                    "gradient length mismatch for {}",
                    p.name
                )));
            }
            for (((theta, &gi), m), v) in p
                .tensor
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(&mut state.m)
                .zip(&mut state.v)
            {
                *theta *= decay;
                *m = b1 * *m + (1.0 - b1) * gi;
                *v = b2 * *v + (1.0 - b2) * gi * gi;
                if *m != 0.0 {
                    let m_hat = *m as f64 / bc1;
                    let v_hat = *v as f64 / bc2;
                    *theta -= (lr as f64 * m_hat / (v_hat.sqrt() + eps)) as f32;
                }
            }
        }
        Ok(())
    }
}
