//! SGD with momentum, AdamW, and learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    /// Model-pool and pre-training settings: lr 0.1, momentum 0.9, weight decay 0.001.
    fn default() -> Self {
        Self {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-3,
        }
    }
}

impl SgdConfig {
    /// Fine-tuning settings: lr 0.01, momentum 0.9, weight decay 5e-4.
    pub fn finetune() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

/// Momentum SGD with L2 weight decay folded into the velocity:
/// `v ← μ·v + g + wd·p`, `p ← p − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd<T: Real> {
    pub config: SgdConfig,
    pub velocity: Vec<Tensor<T>>,
    pub steps: u64,
}

fn check_slots<T: Real>(params: &[Tensor<T>], grads: &[Tensor<T>], slots: &[Tensor<T>], op: &'static str) -> Result<()> {
    if params.len() != grads.len() || params.len() != slots.len() {
        return Err(Error::Dimension {
            op,
            lhs: vec![params.len()],
            rhs: vec![grads.len(), slots.len()],
        });
    }
    for ((p, g), s) in params.iter().zip(grads).zip(slots) {
        p.check_same_shape(g, op)?;
        p.check_same_shape(s, op)?;
    }
    Ok(())
}

impl<T: Real> Sgd<T> {
    pub fn new(config: SgdConfig, params: &[Tensor<T>]) -> Self {
        Self {
            config,
            velocity: params.iter().map(Tensor::zeros_like).collect(),
            steps: 0,
        }
    }

    /// One update with learning rate `config.lr · lr_factor`.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], lr_factor: f64) -> Result<()> {
        check_slots(params, grads, &self.velocity, "sgd_step")?;
        let mu = T::from_f64(self.config.momentum);
        let wd = T::from_f64(self.config.weight_decay);
        let lr = T::from_f64(self.config.lr * lr_factor);
        for ((p, g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            let mut vel = v.to_vec();
            let mut par = p.to_vec();
            for ((vi, pi), &gi) in vel.iter_mut().zip(par.iter_mut()).zip(g.data()) {
                *vi = mu * *vi + gi + wd * *pi;
                *pi -= lr * *vi;
            }
            *v = Tensor::new(v.shape().to_vec(), vel)?;
            *p = Tensor::new(p.shape().to_vec(), par)?;
            p.ensure_finite("sgd_step")?;
        }
        self.steps += 1;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    /// Meta-optimizer settings: lr 1e-3, betas (0.9, 0.999), eps 1e-8, weight decay 0.01.
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// Adam with decoupled weight decay and bias correction.
#[derive(Debug, Clone)]
pub struct AdamW<T: Real> {
    pub config: AdamWConfig,
    pub first_moment: Vec<Tensor<T>>,
    pub second_moment: Vec<Tensor<T>>,
    pub steps: u64,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &[Tensor<T>]) -> Self {
        Self {
            config,
            first_moment: params.iter().map(Tensor::zeros_like).collect(),
            second_moment: params.iter().map(Tensor::zeros_like).collect(),
            steps: 0,
        }
    }

    /// One update; `lr_factor` comes from an external schedule and scales
    /// both the adaptive step and the decay.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], lr_factor: f64) -> Result<()> {
        check_slots(params, grads, &self.first_moment, "adamw_step")?;
        check_slots(params, grads, &self.second_moment, "adamw_step")?;
        self.steps += 1;
        let c = self.config;
        let t = self.steps as i32;
        let lr = c.lr * lr_factor;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let decay = T::from_f64(1.0 - lr * c.weight_decay);
        let step_size = T::from_f64(lr / bc1);
        let inv_bc2 = T::from_f64(1.0 / bc2);
        let eps = T::from_f64(c.eps);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut())
            .zip(self.second_moment.iter_mut())
        {
            let mut md = m.to_vec();
            let mut vd = v.to_vec();
            let mut pd = p.to_vec();
            for (((mi, vi), pi), &gi) in md.iter_mut().zip(vd.iter_mut()).zip(pd.iter_mut()).zip(g.data()) {
                *mi = b1 * *mi + (T::ONE - b1) * gi;
                *vi = b2 * *vi + (T::ONE - b2) * gi * gi;
                *pi *= decay;
                *pi -= step_size * *mi / ((*vi * inv_bc2).sqrt() + eps);
            }
            *m = Tensor::new(m.shape().to_vec(), md)?;
            *v = Tensor::new(v.shape().to_vec(), vd)?;
            *p = Tensor::new(p.shape().to_vec(), pd)?;
            p.ensure_finite("adamw_step")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    LinearDecay,
    Cosine,
}

/// Learning-rate multiplier in `[0, 1]` at `step` of `total`.
pub fn lr_schedule(kind: Schedule, step: usize, total: usize) -> Result<f64> {
    if total == 0 {
        return Err(Error::contract("schedule total must be positive"));
    }
    if step > total {
        return Err(Error::contract(format!("schedule step {step} beyond total {total}")));
    }
    let frac = step as f64 / total as f64;
    Ok(match kind {
        Schedule::Constant => 1.0,
        Schedule::LinearDecay => 1.0 - frac,
        Schedule::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()),
    })
}
