use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub hyper: AdamW,
    pub step: u64,
    /// first and second moments per parameter
    pub moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl OptimState {
    pub fn new(hyper: AdamW) -> Self {
        Self {
            hyper,
            step: 0,
            moments: BTreeMap::new(),
        }
    }
}

/// One decoupled-weight-decay Adam update of every parameter named in `grads`.
///
/// All gradients are checked before anything is modified.
pub fn adamw_step(
    store: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimState,
    lr: f64,
) -> Result<()> {
    let step = state.step + 1;
    for (name, g) in grads {
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient {
                param: name.clone(),
                step,
            });
        }
        let p = store.get(name)?;
        if p.shape() != g.shape() {
            return Err(Error::ParamShape {
                name: name.clone(),
                expected: p.shape().to_vec(),
                found: g.shape().to_vec(),
            });
        }
    }
    state.step = step;
    let h = state.hyper;
    let bc1 = 1.0 - h.beta1.powi(step as i32);
    let bc2 = 1.0 - h.beta2.powi(step as i32);
    for (name, g) in grads {
        let p = store.get_mut(name)?;
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
        let (md, vd) = (m.data_mut(), v.data_mut());
        for (i, (pi, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            md[i] = h.beta1 * md[i] + (1.0 - h.beta1) * gi;
            vd[i] = h.beta2 * vd[i] + (1.0 - h.beta2) * gi * gi;
            let m_hat = md[i] / bc1;
            let v_hat = vd[i] / bc2;
            *pi -= lr * h.weight_decay * *pi + lr * m_hat / (v_hat.sqrt() + h.eps);
        }
    }
    Ok(())
}

/// Linear warmup from zero to `base_lr * batch / 256`, then cosine decay to zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub steps_per_epoch: usize,
    pub batch: usize,
}

impl Schedule {
    pub fn peak(&self) -> f64 {
        self.base_lr * self.batch as f64 / 256.0
    }

    pub fn warmup_steps(&self) -> usize {
        self.warmup_epochs.min(self.total_epochs) * self.steps_per_epoch
    }

    pub fn total_steps(&self) -> usize {
        self.total_epochs * self.steps_per_epoch
    }

    pub fn lr_at(&self, step: usize) -> Result<f64> {
        lr_at(self, step)
    }
}

pub fn lr_at(s: &Schedule, step: usize) -> Result<f64> {
    let total = s.total_steps();
    if step > total {
        return Err(Error::contract(format!("step {step} beyond schedule end {total}")));
    }
    let warm = s.warmup_steps();
    if step < warm {
        return Ok(s.peak() * step as f64 / warm as f64);
    }
    let span = total - warm;
    let u = if span == 0 { 1.0 } else { (step - warm) as f64 / span as f64 };
    Ok(s.peak() * 0.5 * (1.0 + (std::f64::consts::PI * u).cos()))
}
