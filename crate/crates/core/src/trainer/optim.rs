//! AdamW with decoupled weight decay and the warmup + cosine schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimSpec {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub warmup_epochs: usize,
    pub warmup_lr: f64,
    pub total_epochs: usize,
    pub batch_size: usize,
}

impl Default for OptimSpec {
    /// lr 1e-3, weight decay 1e-4, 100 epochs with 10 warmup epochs
    /// starting at 1e-7.
    fn default() -> Self {
        Self {
            base_lr: 1e-3,
            weight_decay: 1e-4,
            betas: (0.9, 0.999),
            eps: 1e-8,
            warmup_epochs: 10,
            warmup_lr: 1e-7,
            total_epochs: 100,
            batch_size: 32,
        }
    }
}

impl OptimSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("base_lr", self.base_lr),
            ("warmup_lr", self.warmup_lr),
            ("eps", self.eps),
        ];
        for (name, v) in positive {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::Config(format!("optim.{name} must be positive, got {v}")));
            }
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "optim.weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::Config(format!(
                "optim.betas must lie in [0, 1), got ({b1}, {b2})"
            )));
        }
        if self.total_epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "optim.total_epochs and optim.batch_size must be positive".into(),
            ));
        }
        if self.warmup_epochs > self.total_epochs {
            return Err(Error::Config(format!(
                "warmup_epochs {} exceeds total_epochs {}",
                self.warmup_epochs, self.total_epochs
            )));
        }
        Ok(())
    }
}

/// Learning rate at optimizer step `step` (0-based). Linear ramp from
/// `warmup_lr` to `base_lr` over the warmup steps, then cosine decay that
/// reaches 0 on the last step of the run.
pub fn lr_at(step: usize, spec: &OptimSpec, steps_per_epoch: usize) -> f64 {
    let warmup = spec.warmup_epochs * steps_per_epoch;
    let last = (spec.total_epochs * steps_per_epoch).saturating_sub(1);
    if step < warmup {
        return spec.warmup_lr + (spec.base_lr - spec.warmup_lr) * step as f64 / warmup as f64;
    }
    if last <= warmup {
        return spec.base_lr;
    }
    let progress = ((step - warmup) as f64 / (last - warmup) as f64).min(1.0);
    0.5 * spec.base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Debug, Clone)]
struct Moments<F> {
    m: Vec<F>,
    v: Vec<F>,
    t: u64,
}

/// Per-parameter first/second moments, created on a parameter's first
/// update. Frozen parameters never get an entry.
#[derive(Debug, Clone, Default)]
pub struct AdamState<F> {
    slots: Vec<Option<Moments<F>>>,
}

impl<F: Scalar> AdamState<F> {
    pub fn new() -> Self {
        Self { slots: Vec::new() }
    }

    /// Number of parameters with allocated moments.
    pub fn tracked(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }

    pub fn has_moments(&self, id: crate::tensor::ParamId) -> bool {
        matches!(self.slots.get(id.0), Some(Some(_)))
    }

    /// Update count of a parameter.
    pub fn step_count(&self, id: crate::tensor::ParamId) -> u64 {
        self.slots.get(id.0).and_then(|s| s.as_ref()).map_or(0, |m| m.t)
    }
}

/// One AdamW update over every trainable parameter holding a gradient:
/// `w ← w·(1 − lr·wd)`, then the bias-corrected Adam step.
pub fn adamw_step<F: Scalar>(
    store: &mut ParamStore<F>,
    state: &mut AdamState<F>,
    spec: &OptimSpec,
    lr: f64,
) -> Result<()> {
    let (b1, b2) = spec.betas;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if store.is_frozen(id) {
            continue;
        }
        let tensor = store.get_mut(id);
        let (grad, data) = tensor.grad_and_data_mut();
        let Some(grad) = grad else { continue };
        if grad.len() != data.len() {
            return Err(Error::dim("adamw_step", &[data.len()], &[grad.len()]));
        }
        if state.slots.len() <= id.0 {
            state.slots.resize_with(id.0 + 1, || None);
        }
        let mom = state.slots[id.0].get_or_insert_with(|| Moments {
            m: vec![F::zero(); data.len()],
            v: vec![F::zero(); data.len()],
            t: 0,
        });
        mom.t += 1;
        let decay = F::from_f64(1.0 - lr * spec.weight_decay);
        let bc1 = F::from_f64(1.0 - b1.powi(mom.t as i32));
        let bc2 = F::from_f64(1.0 - b2.powi(mom.t as i32));
        let (b1f, b2f) = (F::from_f64(b1), F::from_f64(b2));
        let (c1, c2) = (F::from_f64(1.0 - b1), F::from_f64(1.0 - b2));
        let (lrf, eps) = (F::from_f64(lr), F::from_f64(spec.eps));
        for i in 0..data.len() {
            let g = grad[i];
            data[i] *= decay;
            mom.m[i] = b1f * mom.m[i] + c1 * g;
            mom.v[i] = b2f * mom.v[i] + c2 * g * g;
            let m_hat = mom.m[i] / bc1;
            let v_hat = mom.v[i] / bc2;
            data[i] -= lrf * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
