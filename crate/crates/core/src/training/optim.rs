//! AdamW with global-norm clipping and a warmup + cosine schedule.

use serde::{Deserialize, Serialize};

use crate::error::{FluidError, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: u64,
    /// Step at which the cosine reaches zero. When not past `warmup_steps`
    /// the rate stays at `lr` after warmup.
    pub horizon: u64,
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            weight_decay: 0.04,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 500,
            horizon: 8000,
            clip_norm: 1.0,
        }
    }
}

impl OptimConfig {
    /// Settings for 1000-window runs of the desk model.
    pub fn desk() -> Self {
        Self { lr: 3e-3, warmup_steps: 50, horizon: 1000, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.clip_norm > 0.0;
        if ok {
            Ok(())
        } else {
            Err(FluidError::Config("invalid optimizer settings".into()))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    /// Completed optimizer steps.
    pub step: u64,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(n: usize) -> Self {
        Self { m: vec![T::zero(); n], v: vec![T::zero(); n], step: 0 }
    }
}

/// Linear warmup from 0, then half-cosine decay to 0 at `horizon`.
pub fn lr_at(step: u64, cfg: &OptimConfig) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.lr * step as f64 / cfg.warmup_steps as f64;
    }
    if cfg.horizon <= cfg.warmup_steps {
        return cfg.lr;
    }
    let progress = ((step - cfg.warmup_steps) as f64 / (cfg.horizon - cfg.warmup_steps) as f64).min(1.0);
    cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

pub fn global_norm<T: Scalar>(g: &[T]) -> f64 {
    g.iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>().sqrt()
}

/// One AdamW update with the rate of the step being taken. Returns the
/// pre-clip gradient norm.
pub fn optimizer_step<T: Scalar>(params: &mut [T], grads: &[T], state: &mut OptimState<T>, cfg: &OptimConfig) -> f64 {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    let norm = global_norm(grads);
    let clip = if norm > cfg.clip_norm { T::lit(cfg.clip_norm / norm) } else { T::one() };
    state.step += 1;
    let t = state.step as i32;
    let lr = T::lit(lr_at(state.step, cfg));
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let bc1 = T::one() - T::lit(cfg.beta1.powi(t));
    let bc2 = T::one() - T::lit(cfg.beta2.powi(t));
    let decay = T::one() - lr * T::lit(cfg.weight_decay);
    let eps = T::lit(cfg.eps);
    for i in 0..params.len() {
        let g = grads[i] * clip;
        state.m[i] = b1 * state.m[i] + (T::one() - b1) * g;
        state.v[i] = b2 * state.v[i] + (T::one() - b2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] = params[i] * decay - lr * m_hat / (v_hat.sqrt() + eps);
    }
    norm
}
