use serde::{Deserialize, Serialize};

use crate::error::{Result, TdenError};
use crate::nn::{Group, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Linear learning-rate warmup length; 0 keeps the rate constant.
    pub warmup_steps: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(5.0),
            warmup_steps: 0,
        }
    }
}

impl AdamConfig {
    /// Learning rate for update number `step` (1-based).
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            self.lr
        } else {
            self.lr * (step as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

/// First and second moments mirroring the parameter shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        OptimState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }
    norm
}

/// Bias-corrected Adam update. Gradients are clipped first when configured.
/// Returns the pre-clip gradient norm.
pub fn adam_step(params: &mut ParamStore, grads: Vec<Vec<f64>>, state: &mut OptimState, cfg: &AdamConfig) -> Result<f64> {
    adam_step_scaled(params, grads, state, cfg, |_| 1.0)
}

/// [`adam_step`] with the learning rate of each parameter's group multiplied by `lr_scale(group)`.
pub fn adam_step_scaled(
    params: &mut ParamStore,
    mut grads: Vec<Vec<f64>>,
    state: &mut OptimState,
    cfg: &AdamConfig,
    lr_scale: impl Fn(Group) -> f64,
) -> Result<f64> {
    if grads.len() != params.len() {
        return Err(TdenError::contract(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.iter().any(|x| !x.is_finite()) {
            return Err(TdenError::Numeric(format!(
                "non-finite gradient in parameter `{}`",
                params.name(i)
            )));
        }
    }
    let norm = match cfg.clip_norm {
        Some(c) => clip_grad_norm(&mut grads, c),
        None => clip_grad_norm(&mut grads, f64::INFINITY),
    };
    state.step += 1;
    let t = state.step as i32;
    let lr = cfg.lr_at(state.step);
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, g) in grads.iter().enumerate() {
        let lr = lr * lr_scale(params.group(i));
        let p = params.tensor_mut(i).data_mut();
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for k in 0..g.len() {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
            let mhat = m[k] / bc1;
            let vhat = v[k] / bc2;
            p[k] -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(norm)
}
