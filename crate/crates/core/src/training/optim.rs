//! AdamW with decoupled weight decay, and the warmup + cosine schedule.

use crate::numkit::{ParamRegistry, Tensor};

use super::TrainError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Optimizer state: first and second moments per registered parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub steps: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(reg: &ParamRegistry, config: AdamWConfig) -> Self {
        let zeros = |reg: &ParamRegistry| reg.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            steps: 0,
            m: zeros(reg),
            v: zeros(reg),
        }
    }
}

/// One update with learning rate `lr`, then zeroes all gradients. A non-finite
/// gradient aborts before any parameter moves.
pub fn adamw_step(reg: &mut ParamRegistry, opt: &mut AdamW, lr: f64) -> Result<(), TrainError> {
    assert_eq!(reg.len(), opt.m.len(), "optimizer built for a different registry");
    for (id, name, _) in reg.iter() {
        if !reg.grad(id).is_finite() {
            return Err(TrainError::NonFiniteGradient(name.to_string()));
        }
    }
    opt.steps += 1;
    let AdamWConfig {
        beta1,
        beta2,
        eps,
        weight_decay,
    } = opt.config;
    let bc1 = 1.0 - beta1.powf(opt.steps as f64);
    let bc2 = 1.0 - beta2.powf(opt.steps as f64);
    let shrink = 1.0 - lr * weight_decay;
    let ids: Vec<_> = reg.ids().collect();
    for id in ids {
        let k = id.index();
        let (m, v) = (opt.m[k].data_mut(), opt.v[k].data_mut());
        let (value, grad) = reg.value_mut_and_grad(id);
        for (((theta, g), m), v) in value.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *theta *= shrink;
            *theta -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
        }
    }
    reg.zero_grads();
    Ok(())
}

/// Linear warmup from 0 to `base_lr` over `round(warmup_frac · total)` steps,
/// then cosine decay to 0 at `total_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, base_lr: f64, warmup_frac: f64) -> f64 {
    let step = step.min(total_steps);
    let warmup = ((warmup_frac * total_steps as f64).round() as usize).min(total_steps);
    if step < warmup {
        return base_lr * step as f64 / warmup as f64;
    }
    if total_steps == warmup {
        return base_lr;
    }
    let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}
