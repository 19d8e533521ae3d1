//! Optimizer steps on flat parameter vectors: SGD with momentum, AdamW with
//! decoupled weight decay, and SAM layered over the SGD base step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adamw,
    SamOverSgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// SAM perturbation radius.
    #[serde(default)]
    pub rho: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn sgd_momentum(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::SgdMomentum,
            lr,
            momentum,
            weight_decay,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            rho: 0.0,
        }
    }

    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adamw,
            lr,
            momentum: 0.0,
            weight_decay,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            rho: 0.0,
        }
    }

    pub fn sam_over_sgd(lr: f64, momentum: f64, weight_decay: f64, rho: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::SamOverSgd,
            rho,
            ..Self::sgd_momentum(lr, momentum, weight_decay)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::InvalidArgument("lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument("momentum must be in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::InvalidArgument(
                "weight_decay must be non-negative".into(),
            ));
        }
        if self.kind == OptimizerKind::SamOverSgd && self.rho <= 0.0 {
            return Err(Error::InvalidArgument("sam requires rho > 0".into()));
        }
        if self.kind == OptimizerKind::Adamw {
            if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
                return Err(Error::InvalidArgument("betas must be in [0, 1)".into()));
            }
            if self.eps <= 0.0 {
                return Err(Error::InvalidArgument("eps must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Per-run optimizer state; shaped like the parameter vector it updates.
#[derive(Debug, Clone)]
pub enum OptimizerState {
    Sgd { velocity: Vec<f64> },
    Adamw { m: Vec<f64>, v: Vec<f64>, step: u64 },
}

impl OptimizerState {
    pub fn new(cfg: &OptimizerConfig, param_count: usize) -> Self {
        match cfg.kind {
            OptimizerKind::SgdMomentum | OptimizerKind::SamOverSgd => OptimizerState::Sgd {
                velocity: vec![0.0; param_count],
            },
            OptimizerKind::Adamw => OptimizerState::Adamw {
                m: vec![0.0; param_count],
                v: vec![0.0; param_count],
                step: 0,
            },
        }
    }
}

/// velocity <- momentum * velocity + grad;
/// params <- params - lr * velocity - lr * weight_decay * params.
pub fn sgd_momentum_step(
    state: &mut OptimizerState,
    params: &mut [f64],
    grad: &[f64],
    cfg: &OptimizerConfig,
) -> Result<()> {
    let OptimizerState::Sgd { velocity } = state else {
        return Err(Error::InvalidArgument("state is not an SGD state".into()));
    };
    check_shapes(params, grad, velocity.len())?;
    for i in 0..params.len() {
        velocity[i] = cfg.momentum * velocity[i] + grad[i];
        params[i] -= cfg.lr * velocity[i] + cfg.lr * cfg.weight_decay * params[i];
        if !params[i].is_finite() {
            return Err(Error::NonFinite(format!("sgd update at coordinate {i}")));
        }
    }
    Ok(())
}

/// Bias-corrected Adam moments with decoupled weight decay.
pub fn adamw_step(
    state: &mut OptimizerState,
    params: &mut [f64],
    grad: &[f64],
    cfg: &OptimizerConfig,
) -> Result<()> {
    let OptimizerState::Adamw { m, v, step } = state else {
        return Err(Error::InvalidArgument("state is not an AdamW state".into()));
    };
    check_shapes(params, grad, m.len())?;
    *step += 1;
    let t = *step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        params[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps) + cfg.lr * cfg.weight_decay * params[i];
        if !params[i].is_finite() {
            return Err(Error::NonFinite(format!("adamw update at coordinate {i}")));
        }
    }
    Ok(())
}

/// SAM ascent direction: rho * g / ||g||2, or zero when the gradient
/// vanishes (the step then reduces to the base step).
pub fn sam_perturbation(grad: &[f64], rho: f64) -> Vec<f64> {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm == 0.0 {
        return vec![0.0; grad.len()];
    }
    grad.iter().map(|g| rho * g / norm).collect()
}

/// Two-phase SAM step over the SGD-momentum base: evaluate the gradient at
/// the adversarially perturbed point params + rho * g/||g||, then apply the
/// base step at the original point using that gradient.
pub fn sam_step<F>(
    state: &mut OptimizerState,
    params: &mut [f64],
    mut grad_fn: F,
    cfg: &OptimizerConfig,
) -> Result<()>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let grad = grad_fn(params)?;
    check_shapes(params, &grad, params.len())?;
    let eps = sam_perturbation(&grad, cfg.rho);
    let ascent_grad = if eps.iter().all(|&e| e == 0.0) {
        grad
    } else {
        for (p, e) in params.iter_mut().zip(&eps) {
            *p += e;
        }
        let g = grad_fn(params);
        for (p, e) in params.iter_mut().zip(&eps) {
            *p -= e;
        }
        g?
    };
    sgd_momentum_step(state, params, &ascent_grad, cfg)
}

fn check_shapes(params: &[f64], grad: &[f64], state_len: usize) -> Result<()> {
    if params.len() != grad.len() || params.len() != state_len {
        return Err(Error::ShapeMismatch(format!(
            "params {} / grad {} / state {state_len}",
            params.len(),
            grad.len()
        )));
    }
    Ok(())
}
