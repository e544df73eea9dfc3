//! Learning-rate schedule, global-norm clipping and the LAMB update.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelParameters, Scalar};

/// Optimizer hyperparameters, named after the pretraining recipe table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub initial_learning_rate: f64,
    pub final_learning_rate: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub lamb_beta1: f64,
    pub lamb_beta2: f64,
    pub lamb_epsilon: f64,
    pub gradient_clipping: f64,
}

impl OptimConfig {
    pub fn small() -> Self {
        OptimConfig {
            initial_learning_rate: 0.0141,
            final_learning_rate: 0.00141,
            warmup_ratio: 0.016,
            weight_decay: 0.1,
            lamb_beta1: 0.9,
            lamb_beta2: 0.98,
            lamb_epsilon: 1e-8,
            gradient_clipping: 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(m.to_string()));
        if !(self.initial_learning_rate > 0.0) || self.final_learning_rate < 0.0 {
            return bad("learning rates must be positive");
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return bad("warmup_ratio outside [0, 1)");
        }
        if !(0.0..1.0).contains(&self.lamb_beta1) || !(0.0..1.0).contains(&self.lamb_beta2) {
            return bad("LAMB betas outside [0, 1)");
        }
        if !(self.lamb_epsilon > 0.0) || self.weight_decay < 0.0 || !(self.gradient_clipping > 0.0)
        {
            return bad("epsilon and clipping must be positive, weight decay non-negative");
        }
        Ok(())
    }

    pub fn warmup_steps(&self, total_steps: u64) -> u64 {
        (self.warmup_ratio * total_steps as f64).round() as u64
    }

    /// Linear warmup from 0 to the initial rate, then cosine decay to the
    /// final rate at `total_steps`.
    pub fn learning_rate(&self, step: u64, total_steps: u64) -> Result<f64> {
        if step > total_steps {
            return Err(Error::input(format!(
                "step {step} beyond total_steps {total_steps}"
            )));
        }
        let warmup = self.warmup_steps(total_steps);
        let peak = self.initial_learning_rate;
        if step < warmup {
            return Ok(peak * step as f64 / warmup as f64);
        }
        if total_steps == warmup {
            return Ok(peak);
        }
        let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        Ok(self.final_learning_rate + (peak - self.final_learning_rate) * cosine)
    }
}

/// Scale every gradient by `max_norm / norm` when the global L2 norm exceeds
/// `max_norm`. Returns the norm before clipping.
pub fn clip_gradients<F: Scalar>(grads: &mut ModelParameters<F>, max_norm: f64) -> Result<f64> {
    let norm = grads.global_norm();
    if !norm.is_finite() {
        return Err(Error::Numeric(format!("gradient norm is {norm}")));
    }
    if norm > max_norm {
        grads.scale(F::c(max_norm / norm));
    }
    Ok(norm)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LambHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl From<&OptimConfig> for LambHyper {
    fn from(c: &OptimConfig) -> Self {
        LambHyper {
            beta1: c.lamb_beta1,
            beta2: c.lamb_beta2,
            epsilon: c.lamb_epsilon,
            weight_decay: c.weight_decay,
        }
    }
}

/// Moments for every parameter tensor and the number of updates taken.
#[derive(Clone, Debug, PartialEq)]
pub struct LambState<F> {
    pub m: ModelParameters<F>,
    pub v: ModelParameters<F>,
    pub step: u64,
}

impl<F: Scalar> LambState<F> {
    pub fn new(params: &ModelParameters<F>) -> Self {
        LambState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One LAMB update of a single tensor. `step` is the 1-based update count.
#[allow(clippy::too_many_arguments)]
pub fn lamb_update_tensor<F: Scalar>(
    param: &mut [F],
    grad: &[F],
    m: &mut [F],
    v: &mut [F],
    step: u64,
    hyper: &LambHyper,
    lr: f64,
    decay: bool,
) -> Result<()> {
    let b1 = F::c(hyper.beta1);
    let b2 = F::c(hyper.beta2);
    let one = F::one();
    let c1 = F::c(1.0 - hyper.beta1.powf(step as f64));
    let c2 = F::c(1.0 - hyper.beta2.powf(step as f64));
    let eps = F::c(hyper.epsilon);
    let wd = F::c(if decay { hyper.weight_decay } else { 0.0 });

    let mut update = Vec::with_capacity(param.len());
    let mut p_sq = 0.0f64;
    let mut u_sq = 0.0f64;
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        let u = m_hat / (v_hat.sqrt() + eps) + wd * param[i];
        let p = param[i].to_f64().unwrap_or(f64::NAN);
        let uf = u.to_f64().unwrap_or(f64::NAN);
        p_sq += p * p;
        u_sq += uf * uf;
        update.push(u);
    }
    let p_norm = p_sq.sqrt();
    let u_norm = u_sq.sqrt();
    if !p_norm.is_finite() || !u_norm.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite LAMB update (|p| = {p_norm}, |u| = {u_norm})"
        )));
    }
    let trust = if p_norm > 0.0 && u_norm > 0.0 {
        p_norm / u_norm
    } else {
        1.0
    };
    let rate = F::c(lr * trust);
    for (p, u) in param.iter_mut().zip(update) {
        *p -= rate * u;
    }
    Ok(())
}

/// LAMB over every named tensor with a per-tensor trust ratio. Layer
/// weights and biases are excluded from weight decay.
pub fn lamb_step<F: Scalar>(
    params: &mut ModelParameters<F>,
    grads: &ModelParameters<F>,
    state: &mut LambState<F>,
    hyper: &LambHyper,
    lr: f64,
) -> Result<()> {
    state.step += 1;
    let step = state.step;
    let roles: Vec<bool> = params.tensors().iter().map(|t| t.1.decays()).collect();
    let g = grads.tensors();
    let ps = params.tensors_mut();
    let ms = state.m.tensors_mut();
    let vs = state.v.tensors_mut();
    for ((((p, (_, _, _, g)), m), v), decay) in ps.into_iter().zip(g).zip(ms).zip(vs).zip(roles) {
        lamb_update_tensor(p, g, m, v, step, hyper, lr, decay)?;
    }
    Ok(())
}
