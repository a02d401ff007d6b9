//! AdamW with decoupled weight decay, cosine learning-rate annealing, and
//! optional global-norm gradient clipping.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Cosine annealing schedule from `lr_start` down to `lr_end`.
#[derive(Clone, Copy, Debug)]
pub struct LrSchedule {
    pub lr_start: f64,
    pub lr_end: f64,
    pub total_iters: u64,
}

impl LrSchedule {
    pub fn new(lr_start: f64, lr_end: f64, total_iters: u64) -> Result<Self> {
        if total_iters == 0 {
            return Err(Error::Config("lr schedule needs total_iters >= 1".into()));
        }
        Ok(LrSchedule {
            lr_start,
            lr_end,
            total_iters,
        })
    }
}

/// lr(t) = lr_end + 0.5 (lr_start - lr_end)(1 + cos(pi t / T)).
pub fn cosine_lr(t: u64, sched: &LrSchedule) -> Result<f64> {
    if t > sched.total_iters {
        return Err(Error::arg(
            "cosine_lr",
            format!("iteration {} beyond total {}", t, sched.total_iters),
        ));
    }
    let frac = t as f64 / sched.total_iters as f64;
    Ok(sched.lr_end + 0.5 * (sched.lr_start - sched.lr_end) * (1.0 + (std::f64::consts::PI * frac).cos()))
}

/// Per-parameter first/second moment buffers plus the shared hyperparameters.
pub struct AdamWState<T: Scalar> {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub lr: f64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamWState<T> {
    pub fn new(params: &[Tensor<T>], beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
            return Err(Error::Config("adamw betas must lie in [0, 1)".into()));
        }
        Ok(AdamWState {
            step: 0,
            beta1,
            beta2,
            eps,
            weight_decay,
            lr: 0.0,
            m: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
        })
    }
}

/// Decoupled AdamW update for one scalar element. Bias correction uses the
/// already incremented step count; decay applies to the parameter itself.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update_element(
    param: f64,
    grad: f64,
    m: &mut f64,
    v: &mut f64,
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    lr: f64,
) -> f64 {
    *m = beta1 * *m + (1.0 - beta1) * grad;
    *v = beta2 * *v + (1.0 - beta2) * grad * grad;
    let m_hat = *m / (1.0 - beta1.powi(step as i32));
    let v_hat = *v / (1.0 - beta2.powi(step as i32));
    param - lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * param)
}

/// One optimizer step over `params` using the gradients accumulated on them.
pub fn adamw_step<T: Scalar>(params: &[Tensor<T>], state: &mut AdamWState<T>, lr: f64) -> Result<()> {
    if params.len() != state.m.len() {
        return Err(Error::arg(
            "adamw_step",
            format!("state tracks {} params, got {}", state.m.len(), params.len()),
        ));
    }
    state.step += 1;
    state.lr = lr;
    let bc1 = 1.0 - state.beta1.powi(state.step as i32);
    let bc2 = 1.0 - state.beta2.powi(state.step as i32);
    for (idx, p) in params.iter().enumerate() {
        let grad = match p.grad() {
            Some(g) => g,
            None => continue,
        };
        if grad.len() != p.numel() {
            return Err(Error::shape("adamw_step", "gradient/parameter length mismatch"));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { op: "adamw_step" });
        }
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        let mut data = p.data_mut();
        let b1 = T::from_f64(state.beta1);
        let b2 = T::from_f64(state.beta2);
        let one = T::one();
        let eps = T::from_f64(state.eps);
        let lr_t = T::from_f64(lr);
        let wd = T::from_f64(state.weight_decay);
        let inv_bc1 = T::from_f64(1.0 / bc1);
        let inv_bc2 = T::from_f64(1.0 / bc2);
        for i in 0..data.len() {
            let g = grad[i];
            m[i] = b1 * m[i] + (one - b1) * g;
            v[i] = b2 * v[i] + (one - b2) * g * g;
            let m_hat = m[i] * inv_bc1;
            let v_hat = v[i] * inv_bc2;
            data[i] = data[i] - lr_t * (m_hat / (v_hat.sqrt() + eps) + wd * data[i]);
        }
    }
    Ok(())
}

/// Scale all gradients by max_norm / norm when the global norm exceeds max_norm.
pub fn clip_global_norm<T: Scalar>(params: &[Tensor<T>], max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for p in params {
        if let Some(g) = p.grad() {
            for v in g {
                let v = v.into_f64();
                sq += v * v;
            }
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = T::from_f64(max_norm / norm);
        for p in params {
            let scaled = p.grad().map(|g| g.into_iter().map(|v| v * scale).collect());
            if let Some(scaled) = scaled {
                p.clear_grad();
                p.accumulate_grad(scaled);
            }
        }
    }
    norm
}

pub fn clear_grads<T: Scalar>(params: &[Tensor<T>]) {
    for p in params {
        p.clear_grad();
    }
}
