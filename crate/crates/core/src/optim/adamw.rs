use crate::model::{ModelParams, ParamInfo};
use crate::tensor::{Scalar, Tensor};

use super::{OptimError, Recipe};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl From<&Recipe> for AdamHyper {
    fn from(r: &Recipe) -> Self {
        Self {
            beta1: r.beta1,
            beta2: r.beta2,
            eps: r.eps,
            weight_decay: r.weight_decay,
        }
    }
}

/// First and second moments per parameter tensor, in parameter-tree order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Scalar> OptState<T> {
    pub fn new(params: &ModelParams<Tensor<T>>) -> Self {
        let zeros: Vec<Vec<T>> = params.entries().iter().map(|(_, p)| vec![T::zero(); p.numel()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One decoupled-decay Adam update of a single tensor at step `t >= 1`:
/// `theta <- theta (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps)`.
#[allow(clippy::too_many_arguments)]
pub fn adam_kernel<T: Scalar>(
    theta: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    t: u64,
    lr: f64,
    weight_decay: f64,
    h: &AdamHyper,
) {
    let (b1, b2) = (T::of(h.beta1), T::of(h.beta2));
    let (one, eps) = (T::one(), T::of(h.eps));
    let bc1 = T::of(1.0 - h.beta1.powi(t as i32));
    let bc2 = T::of(1.0 - h.beta2.powi(t as i32));
    let lr_t = T::of(lr);
    let decay = T::of(1.0 - lr * weight_decay);
    for i in 0..theta.len() {
        let gi = grad[i];
        m[i] = b1 * m[i] + (one - b1) * gi;
        v[i] = b2 * v[i] + (one - b2) * gi * gi;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        theta[i] = theta[i] * decay - lr_t * m_hat / (v_hat.sqrt() + eps);
    }
}

/// AdamW over a parameter tree. `grads` follows `params.entries()` order;
/// `lr_scale` gives a per-parameter multiplier of `lr` (layer-wise decay).
/// Biases and norm parameters are exempt from weight decay.
pub fn adamw_step<T: Scalar>(
    params: &mut ModelParams<Tensor<T>>,
    grads: &[&[T]],
    state: &mut OptState<T>,
    lr: f64,
    lr_scale: impl Fn(&ParamInfo) -> f64,
    hyper: &AdamHyper,
) -> Result<(), OptimError> {
    let mut entries = params.entries_mut();
    if entries.len() != grads.len() || entries.len() != state.m.len() || entries.len() != state.v.len() {
        return Err(OptimError::StateMismatch(format!(
            "{} parameters, {} gradients, {} moment slots",
            entries.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (info, p)) in entries.iter().enumerate() {
        let n = p.numel();
        if grads[i].len() != n || state.m[i].len() != n || state.v[i].len() != n {
            return Err(OptimError::StateMismatch(format!("{} has {n} elements", info.name)));
        }
    }
    state.t += 1;
    for (i, (info, p)) in entries.iter_mut().enumerate() {
        let wd = if info.decays() { hyper.weight_decay } else { 0.0 };
        adam_kernel(
            p.data_mut(),
            grads[i],
            &mut state.m[i],
            &mut state.v[i],
            state.t,
            lr * lr_scale(info),
            wd,
            hyper,
        );
    }
    Ok(())
}
