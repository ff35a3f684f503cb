//! Adam optimizer and the finite-difference gradient oracle.

use crate::error::{Error, Result};
use crate::tape::Parameter;
use crate::tensor::Tensor;

/// Per-parameter Adam moments.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Tensor,
    pub v: Tensor,
    pub t: u64,
}

impl AdamState {
    pub fn for_param(p: &Parameter) -> Self {
        Self {
            m: Tensor::zeros(p.value.shape().to_vec()),
            v: Tensor::zeros(p.value.shape().to_vec()),
            t: 0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update from `param.grad`.
pub fn adam_step(param: &mut Parameter, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if cfg.lr <= 0.0 {
        return Err(Error::Config(format!("adam learning rate must be > 0, got {}", cfg.lr)));
    }
    if state.m.shape() != param.value.shape() || state.v.shape() != param.value.shape() {
        return Err(Error::dim(
            "adam_step",
            format!(
                "state shape {:?}/{:?} != parameter shape {:?}",
                state.m.shape(),
                state.v.shape(),
                param.value.shape()
            ),
        ));
    }
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    let g = param.grad.data();
    let m = state.m.data_mut();
    let v = state.v.data_mut();
    let p = param.value.data_mut();
    for i in 0..p.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        p[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Central-difference gradients `(f(θ+h) − f(θ−h)) / 2h` per coordinate.
///
/// `loss_fn` must be deterministic in its inputs. This is the independent
/// oracle the analytic backward pass is checked against; it never calls
/// into the tape machinery.
pub fn finite_diff_grad<F>(mut loss_fn: F, params: &[Tensor], h: f64) -> Result<Vec<Tensor>>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(Error::Config(format!("finite-difference step must be > 0, got {h}")));
    }
    let mut work: Vec<Tensor> = params.to_vec();
    let mut grads = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let mut grad = Tensor::zeros(params[pi].shape().to_vec());
        for i in 0..params[pi].len() {
            let orig = work[pi].data()[i];
            work[pi].data_mut()[i] = orig + h;
            let plus = loss_fn(&work)?;
            work[pi].data_mut()[i] = orig - h;
            let minus = loss_fn(&work)?;
            work[pi].data_mut()[i] = orig;
            grad.data_mut()[i] = (plus - minus) / (2.0 * h);
        }
        grads.push(grad);
    }
    Ok(grads)
}

/// Max over coordinates of `|a − n| / max(|a|, |n|, floor)`.
///
/// The 1e-2 denominator floor turns the check absolute for near-zero
/// gradients: central differences carry cancellation roundoff of order
/// `ε·|f| / 2h` regardless of the true derivative, so coordinates whose
/// gradient sits below that noise cannot be compared relatively.
pub fn max_relative_error(analytic: &[Tensor], numeric: &[Tensor]) -> f64 {
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric) {
        for (&av, &nv) in a.data().iter().zip(n.data()) {
            let rel = (av - nv).abs() / av.abs().max(nv.abs()).max(1e-2);
            worst = worst.max(rel);
        }
    }
    worst
}
