//! Adam with bias correction, operating on value tensors in place.

use super::{TensorBase, TensorError};
use crate::scalar::Scalar;

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPS: f64 = 1e-8;

/// First/second-moment state for one parameter list. Moment buffers always
/// have the same lengths as their parameters.
#[derive(Debug, Clone)]
pub struct AdamState<S: Scalar> {
    lr: S,
    beta1: S,
    beta2: S,
    eps: S,
    step_count: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> AdamState<S> {
    /// `lr` may be zero (a configured no-op), never negative.
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, params: &[TensorBase<S>]) -> Result<Self, TensorError> {
        if !(lr >= 0.0) {
            return Err(TensorError::InvalidArg { op: "adam", msg: format!("lr must be >= 0, got {lr}") });
        }
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
            return Err(TensorError::InvalidArg {
                op: "adam",
                msg: format!("betas must be in [0, 1), got {beta1}, {beta2}"),
            });
        }
        if !(eps > 0.0) {
            return Err(TensorError::InvalidArg { op: "adam", msg: format!("eps must be > 0, got {eps}") });
        }
        Ok(Self {
            lr: S::from_f64(lr),
            beta1: S::from_f64(beta1),
            beta2: S::from_f64(beta2),
            eps: S::from_f64(eps),
            step_count: 0,
            m: params.iter().map(|p| vec![S::zero(); p.numel()]).collect(),
            v: params.iter().map(|p| vec![S::zero(); p.numel()]).collect(),
        })
    }

    pub fn with_defaults(lr: f64, params: &[TensorBase<S>]) -> Result<Self, TensorError> {
        Self::new(lr, DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_EPS, params)
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }
}

/// One Adam update over `params`, which must all carry populated gradients.
/// Gradients are zeroed afterward so stale values cannot leak into the next
/// step.
pub fn adam_step<S: Scalar>(params: &mut [TensorBase<S>], state: &mut AdamState<S>) -> Result<(), TensorError> {
    if params.len() != state.m.len() {
        return Err(TensorError::StateSizeMismatch { state: state.m.len(), params: params.len() });
    }
    for (i, p) in params.iter().enumerate() {
        match p.grad() {
            None => return Err(TensorError::MissingGrad { index: i, name: format!("shape {:?}", p.shape()) }),
            Some(g) if g.len() != p.numel() => {
                return Err(TensorError::MissingGrad { index: i, name: format!("shape {:?}", p.shape()) })
            }
            Some(_) => {}
        }
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = S::one() - state.beta1.powi(t);
    let bc2 = S::one() - state.beta2.powi(t);
    let one = S::one();
    for (i, p) in params.iter_mut().enumerate() {
        let g = p.grad().expect("checked above").to_vec();
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let data = p.data_mut();
        for c in 0..g.len() {
            m[c] = state.beta1 * m[c] + (one - state.beta1) * g[c];
            v[c] = state.beta2 * v[c] + (one - state.beta2) * g[c] * g[c];
            let m_hat = m[c] / bc1;
            let v_hat = v[c] / bc2;
            data[c] = data[c] - state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
        p.zero_grad();
    }
    Ok(())
}
