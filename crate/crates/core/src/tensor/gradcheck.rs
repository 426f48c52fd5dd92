//! Central-finite-difference gradient verification.
//!
//! Every differentiable op in this crate is checked against this oracle: the
//! analytic gradient from [`Graph::backward`] must agree with
//! `(f(x+h) - f(x-h)) / 2h` computed through a fresh forward pass per
//! perturbation. The relative-error denominator is floored so that
//! true-zero gradients compare against finite-difference noise sanely.

use super::{Graph, NodeId, TensorBase, TensorError};
use crate::scalar::Scalar;

/// Step size for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Relative tolerance every differentiable op must meet.
pub const FD_REL_TOL: f64 = 1e-4;

const REL_FLOOR: f64 = 1e-3;

/// Builds a scalar loss from leaves inserted for `inputs`, in order.
pub type LossBuilder<S> = dyn Fn(&mut Graph<S>, &[NodeId]) -> Result<NodeId, TensorError>;

fn eval_loss<S: Scalar>(inputs: &[TensorBase<S>], build: &LossBuilder<S>) -> Result<f64, TensorError> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.input(t)).collect();
    let loss = build(&mut g, &ids)?;
    if g.data(loss).len() != 1 {
        return Err(TensorError::NonScalarLoss { shape: g.shape(loss).to_vec() });
    }
    Ok(g.data(loss)[0].as_f64())
}

/// Analytic gradients for every `requires_grad` input, `None` where the loss
/// does not reach an input.
pub fn analytic_grads<S: Scalar>(
    inputs: &[TensorBase<S>],
    build: &LossBuilder<S>,
) -> Result<Vec<Option<Vec<f64>>>, TensorError> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.input(t)).collect();
    let loss = build(&mut g, &ids)?;
    g.backward(loss)?;
    Ok(ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| {
            if !t.requires_grad() {
                return None;
            }
            g.grad(id).map(|gr| gr.iter().map(|&v| v.as_f64()).collect())
        })
        .collect())
}

/// Central differences for every component of every `requires_grad` input.
pub fn finite_difference_grads<S: Scalar>(
    inputs: &[TensorBase<S>],
    build: &LossBuilder<S>,
    h: f64,
) -> Result<Vec<Option<Vec<f64>>>, TensorError> {
    let mut out = Vec::with_capacity(inputs.len());
    for (i, t) in inputs.iter().enumerate() {
        if !t.requires_grad() {
            out.push(None);
            continue;
        }
        let mut grads = vec![0.0; t.numel()];
        for c in 0..t.numel() {
            let mut plus = inputs.to_vec();
            let base = plus[i].data()[c].as_f64();
            plus[i].data_mut()[c] = S::from_f64(base + h);
            let lp = eval_loss(&plus, build)?;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[c] = S::from_f64(base - h);
            let lm = eval_loss(&minus, build)?;
            grads[c] = (lp - lm) / (2.0 * h);
        }
        out.push(Some(grads));
    }
    Ok(out)
}

/// Maximum relative disagreement between analytic and finite-difference
/// gradients over all checked components.
pub fn max_rel_error<S: Scalar>(
    inputs: &[TensorBase<S>],
    build: &LossBuilder<S>,
    h: f64,
) -> Result<f64, TensorError> {
    let analytic = analytic_grads(inputs, build)?;
    let numeric = finite_difference_grads(inputs, build, h)?;
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(&numeric) {
        let (Some(n), a) = (n, a) else { continue };
        // A loss that never reaches an input has an all-zero true gradient.
        let zero = vec![0.0; n.len()];
        let a = a.as_deref().unwrap_or(&zero);
        for (&av, &nv) in a.iter().zip(n) {
            let denom = av.abs().max(nv.abs()).max(REL_FLOOR);
            worst = worst.max((av - nv).abs() / denom);
        }
    }
    Ok(worst)
}

/// Panics when the analytic gradient disagrees with central differences.
pub fn assert_grads_match<S: Scalar>(inputs: &[TensorBase<S>], build: &LossBuilder<S>) {
    let err = max_rel_error(inputs, build, FD_STEP).expect("gradient check build failed");
    assert!(err < FD_REL_TOL, "gradient mismatch: max relative error {err:.3e} >= {FD_REL_TOL:.0e}");
}

/// Deterministic pseudo-random test tensor; values in roughly [-1, 1].
pub fn seeded_tensor<S: Scalar>(shape: &[usize], seed: u64) -> TensorBase<S> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    TensorBase::from_f64(shape.to_vec(), &data).expect("valid shape")
}
