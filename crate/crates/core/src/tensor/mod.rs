//! Dense row-major tensors and a reverse-mode autodiff graph.
//!
//! [`TensorBase`] is the value type: flat storage plus a shape, with an
//! optional gradient buffer. Differentiable computation happens on a
//! [`Graph`], which records one backward closure per operation and replays
//! them in reverse recording order. Construction is eager: an op validates
//! shapes, computes its output immediately, and appends a node.

mod adam;
mod graph;
pub mod gradcheck;

pub use adam::{adam_step, AdamState};
pub use graph::{AttnMask, AttnRecord, Graph, NodeId};

use crate::scalar::Scalar;

/// Errors from tensor construction, graph ops, and the optimizer.
#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: expected {expected}, got shape {got:?}")]
    RankError { op: &'static str, expected: &'static str, got: Vec<usize> },
    #[error("{op}: data length {len} does not match shape {shape:?}")]
    LengthMismatch { op: &'static str, len: usize, shape: Vec<usize> },
    #[error("{op}: zero-sized dimension in shape {shape:?}")]
    ZeroDim { op: &'static str, shape: Vec<usize> },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("attention mask row {row} allows no keys")]
    FullyMaskedRow { row: usize },
    #[error("{op}: index {index} out of bounds for size {bound}")]
    IndexOutOfBounds { op: &'static str, index: usize, bound: usize },
    #[error("{op}: {msg}")]
    InvalidArg { op: &'static str, msg: String },
    #[error("optimizer state missing gradient for parameter {index} ({name})")]
    MissingGrad { index: usize, name: String },
    #[error("optimizer state holds {state} moment buffers but {params} parameters were given")]
    StateSizeMismatch { state: usize, params: usize },
}

/// Value-semantic dense tensor. Row-major, rank >= 1, no zero-sized dims.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorBase<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
    requires_grad: bool,
    grad: Option<Vec<S>>,
}

impl<S: Scalar> TensorBase<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self, TensorError> {
        if shape.is_empty() {
            return Err(TensorError::RankError { op: "tensor", expected: "rank >= 1", got: shape });
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ZeroDim { op: "tensor", shape });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::LengthMismatch { op: "tensor", len: data.len(), shape });
        }
        Ok(Self { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product::<usize>().max(0);
        Self::new(shape, vec![S::zero(); numel])
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self, TensorError> {
        Self::new(shape, data.iter().map(|&v| S::from_f64(v)).collect())
    }

    /// Marks this tensor as a trainable parameter.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn data(&self) -> &[S] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    #[inline]
    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    #[inline]
    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    /// Overwrites the gradient buffer. Length must match the data.
    pub fn set_grad(&mut self, grad: Vec<S>) -> Result<(), TensorError> {
        if grad.len() != self.data.len() {
            return Err(TensorError::LengthMismatch {
                op: "set_grad",
                len: grad.len(),
                shape: self.shape.clone(),
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = S::zero());
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_length_contract_enforced() {
        let t = TensorBase::<f64>::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.numel(), 6);
        assert!(matches!(
            TensorBase::<f64>::new(vec![2, 3], vec![0.0; 5]),
            Err(TensorError::LengthMismatch { .. })
        ));
        assert!(matches!(
            TensorBase::<f64>::new(vec![2, 0], vec![]),
            Err(TensorError::ZeroDim { .. })
        ));
        assert!(matches!(
            TensorBase::<f64>::new(vec![], vec![]),
            Err(TensorError::RankError { .. })
        ));
    }

    #[test]
    fn grad_buffer_round_trip() {
        let mut t = TensorBase::<f64>::zeros(vec![3]).unwrap().with_grad();
        assert!(t.requires_grad());
        assert!(t.grad().is_none());
        t.set_grad(vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(t.grad().unwrap(), &[1.0, 2.0, 3.0]);
        t.zero_grad();
        assert_eq!(t.grad().unwrap(), &[0.0, 0.0, 0.0]);
        assert!(t.set_grad(vec![0.0; 2]).is_err());
    }
}
