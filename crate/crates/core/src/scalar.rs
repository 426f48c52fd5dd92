//! Scalar abstraction for the numeric core.
//!
//! Everything under [`crate::tensor`] and [`crate::model`] is generic over a
//! floating-point scalar so the same kernels run at f32 or f64. The crate
//! root pins concrete f64 aliases; f64 is the working precision for data
//! files, checkpoints, and every shipped default.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, NumAssignOps};

/// Floating-point scalar usable by the tensor graph and the model.
pub trait Scalar:
    Float + NumAssignOps + Sum<Self> + Debug + Display + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}
