//! Desk-scale multimodal digital-twin risk model for ICU stays.
//!
//! The crate is organized bottom-up: a reverse-mode autodiff tensor core
//! ([`tensor`]), the cohort data model ([`data`]), a deterministic synthetic
//! cohort generator ([`synth`]), the multitask transformer ([`model`]), the
//! training loop ([`train`]), evaluation metrics with brute-force-verified
//! implementations ([`metrics`]), and a leave-modality-out ablation harness
//! ([`ablation`]).
//!
//! The numeric core is generic over the scalar type; f64 is the working
//! precision everywhere in this crate's shipped paths, pinned by the aliases
//! below. Cohort files and checkpoints always store f64.

pub mod ablation;
pub mod data;
pub mod metrics;
pub mod model;
pub mod scalar;
pub mod special;
pub mod synth;
pub mod tensor;
pub mod train;

pub use scalar::Scalar;

/// Default-precision dense tensor.
pub type Tensor = tensor::TensorBase<f64>;

/// Default-precision autodiff graph.
pub type Graph = tensor::Graph<f64>;

/// Default-precision optimizer state.
pub type AdamState = tensor::AdamState<f64>;
