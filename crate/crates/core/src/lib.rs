//! Dilated-involution pyramidal encoder-decoder for binary lesion segmentation.
//!
//! Every differentiable operator lives in [`ops`] with an explicit forward and
//! backward kernel; there is no autodiff tape. Layers in [`layers`] compose those
//! kernels and hand their caches back to the caller, and [`model`] assembles the
//! full network. [`gradcheck`] holds the central-difference harness used to
//! verify all of it.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod parallel;
pub mod tensor;
pub mod training;

pub use error::{Error, ErrorKind, Result};
pub use tensor::{DType, Real, Shape4, Tensor4};

/// Forward-pass mode shared by batch norm and every layer above it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}
