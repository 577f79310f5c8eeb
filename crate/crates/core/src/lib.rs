//! Multitask egocentric action recognition with a shared 3D-CNN, DSNT
//! coordinate heads and a from-scratch reverse-mode autograd.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); training runs in
//! `f32` and gradient checks in `f64`. The aliases below fix the precision.

pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod dsnt;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod parallel;
pub mod pgm;
pub mod scalar;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Training precision.
pub type Real = f32;
/// Precision used for finite-difference checks.
pub type CheckReal = f64;

pub type Tensor = tensor::Tensor<Real>;
pub type Graph = autograd::Graph<Real>;
pub type Model = model::MultitaskModel<Real>;
pub type CheckModel = model::MultitaskModel<CheckReal>;
pub type Batch = losses::Batch<Real>;
