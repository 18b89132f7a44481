//! Depth-guided, reference-based image super-resolution with
//! attention-feature knowledge distillation, sized to train on a desk.
//!
//! The crate is generic over the element type ([`Scalar`]); training uses
//! `f32` and the verification suites run the same code in `f64`.

pub mod autograd;
pub mod backbone;
pub mod distill;
pub mod dmm;
pub mod error;
pub mod evalkit;
pub mod losses;
pub mod model;
pub mod nn;
pub mod resample;
pub mod scalar;
pub mod synthgen;
pub mod trainer;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
