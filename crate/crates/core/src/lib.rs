//! Federated training of rotation-aware binary neural networks.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the model,
//! federation and runtime layers work in `f64`.

pub mod conv;
pub mod cost;
pub mod data;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod metrics;
pub mod model;
pub mod rotation;
pub mod runtime;
pub mod scalar;
pub mod surrogate;
pub mod svd;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type TensorF32 = tensor::Tensor<f32>;
pub type RotationPair = rotation::RotationPair<f64>;
pub type RotationPairF32 = rotation::RotationPair<f32>;
pub type SvdResult = svd::SvdResult<f64>;
pub type SvdResultF32 = svd::SvdResult<f32>;
