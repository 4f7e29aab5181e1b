//! CNN training engine with orthogonality-penalized projection layers.
//!
//! The numeric core is generic over [`scalar::Scalar`] (`f32` for training,
//! `f64` for gradient checks). The aliases below name the common
//! instantiations.

pub mod cli;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod hope;
pub mod layers;
pub mod model;
pub mod optim;
pub mod runtime;
pub mod scalar;
pub mod seed;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

pub type Tensor4f = tensor::Tensor4<f32>;
pub type Tensor4d = tensor::Tensor4<f64>;
pub type Matrixf = tensor::Matrix<f32>;
pub type Matrixd = tensor::Matrix<f64>;
pub type Network32 = model::Network<f32>;
pub type Network64 = model::Network<f64>;
pub type Dataset32 = data::Dataset<f32>;
