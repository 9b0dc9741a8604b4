//! Dense tensors with tape-based reverse-mode automatic differentiation,
//! covering the operator set of small convolutional and transformer models.
//!
//! Everything is generic over [`Scalar`] (`f32` or `f64`); the aliases below
//! fix the element type for the common cases.

pub mod check;
mod error;
mod graph;
pub mod io;
pub mod linalg;
mod ops;
pub mod optim;
mod param;
mod scalar;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{Graph, Var};
pub use ops::{conv1d_out_len, Reduction, RunningStats, UpdatedStats, BATCHNORM_EPS, BATCHNORM_MOMENTUM, LAYERNORM_EPS};
pub use optim::{Adam, AdamConfig};
pub use param::{Param, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
