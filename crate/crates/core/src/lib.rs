//! Monotonic multihead attention for simultaneous sequence-to-sequence
//! translation at desk scale.
//!
//! The crate is generic over the real scalar type (see [`Scalar`]); the
//! aliases at the root fix it to `f32`, which is what training uses.

pub mod align;
pub mod error;
pub mod latency;
pub mod model;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{CumKind, CumMode, Graph, Tensor, Var};

pub type Tensor32 = tensor::Tensor<f32>;
pub type Graph32 = tensor::Graph<f32>;
pub type Model32 = model::Model<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph64 = tensor::Graph<f64>;
pub type Model64 = model::Model<f64>;
