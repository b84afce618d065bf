//! Heterogeneous bottleneck adapters on a frozen toy dual-encoder.

pub mod adapters;
pub mod backbone;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod harness;
pub mod objective;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod serialize;
pub mod tensor;

pub use error::{HebaError, Result};
pub use graph::{Gradients, Graph, Var};
pub use rng::Rng;
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Graph64 = Graph<f64>;
pub type Graph32 = Graph<f32>;
pub type Backbone64 = backbone::ToyBackbone<f64>;
pub type Backbone32 = backbone::ToyBackbone<f32>;
pub type HebaModel64 = backbone::HebaModel<f64>;
pub type HebaModel32 = backbone::HebaModel<f32>;
