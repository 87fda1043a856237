//! Minimal CPU autograd for small convolutional detectors: an `f32` tensor
//! type, a tape that records convolutions, group norm, RoI align and a few
//! element-wise ops, parameter stores, and SGD.

mod graph;
pub mod layers;
pub mod ops;
mod optim;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, Roi, Var};
pub use optim::Sgd;
pub use params::{Init, ParamId, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
}
