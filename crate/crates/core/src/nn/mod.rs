//! Minimal tensor and reverse-mode autodiff engine used by the networks.

mod graph;
mod tensor;

pub use graph::{Graph, NodeId};
pub use tensor::Tensor;
