//! Dense `f64` tensors with a tape-based reverse-mode autodiff, a named
//! parameter store and an adaptive-moment optimizer.

mod graph;
pub mod init;
mod optim;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, NodeId};
pub use optim::Adam;
pub use params::{ParamEntry, ParamMap};
pub use tensor::Tensor;
