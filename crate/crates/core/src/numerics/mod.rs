//! Dense tensors and the reverse-mode tape every model computation runs on.

mod graph;
mod tensor;

pub use graph::{Gradients, Graph, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;
