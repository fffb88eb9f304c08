//! Differentiable tensor core: dense 2-D tensors, named parameter stores and a
//! reverse-mode tape.

mod graph;
mod params;
mod tensor;

pub use graph::{Graph, KeySpans, Var};
pub use params::{Gradients, ParamStore};
pub use tensor::{dot, log_softmax, softmax_in_place, Tensor};

pub mod gradcheck;
