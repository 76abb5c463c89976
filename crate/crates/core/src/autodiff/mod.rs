//! Minimal reverse-mode autodiff over dense `f64` matrices, plus parameter
//! storage and the Adam optimizer used for end-to-end training.

mod graph;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, Unary, Var};
pub use params::{Adam, AdamState, Component, ParamId, ParamStore};
pub use tensor::Tensor;
