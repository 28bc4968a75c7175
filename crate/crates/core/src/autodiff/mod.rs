//! Minimal dense-tensor reverse-mode autodiff.
//!
//! Values are `f64` throughout. A [`Graph`] is built fresh for every forward
//! pass and consumed by [`Graph::backward`].

mod graph;
mod kernels;
mod tensor;

pub mod gradcheck;

pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;
