//! Dense tensors, a reverse-mode tape, and a finite-difference checker.

pub mod functional;
mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use functional::{gelu, layer_norm, sigmoid, softmax, LAYER_NORM_EPS};
pub use gradcheck::{grad_check, DEFAULT_STEP};
pub use graph::{Graph, Var, COSINE_NORM_FLOOR};
pub use params::{Grads, ParamStore};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
