//! Reverse-mode automatic differentiation over dense matrices, with the
//! Adam optimizer and binary parameter checkpoints.

pub mod checkpoint;
mod gradcheck;
mod graph;
mod store;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Axis, Gradients, Graph, Var};
pub use store::{AdamConfig, ParamId, ParameterStore};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
