//! Tensor autodiff: a tape of ops with hand-written adjoints.

pub mod conv;
mod graph;
pub mod gradcheck;
pub mod patch;

pub use graph::{sigmoid, Grads, Graph, Unary, Var};
