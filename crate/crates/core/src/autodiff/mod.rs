//! Reverse-mode automatic differentiation over dense tensors.

mod gradcheck;
mod graph;
pub mod kernels;

pub use gradcheck::{
    central_difference, grad_check, grad_check_at, max_relative_error, relative_error,
};
pub use graph::{ClipGradient, Graph, Var};
