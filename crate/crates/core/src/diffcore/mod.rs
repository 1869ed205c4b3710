//! Minimal reverse-mode automatic differentiation over dense f64 arrays.
//!
//! The op set is exactly what the training objectives need: matrix multiply,
//! bias add, relu, sigmoid, softplus, log, exp, logsumexp, log-softmax,
//! square, mean/sum reductions, scalar multiply/add, and elementwise
//! add/sub/mul. No broadcasting beyond bias add, no higher-order derivatives.

mod fdcheck;
mod graph;
mod tensor;

pub use fdcheck::{finite_difference_check, FdReport};
pub use graph::{Gradients, Graph, NodeId};
pub use tensor::{logsumexp_slice, sigmoid, softmax_slice, softplus, Tensor};
