//! Dense `f64` tensors and a tape for reverse-mode differentiation.

mod graph;
mod tensor;

pub(crate) use graph::Backward;
pub use graph::{log_sum_exp, AttentionLayout, BatchStats, Gradients, Graph, Var};
pub(crate) use graph::dropout_mask;
pub use tensor::{Tensor, TensorError};
