//! Dense tensors and reverse-mode automatic differentiation.

mod cases;
mod gradcheck;
mod graph;
pub mod kernels;
mod tensor;

pub use cases::{op_cases, GradCase};
pub use gradcheck::grad_check;
pub use graph::{AttentionSpec, Gradients, Graph, NodeRecord, OpKind, Var};
pub use tensor::{ParamId, ParamStore, Tensor};

#[cfg(test)]
mod tests;
