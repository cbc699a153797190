//! Dense matrices and the reverse-mode engine used for training.

mod gradcheck;
mod graph;
mod linalg;
mod tensor;

pub use gradcheck::grad_check;
pub use graph::{celu, logsumexp, BinaryOp, Graph, NodeId, Segment, UnaryOp};
pub use linalg::Cholesky;
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
