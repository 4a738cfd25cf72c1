//! Dense tensors, a reverse-mode autodiff tape, and SGD.

mod graph;
mod sgd;
mod tensor;

pub use graph::{Conv2dSpec, Gradients, Graph, NodeId};
pub use sgd::SgdState;
pub use tensor::Tensor;

pub(crate) use tensor::{dot, gemm_nn, gemm_nt, gemm_tn};
