//! Dense tensors, forward kernels, a reverse-mode tape and seeded random
//! streams.

mod gradcheck;
mod graph;
pub mod kernels;
mod rng;
mod tensor;

pub use gradcheck::grad_check;
pub use graph::{inject_fault, Fault, FaultGuard, Gradients, Graph, Var};
pub use kernels::{l2_normalize_rows, matmul, softmax_rows};
pub use rng::Rng;
pub use tensor::Tensor;
