//! Tensors, a reverse-mode tape, and the seeded random source.

pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod ops;
pub mod rng;
mod scalar;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use kernels::{AttnDims, AttnMask};
pub use ops::{attention, layer_norm, matmul, softmax, LN_EPS};
pub use rng::{randn, Rng};
pub use scalar::Scalar;
pub use tensor::Tensor;
