//! Dense tensors with tape-based reverse-mode differentiation.

mod graph;
pub mod io;
pub mod kernels;
mod ops;
mod tensor;

pub use graph::{Gradients, Graph, NodeId, Var};
pub use io::{load_tensors, save_tensors, NamedTensor};
pub use ops::{elementwise, ElementwiseKind, ReduceKind};
pub use tensor::Tensor;

/// Default stabilizer inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-6;
/// Default floor for cosine-similarity denominators.
pub const COSINE_EPS: f64 = 1e-8;
