//! Numeric core for the duet pipeline: dense tensors, a reverse-mode
//! autodiff graph, layer builders, optimizers, and parameter checkpoints.
//!
//! All math is generic over [`Scalar`] (any IEEE float via `num-traits`);
//! the rest of the workspace uses the `f64` aliases exported below.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use error::{CoreError, Result};
pub use graph::{Feeds, GraphBase, NodeId, ParamStoreBase, Wrt};
pub use scalar::Scalar;
pub use tensor::TensorBase;

/// Double-precision tensor, the workspace default.
pub type Tensor = TensorBase<f64>;
/// Double-precision compute graph.
pub type Graph = GraphBase<f64>;
/// Double-precision parameter store.
pub type ParamStore = ParamStoreBase<f64>;
/// Adam over double-precision parameters.
pub type Adam = optim::AdamBase<f64>;
