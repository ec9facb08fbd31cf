//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every primitive executed on it as a node; calling
//! [`Graph::backward`] on a scalar node walks the record once in reverse and
//! accumulates gradients into the leaves created with [`Graph::param`].

mod graph;
mod optim;
mod rng;
mod tensor;

pub use graph::{Graph, Var};
pub use optim::sgd_step;
pub use rng::{derive_seed, RngState};
pub use tensor::Tensor;
