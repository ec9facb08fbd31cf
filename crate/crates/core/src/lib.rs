//! Compositional generalization laboratory.
//!
//! A small reverse-mode autodiff engine, seeded multi-factor tasks with
//! compositional train/test splits, a component-factored encoder/decoder
//! model with entropy regularization, inference-time latent optimization
//! against a reverse decoder, and diagnostics for component entropy and
//! conditional independence.

pub mod autodiff;
pub mod diagnostics;
pub mod error;
pub mod inference;
pub mod model;
pub mod tasks;
pub mod training;

pub use error::{Error, Result};
