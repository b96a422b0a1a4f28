//! Minimal dense-tensor math with reverse-mode automatic differentiation.
//!
//! Everything is `f64` and row-major. Models build their forward pass on a
//! [`Tape`], pull parameters in from a [`ParamStore`], call
//! [`Tape::backward`] and hand the resulting [`Gradients`] back to the store
//! before an [`AdamW`] step.

pub mod checkpoint;
mod error;
pub mod gradcheck;
mod optim;
mod param;
mod tape;
mod tensor;

pub use checkpoint::{Checkpoint, CheckpointEntry};
pub use error::{AutodiffError, Result};
pub use optim::{AdamW, AdamWConfig};
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    tape::sigmoid(x)
}
