//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Values live in [`Tensor`]s; [`Var`] wraps a value and, when created from a
//! [`Tape`] leaf (or from an op on tracked inputs), records how to pull
//! gradients back. Untracked vars run the same kernels without recording, which
//! is how inference avoids holding on to activations.

pub mod gradcheck;
mod kernels;
mod ops;
pub mod optim;
mod tensor;
mod var;

pub use ops::cat;
pub use tensor::Tensor;
pub use var::{Gradients, Tape, Var};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("vars from different tapes were combined")]
    TapeMismatch,
    #[error("backward() called on an untracked var")]
    NotTracked,
}

pub type Result<T> = std::result::Result<T, Error>;
