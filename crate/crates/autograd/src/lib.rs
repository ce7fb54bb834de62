//! A compact float64 reverse-mode differentiation tape.
//!
//! Values live on a [`Tape`]; each operation on a [`Var`] records a node and
//! [`Tape::backward`] returns [`Gradients`] for every recorded variable. The
//! op set is exactly what the perception and codec networks use: dense and
//! convolutional layers, attention building blocks, normalisation, complex
//! channel layers, and the detection losses.

pub mod gradcheck;
mod tape;
mod tensor;

pub use tape::{concat_cols, Gradients, Tape, Var};
pub use tensor::Tensor;
