//! Dense `f64` matrices and a reverse-mode differentiation tape.
//!
//! Everything the training loop differentiates (the basis network, the
//! Kalman recursion, the PSD parameterizations of its covariances) is built
//! from the primitives on [`Var`]. Shapes are always explicit; the only
//! broadcast is multiplication by a constant scalar.

mod matrix;
mod tape;

pub use matrix::Matrix;
pub use tape::{hconcat, Gradients, Tape, Var};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KernelError {
    #[error("{op}: shape mismatch {}x{} vs {}x{}", .lhs.0, .lhs.1, .rhs.0, .rhs.1)]
    Shape { op: &'static str, lhs: (usize, usize), rhs: (usize, usize) },
    #[error("{op}: matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { op: &'static str, pivot: usize, value: f64 },
    #[error("backward requires a 1x1 loss, got {}x{}", .shape.0, .shape.1)]
    NonScalarLoss { shape: (usize, usize) },
    #[error("backward called on an empty tape")]
    EmptyTape,
}
