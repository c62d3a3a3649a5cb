//! Minimal reverse-mode differentiable numeric core.
//!
//! Everything is `f64`. A [`Graph`] records one forward pass over borrowed
//! parameter tensors; [`Graph::backward`] consumes it and hands back a
//! [`Gradients`] table that can be accumulated into the parameters'
//! gradient buffers. The graph is rebuilt on every forward pass.

mod gemm;
mod gradcheck;
mod graph;
pub mod io;
mod layers;
mod optim;
mod tensor;

pub use gradcheck::{gradient_check, GradCheck};
pub use graph::{Gradients, Graph, Var};
pub use layers::{conv_output_len, forward, forward_stack, init_params, init_stack, LayerSpec};
pub use optim::{Adam, AdamConfig};
pub use tensor::Tensor;

use thiserror::Error;

/// Errors raised by the numeric core.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("parameter {0} has no gradient")]
    MissingGrad(usize),

    #[error("invalid layer spec: {0}")]
    InvalidSpec(String),

    #[error("unknown variable id {0}")]
    UnknownVar(usize),
}

pub type Result<T> = std::result::Result<T, NumError>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> NumError {
    NumError::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}
