//! Minimal dense-tensor engine: op catalog, reverse-mode tape, AdamW and a
//! finite-difference gradient checker.

mod adamw;
mod gradcheck;
mod graph;
mod ops;
mod params;
mod tensor;

use thiserror::Error;

pub use adamw::{AdamW, AdamWConfig};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use graph::{Graph, NodeId};
pub use ops::{eval_op, OpAttrs, OpKind};
pub use params::ParamSet;
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch {shapes:?}")]
    ShapeMismatch { op: &'static str, shapes: Vec<Vec<usize>> },
    #[error("unknown op `{0}`")]
    UnknownOp(String),
    #[error("loss must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("data length {len} does not match shape {shape:?}")]
    BadData { len: usize, shape: Vec<usize> },
}
