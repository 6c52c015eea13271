//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Only the operations the pose network needs are provided. Each forward
//! pass records onto its own [`Tape`]; parameters live in a [`ParamStore`]
//! and are bound to the tape as gradient-tracking leaves.

mod checkpoint;
mod optim;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use optim::{adam_step, sgd_step, AdamConfig, AdamState};
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Matching, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::{apply_rt, quat_to_mat};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("index {index} out of bounds for length {len}")]
    IndexOutOfBounds { index: usize, len: usize },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("loss is not connected to any gradient-tracking input on this tape")]
    DisconnectedGraph,
    #[error("backward already ran on this tape; reset it first")]
    BackwardAlreadyCalled,
    #[error("malformed checkpoint at byte {offset}: {reason}")]
    MalformedCheckpoint { offset: usize, reason: String },
    #[error("checkpoint section `{0}` not found")]
    MissingSection(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
