//! Reverse-mode differentiation over dense 5D tensors, restricted to the
//! primitives a 3D U-Net needs.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod ops;
pub mod tensor;

use thiserror::Error;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{GradTargets, Gradients, Graph, Mode, Node, NodeId, OpKind};
pub use tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum AdError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("missing input {0:?}")]
    MissingInput(String),
    #[error("node {0} has no value; run forward first")]
    NotEvaluated(NodeId),
    #[error("backward called before forward")]
    BackwardBeforeForward,
    #[error("non-finite value produced by node {node} ({op})")]
    NonFinite { node: NodeId, op: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(String),
}
