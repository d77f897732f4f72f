//! Minimal dense-array engine with reverse-mode gradients.

mod checkpoint;
mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Manifest, ManifestEntry};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport, GroupReport};
pub use graph::{
    cross_entropy, layer_norm, masked_softmax_attention, AttentionLayout, AttentionMask, Grads, Graph, Var,
    MASK_PENALTY,
};
pub use optim::{adamw_step, AdamWConfig, AdamWState};
pub use params::{Bound, ParamId, ParamStore};
pub use tensor::{matmul, Scalar, Tensor};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("io error: {0}")]
    Io(String),
}
