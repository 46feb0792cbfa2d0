//! Prompt embeddings to per-layer projection edits.
//!
//! A source prompt is aligned token-by-token with a more specific
//! destination prompt. Every cross-attention layer's key and value
//! projections are then re-solved so that each source embedding `c_i` maps
//! to the key/value the *original* layer produced for its destination
//! counterpart `c*_i`, regularized toward the original matrix.

mod align;
mod context;
mod model;
mod request;

pub use align::{align_tokens, Alignment, EmbeddingSequence};
pub use context::{build_context, EditContext};
pub use model::{
    discover_layers, edit_layer, edit_model, multi_edit, Discovery, LayerPattern, LayerWeights,
    ModelWeights, ParameterReport, ProjectionPair, RawTensor,
};
pub use request::{EditRequest, EditSpec, PromptPair, PromptRef, AUGMENTATION_PREFIXES};

use thiserror::Error;

use crate::linalg::LinalgError;
use crate::tensor_store::TensorError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EditError {
    #[error(
        "destination too short: {destination_len} tokens cannot cover {source_len} source tokens \
         (ran out at source token {unmatched})"
    )]
    DestinationTooShort {
        source_len: usize,
        destination_len: usize,
        unmatched: usize,
    },
    #[error("{tokens} tokens but {embeddings} embeddings")]
    TokenCountMismatch { tokens: usize, embeddings: usize },
    #[error("embedding sequence is empty")]
    EmptySequence,
    #[error("mixed embedding dimensions: {0}")]
    MixedDimensions(String),
    #[error("edit context is empty")]
    EmptyContext,
    #[error("invalid lambda {0}")]
    InvalidLambda(f64),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("model has no cross-attention layers")]
    EmptyModel,
    #[error("contexts disagree on lambda: {expected} vs {found}")]
    LambdaMismatch { expected: f64, found: f64 },
    #[error("duplicate layer or tensor name {0:?}")]
    DuplicateLayer(String),
    #[error("projection {0:?} has no key/value partner")]
    UnpairedProjection(String),
    #[error("invalid edit request: {0}")]
    Request(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, EditError>;
