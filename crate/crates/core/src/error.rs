use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, KudaError>;

#[derive(Debug, Error)]
pub enum KudaError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape for {op}: {shape:?} ({reason})")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: &'static str,
    },

    #[error("axis {axis} out of range for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("loss does not depend on any trainable leaf")]
    DetachedGraph,

    #[error("backward already ran on this graph; reset gradients first")]
    BackwardTwice,

    #[error("token id {id} outside vocabulary of size {vocab}")]
    OutOfVocabulary { id: usize, vocab: usize },

    #[error("sequence length {len} exceeds the configured maximum {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error(
        "sequence length {len} does not match the configured length {expected} for {modality}"
    )]
    SequenceLength {
        modality: &'static str,
        len: usize,
        expected: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("model dimension {dim} is not divisible by {heads} heads")]
    HeadSplit { dim: usize, heads: usize },

    #[error("adapter has {blocks} blocks but the encoder produced {taps} taps")]
    TapMismatch { taps: usize, blocks: usize },

    #[error("sentiment ratios from ground truth are only available in train mode")]
    RatioInTestMode,

    #[error("numerical failure in dynamic attention block {block}: {what}")]
    BlockNumerics { block: usize, what: String },

    #[error("contrastive loss needs at least 2 samples per batch, got {0}")]
    BatchTooSmall(usize),

    #[error("empty batch")]
    EmptyBatch,

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown fusion strategy `{0}`")]
    UnknownStrategy(String),

    #[error("sample {id} is missing its {field} label")]
    MissingLabel { id: String, field: &'static str },

    #[error("{}:{line}: field `{field}`: {message}", path.display())]
    Record {
        path: PathBuf,
        line: usize,
        field: String,
        message: String,
    },

    #[error("snapshot: {0}")]
    Snapshot(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl KudaError {
    /// True for failures caused by NaN/Inf values or failed numerical checks.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Self::NonFinite(_) | Self::BlockNumerics { .. })
    }
}
