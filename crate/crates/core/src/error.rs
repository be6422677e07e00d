//! Error type shared across the crate.

use std::path::PathBuf;
use thiserror::Error;

/// Errors produced by dataset handling, model construction, training and
/// evaluation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dataset path not found: {0}")]
    MissingPath(PathBuf),

    #[error("no items in dataset at {0}")]
    EmptyDataset(PathBuf),

    #[error("failed to decode image {path}: {source}")]
    ImageDecode {
        path: PathBuf,
        source: image::ImageError,
    },

    #[error("label {label} outside class_count {class_count}")]
    LabelOutOfRange { label: usize, class_count: usize },

    #[error("index {index} out of range for dataset of {len} items")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("unknown architecture `{0}`")]
    UnknownArch(String),

    #[error("unknown tap `{tap}`; available: {available:?}")]
    UnknownTap { tap: String, available: Vec<String> },

    #[error("unknown generator block `{0}`")]
    UnknownBlock(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("resolution {h}x{w} not divisible by stride product {stride}")]
    ResolutionNotDivisible { h: usize, w: usize, stride: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("degenerate feature: clean feature tensor is all zero for sample {0}")]
    DegenerateFeature(usize),

    #[error("attention collapsed: attention map is all zero for sample {0}")]
    AttentionCollapsed(usize),

    #[error("sigma draw guard violated after {0} redraws")]
    SigmaGuard(usize),

    #[error("non-finite loss at step {step} (value {value})")]
    NonFiniteLoss { step: usize, value: f64 },

    #[error("non-finite gradient at iteration {0}")]
    NonFiniteGradient(usize),

    #[error("empty model list for ensemble loss")]
    EmptyEnsemble,

    #[error("not a BIAF1 container")]
    BadMagic,

    #[error("unsupported container version {0}")]
    BadVersion(u8),

    #[error("truncated container: {0}")]
    Truncated(String),

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("perturbation audit failed: {0}")]
    AuditFailed(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("image encode error: {0}")]
    ImageEncode(#[from] image::ImageError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
