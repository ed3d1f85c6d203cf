use std::io;

use thiserror::Error;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {context}: {left:?} vs {right:?}")]
    Dimension {
        context: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("constraint violated: {0}")]
    Constraint(String),

    /// A pruning target that cannot be met without emptying a layer.
    #[error("pruning factor {requested} unreachable; at most {max_achievable} of prunable parameters can be removed")]
    Unreachable { requested: f64, max_achievable: f64 },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("inconsistent state: {0}")]
    Consistency(String),

    #[error("training failed in layer {layer}: {reason}")]
    Training { layer: usize, reason: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("checkpoint: bad magic bytes")]
    BadMagic,

    #[error("checkpoint: unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint: file truncated")]
    Truncated,

    #[error("checkpoint: checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Checksum { stored: u32, computed: u32 },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(context: impl Into<String>, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            context: context.into(),
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
