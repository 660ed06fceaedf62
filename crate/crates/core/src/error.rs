//! Crate-wide error type.

use thiserror::Error;

use crate::toybase::BlockType;

#[derive(Debug, Error)]
pub enum LofaError {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("shape mismatch at (depth {depth}, {block_type}): expected {expected}, got {got}")]
    Shape {
        depth: usize,
        block_type: BlockType,
        expected: String,
        got: String,
    },

    #[error("no adapter entry for (depth {depth}, {block_type})")]
    MissingBlock { depth: usize, block_type: BlockType },

    #[error("base fingerprint mismatch: expected {expected}, got {got}")]
    Fingerprint { expected: String, got: String },

    #[error("format error in {what}: {detail}")]
    Format { what: String, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, LofaError>;

impl LofaError {
    /// Machine-parseable category tag, one word, used by the CLI error line.
    pub fn category(&self) -> &'static str {
        match self {
            LofaError::Argument(_) => "argument",
            LofaError::Shape { .. } => "shape",
            LofaError::MissingBlock { .. } => "missing-block",
            LofaError::Fingerprint { .. } => "fingerprint",
            LofaError::Format { .. } => "format",
            LofaError::Config(_) => "config",
            LofaError::Numerical(_) => "numerical",
            LofaError::MissingArtifact(_) => "missing-artifact",
            LofaError::Io(_) => "io",
            LofaError::Json(_) => "json",
        }
    }
}
