use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
///
/// The variants are grouped so that front ends can map them onto exit codes:
/// configuration problems, data problems and numeric failures.
#[derive(Debug, Error)]
pub enum SfcError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("index {index} out of range for {what} (len {len})")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("degenerate batch in batch_norm: {0} values per channel, need at least 2")]
    DegenerateBatch(usize),

    #[error("positive mask is empty; the local loss is undefined")]
    EmptyMask,

    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("non-finite gradient for parameter `{param}` at element {index}")]
    NonFiniteGradient { param: String, index: usize },

    #[error("backward already ran on this graph; build a new forward pass")]
    BackwardTwice,

    #[error("gradient check failed for {op} at element {index}: relative error {rel_err:.3e} > {tol:.1e}")]
    GradCheck {
        op: String,
        index: usize,
        rel_err: f64,
        tol: f64,
    },

    #[error("parse error in {context} at byte {offset}: {detail}")]
    Parse {
        context: String,
        offset: usize,
        detail: String,
    },

    #[error("checkpoint rejected: {0}")]
    Checkpoint(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = SfcError> = std::result::Result<T, E>;

impl SfcError {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        SfcError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SfcError::Io {
            path: path.into(),
            source,
        }
    }

    /// Coarse classification used for process exit codes.
    pub fn kind(&self) -> ErrorKind {
        match self {
            SfcError::Config(_) | SfcError::Shape { .. } | SfcError::Index { .. } => {
                ErrorKind::Config
            }
            SfcError::Parse { .. }
            | SfcError::Checkpoint(_)
            | SfcError::Data(_)
            | SfcError::Io { .. } => ErrorKind::Data,
            SfcError::DegenerateBatch(_)
            | SfcError::EmptyMask
            | SfcError::NonFinite { .. }
            | SfcError::NonFiniteGradient { .. }
            | SfcError::BackwardTwice
            | SfcError::GradCheck { .. } => ErrorKind::Numeric,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
}
