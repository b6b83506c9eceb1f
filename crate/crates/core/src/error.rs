use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op} (output shape {shape:?}{context})")]
    NonFinite {
        op: &'static str,
        shape: Vec<usize>,
        context: String,
    },

    #[error("backward already ran on this graph")]
    GraphConsumed,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("sequence of length {len} exceeds max_seq {max}")]
    SequenceOverflow { len: usize, max: usize },

    #[error("position error: {0}")]
    Position(String),

    #[error("freeze mask pattern `{0}` matches no parameter")]
    UnmatchedPattern(String),

    #[error("empty trainable parameter set")]
    EmptyTrainableSet,

    #[error("unknown parameter `{0}`")]
    MissingParam(String),

    #[error("phase order violation: {0}")]
    PhaseOrder(String),

    #[error("training diverged at step {step}: {reason}")]
    Unstable { step: u64, reason: String },

    #[error("config hash mismatch: context was produced under a different model configuration")]
    ConfigHashMismatch,

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("attention budget violated: {0}")]
    Budget(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numeric kind (NaN, divergence).
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::Unstable { .. })
    }

    /// True for on-disk corruption or I/O failures.
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Corrupt(_) | Error::UnsupportedVersion(_) | Error::Io { .. }
        )
    }
}
