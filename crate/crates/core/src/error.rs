use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("axis {axis} out of range for tensor of rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("contrastive loss needs a batch of at least 2, got {0}")]
    BatchTooSmall(usize),

    #[error("fusion needs at least {min} tokens, got {got}")]
    TooFewTokens { min: usize, got: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("checkpoint stage mismatch: expected {expected}, found {found}")]
    StageMismatch { expected: String, found: String },

    #[error("metric undefined: {0}")]
    DegenerateLabels(&'static str),

    #[error("training fraction {fraction} leaves a single class in the training subsample")]
    FractionTooSmall { fraction: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("format error at line {line}: {msg}")]
    Format { line: usize, msg: String },

    #[error("checkpoint checksum mismatch: manifest {expected:08x}, payload {actual:08x}")]
    Checksum { expected: u32, actual: u32 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
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

    pub(crate) fn format(line: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            line,
            msg: msg.into(),
        }
    }
}
