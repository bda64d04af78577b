use std::path::PathBuf;

/// Errors raised anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("tensor is not attached to a gradient tape")]
    DetachedTensor,

    #[error("invalid dropout rate {0}; expected 0 <= rate < 1")]
    InvalidRate(f64),

    #[error("input {height}x{width} is not divisible by patch size {patch}")]
    IndivisibleInput {
        height: usize,
        width: usize,
        patch: usize,
    },

    #[error("token count {tokens} does not match grid {grid_h}x{grid_w}")]
    TokenCountMismatch {
        tokens: usize,
        grid_h: usize,
        grid_w: usize,
    },

    #[error("mask has an empty boundary (empty or full foreground)")]
    EmptyBoundary,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed PGM: {0}")]
    MalformedPgm(String),

    #[error("sample {0} has no matching image/mask pair")]
    MissingPair(String),

    #[error("parameter {0} has no gradient")]
    MissingGradient(String),

    #[error("loss became NaN at iteration {0}")]
    NanLoss(usize),

    #[error("split {0} is empty")]
    EmptySplit(String),

    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
