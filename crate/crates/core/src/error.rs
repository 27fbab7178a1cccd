use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("unknown system `{0}` (expected pendulum, strict_feedback or cartpole)")]
    UnknownSystem(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("singular matrix: {0}")]
    Singular(String),
    #[error("invalid network spec: {0}")]
    InvalidNet(String),
    #[error("gradient tape root must be scalar, got {0}x{1}")]
    NonScalarRoot(usize, usize),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("index {index} out of range for trajectory with {len} states")]
    OutOfRange { index: usize, len: usize },
    #[error("empty input: {0}")]
    Empty(String),
    #[error("Riccati iteration did not converge: {0}")]
    NotStabilizable(String),
    #[error("network too large for SMT export: {0}")]
    Oversized(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("SMT-LIB parse error: {0}")]
    Parse(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
