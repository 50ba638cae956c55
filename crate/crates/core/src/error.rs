use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("degenerate sample: {0}")]
    Degenerate(String),
    #[error("pose recovery failed: {0}")]
    PoseRecovery(String),
    #[error("minimal-set space exhausted: {0}")]
    Exhausted(String),
    #[error("scene generation failed: {0}")]
    Generation(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unsupported version: {0}")]
    UnsupportedVersion(String),
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
