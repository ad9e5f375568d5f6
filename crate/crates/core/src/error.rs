use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: expected \"VSEG1\"")]
    BadMagic,
    #[error("payload length mismatch: expected {expected} bytes, found {found}")]
    PayloadLength { expected: usize, found: usize },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("invalid shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch { expected: Vec<usize>, found: Vec<usize> },
    #[error("invalid PGM: {0}")]
    Pgm(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("zero degree at row {row}")]
    ZeroDegree { row: usize },
    #[error("degenerate initialization: eigenvector is constant")]
    DegenerateInit,
    #[error("problem size {size} exceeds oracle cap {cap}")]
    SizeCap { size: usize, cap: usize },
    #[error("invalid scene: {0}")]
    Scene(String),
    #[error("missing input: {0}")]
    MissingInput(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
