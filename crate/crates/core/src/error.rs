use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("taxonomy: {0}")]
    Taxonomy(String),

    #[error("unknown class `{0}`")]
    UnknownClass(String),

    #[error("level {level} out of range for tree of height {height}")]
    LevelOutOfRange { level: usize, height: usize },

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("invalid audio: {0}")]
    Audio(String),

    #[error("expected {expected} samples, got {actual}")]
    WrongLength { expected: usize, actual: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("episode: {0}")]
    Episode(String),

    #[error("non-finite loss (episode seed {seed})")]
    NonFiniteLoss { seed: u64 },

    #[error("{what}: bad magic")]
    BadMagic { what: &'static str },

    #[error("{what}: unsupported version {version}")]
    BadVersion { what: &'static str, version: u32 },

    #[error("{what}: truncated payload")]
    Truncated { what: &'static str },

    #[error("{what}: digest mismatch")]
    DigestMismatch { what: &'static str },

    #[error("{0}")]
    Format(String),

    #[error("evaluation: {0}")]
    Eval(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    RawIo(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
