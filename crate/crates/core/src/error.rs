use thiserror::Error;

/// Errors raised by the alignment library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("zero-norm embedding")]
    ZeroNorm,

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("mask {index}: {reason}")]
    InvalidMask { index: usize, reason: String },

    #[error("parse error at byte {offset}: {reason}")]
    Parse { offset: usize, reason: String },

    #[error("token map: {0}")]
    TokenMap(String),

    #[error("{masks} masks exceeds the exact-aggregation cap of {cap}")]
    MaskCapExceeded { masks: usize, cap: usize },

    #[error("batch needs at least 2 pairs, found {0}")]
    BatchTooSmall(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("activation {0} is not supported here")]
    UnsupportedActivation(String),

    #[error("non-finite output at NLA layer {layer}")]
    LayerOverflow { layer: usize },

    #[error("zero variance in {0}")]
    ZeroVariance(&'static str),

    #[error("io: {0}")]
    Io(String),

    #[error("json line {line}: {reason}")]
    Json { line: usize, reason: String },
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
