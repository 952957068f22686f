use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors produced by the codec, container, and ingest layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid element format: {0}")]
    InvalidFormat(String),

    #[error("invalid quantization config: {0}")]
    InvalidConfig(String),

    #[error("non-finite input value {value} at element {index}")]
    NonFinite { index: usize, value: f32 },

    #[error("block maximum 2^{exponent} is outside the shared-exponent range [-127, 127]")]
    ExponentOutOfRange { exponent: i32 },

    #[error("empty input")]
    EmptyInput,

    #[error("block {block}: {source}")]
    InBlock {
        block: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("bad magic bytes {0:02x?}")]
    BadMagic([u8; 4]),

    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated stream: {section} needs {needed} bytes, {available} available")]
    Truncated {
        section: &'static str,
        needed: usize,
        available: usize,
    },

    #[error("length mismatch in {section}: expected {expected} bytes, found {found}")]
    LengthMismatch {
        section: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("unsupported dtype {0}")]
    UnsupportedDtype(String),

    #[error("dtype mismatch: expected {expected}, found {found}")]
    DtypeMismatch { expected: String, found: String },

    #[error("tensor {0:?} not found")]
    UnknownTensor(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn in_block(self, block: usize) -> Self {
        Error::InBlock {
            block,
            source: Box::new(self),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Innermost error, looking through block context.
    pub fn root(&self) -> &Error {
        match self {
            Error::InBlock { source, .. } => source.root(),
            other => other,
        }
    }

    /// True when the error was caused by NaN/Inf or out-of-range input values.
    pub fn is_numeric_input(&self) -> bool {
        matches!(
            self.root(),
            Error::NonFinite { .. } | Error::ExponentOutOfRange { .. }
        )
    }
}
