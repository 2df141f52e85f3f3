use std::path::PathBuf;

use thiserror::Error;

/// Everything that can go wrong inside the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("degenerate vector: norm {norm:e} is below {threshold:e}")]
    DegenerateVector { norm: f64, threshold: f64 },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error("insufficient population for class {class}: have {have}, need {need}")]
    InsufficientPopulation { class: u8, have: usize, need: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown variant tag `{0}` (expected full, -cross, -meta, -img or -txt)")]
    UnknownVariant(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shot {shot}, seed {seed}: {source}")]
    Cell {
        shot: usize,
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Coarse grouping used to map failures onto process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numeric,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::DegenerateVector { .. } | Error::Numeric(_) => ErrorClass::Numeric,
            Error::UnknownVariant(_) => ErrorClass::Usage,
            Error::Cell { source, .. } => source.class(),
            _ => ErrorClass::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Strips `Cell` annotations.
    pub fn root(&self) -> &Error {
        match self {
            Error::Cell { source, .. } => source.root(),
            other => other,
        }
    }
}

/// Failures while decoding a CMAF feature store or a model checkpoint.
#[derive(Debug, Error, PartialEq)]
pub enum FormatError {
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },

    #[error("unsupported version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("truncated payload at byte {offset} while reading {context}")]
    Truncated { offset: u64, context: String },

    #[error("dimension inconsistency: {0}")]
    DimensionInconsistency(String),

    #[error("duplicate id `{id}` at record {record}")]
    DuplicateId { id: String, record: u64 },

    #[error("invalid label {value} at record {record} (expected 0 or 1)")]
    InvalidLabel { value: u8, record: u64 },

    #[error("record {record}: id is not valid UTF-8")]
    InvalidId { record: u64 },

    #[error("record {record}: {which} sequence has zero rows")]
    EmptySequence { record: u64, which: &'static str },

    #[error("record {record}: non-finite value at byte {offset}")]
    NonFiniteValue { record: u64, offset: u64 },

    #[error("{count} trailing bytes after the last record at byte {offset}")]
    TrailingBytes { offset: u64, count: u64 },

    #[error("malformed container: {0}")]
    Malformed(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
