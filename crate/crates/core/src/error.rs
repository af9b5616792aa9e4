use std::path::PathBuf;

use thiserror::Error;

/// Shard container parse failures. Each corruption mode is distinct.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ShardError {
    #[error("bad magic bytes (expected \"OVSH\")")]
    BadMagic,
    #[error("unsupported shard version {0}")]
    UnsupportedVersion(u16),
    #[error("shard truncated while reading {0}")]
    Truncated(&'static str),
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("declared {declared} records but parsed {parsed}")]
    CountMismatch { declared: u64, parsed: u64 },
    #[error("malformed record {index}: {reason}")]
    MalformedRecord { index: u64, reason: String },
    #[error("refusing to write an empty shard")]
    Empty,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("invalid config:\n  {}", .0.join("\n  "))]
    Validation(Vec<String>),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("loss function is not deterministic: {0}")]
    Determinism(String),
    #[error("sequence of length {length} exceeds context {context}")]
    ContextOverflow { length: usize, context: usize },
    #[error("shard {path}: {source}")]
    Shard {
        path: PathBuf,
        #[source]
        source: ShardError,
    },
    #[error(transparent)]
    ShardFormat(#[from] ShardError),
    #[error("checkpoint format: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for this error category.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Validation(_) | Error::ContextOverflow { .. } => 2,
            Error::Data(_) | Error::Shard { .. } | Error::ShardFormat(_) | Error::Checkpoint(_) => 3,
            Error::Numeric(_) | Error::Determinism(_) => 4,
            Error::Dimension(_) | Error::Contract(_) => 2,
            Error::Io(_) => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::error::Error::Dimension(format!($($arg)*)) };
}
pub(crate) use dim_err;
