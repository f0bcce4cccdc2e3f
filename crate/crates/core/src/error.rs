use std::path::PathBuf;

use crate::vector::TokenId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("vector has zero dimension")]
    EmptyVector,

    #[error("non-finite element {value} at position {position}")]
    NonFinite { position: usize, value: f32 },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("length mismatch: {what} ({left} vs {right})")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },

    #[error("duplicate token id {0}")]
    DuplicateToken(TokenId),

    #[error("token id {id} out of range for {len} tokens")]
    TokenOutOfRange { id: TokenId, len: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid model shape: {0}")]
    InvalidShape(String),

    #[error("partial attention is empty")]
    EmptyPartial,

    #[error("no token satisfies the filter predicate")]
    NoAdmittedNode,

    #[error("unknown context {0}")]
    UnknownContext(u64),

    #[error("index {0} was not built for this context")]
    IndexMissing(&'static str),

    #[error("session holds no tokens")]
    EmptySession,

    #[error("unknown block {block} in {path}")]
    UnknownBlock { path: PathBuf, block: u64 },

    #[error("buffer pool exhausted: all {0} frames pinned")]
    PoolExhausted(usize),

    #[error("corrupt vector file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("I/O error on {path} at offset {offset}: {source}")]
    Io {
        path: PathBuf,
        offset: u64,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest error: {0}")]
    Manifest(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, offset: u64, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            offset,
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}
