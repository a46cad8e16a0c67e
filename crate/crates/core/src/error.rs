use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header in {0}")]
    Header(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("malformed manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("target of length {target_len} (with {repeats} repeats) cannot be aligned to {frames} frames")]
    Inadmissible {
        target_len: usize,
        repeats: usize,
        frames: usize,
    },

    #[error("instance too large for enumeration: {0} alignments")]
    TooLarge(u128),

    #[error("unknown symbol {0:?}")]
    UnknownSymbol(char),

    #[error("unknown language {0:?}")]
    UnknownLanguage(String),

    #[error("non-finite gradient in tensor {0}")]
    NonFiniteGradient(String),

    #[error("training diverged at update {update}: loss {loss}")]
    Diverged { update: u64, loss: f64 },

    #[error("pseudo-label cache could not be filled after {retries} draws: every pseudo-label was filtered out (model collapsed to blank output?)")]
    CacheUnfillable { retries: usize },

    #[error("symbol table mismatch: {0}")]
    SymbolMismatch(String),

    #[error("unknown scenario {0:?}")]
    UnknownScenario(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
