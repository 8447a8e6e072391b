use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("nothing to index")]
    NothingToIndex,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("probability exceeds 1 (logprob {0})")]
    ProbabilityExceedsOne(f64),

    #[error("degenerate probability")]
    DegenerateProbability,

    #[error("empty second chunk")]
    EmptySecondChunk,

    #[error("degenerate embedding")]
    DegenerateEmbedding,

    #[error("zero variance")]
    ZeroVariance,

    #[error("AUROC undefined: {0}")]
    AurocUndefined(&'static str),

    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("non-finite loss at epoch {epoch}, step {step}: {value}")]
    NonFiniteLoss { epoch: usize, step: usize, value: f64 },

    #[error("bad file format: {0}")]
    Format(String),

    #[error("template error: {0}")]
    Template(String),

    #[error("config invariant violated: {0}")]
    Config(String),

    #[error(transparent)]
    Provider(#[from] ProviderError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Failures surfaced by log-probability backends.
#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("transport error after {attempts} attempts: {message}")]
    Transport { attempts: usize, message: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("no cached scores for request (key {0})")]
    CacheMiss(String),

    #[error("ambiguous boundary: {0}")]
    AmbiguousBoundary(String),

    #[error("empty input text")]
    EmptyText,

    #[error("cache io: {0}")]
    CacheIo(String),
}
