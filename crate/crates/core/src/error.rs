use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("{path}: input is not valid UTF-8 ({source})")]
    Utf8 {
        path: String,
        #[source]
        source: std::string::FromUtf8Error,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("sequence of {len} tokens exceeds max_seq {max_seq}; truncate or split the input")]
    SequenceTooLong { len: usize, max_seq: usize },

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: u64, loss: f64 },

    #[error("leakage guard: refusing to train tokenizer on held-out path {0}")]
    Leakage(PathBuf),

    #[error("word {word:?} does not occur in the corpus; nearest matches: {suggestions:?}")]
    WordNotFound {
        word: String,
        suggestions: Vec<String>,
    },

    #[error("unknown {kind} {name:?}; registered: {known:?}")]
    UnknownName {
        kind: &'static str,
        name: String,
        known: Vec<String>,
    },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
