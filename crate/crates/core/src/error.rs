use std::path::PathBuf;

/// Errors produced anywhere in the retrieval lab.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{0}")]
    Invalid(String),

    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("tokenizer hash mismatch: expected {expected}, found {found}")]
    TokenizerMismatch { expected: String, found: String },

    #[error("sequence of length {len} exceeds maximum {max} ({what})")]
    LengthOverflow {
        what: &'static str,
        len: usize,
        max: usize,
    },

    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },

    #[error("missing label for query {0}")]
    MissingLabel(String),

    #[error("unknown passage id {0}")]
    UnknownPassage(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("schema mismatch: {0}")]
    Schema(String),

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Validation failures map to exit code 1, everything else to 2.
    pub fn is_validation(&self) -> bool {
        if let Error::Stage { source, .. } = self {
            return source.is_validation();
        }
        matches!(
            self,
            Error::Config(_)
                | Error::Parse { .. }
                | Error::Invalid(_)
                | Error::Schema(_)
                | Error::MissingLabel(_)
                | Error::UnknownPassage(_)
                | Error::TokenizerMismatch { .. }
        )
    }

    pub fn in_stage(stage: &'static str) -> impl FnOnce(Error) -> Error {
        move |e| Error::Stage { stage, source: Box::new(e) }
    }
}
