use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failure of an external (or simulated) model backend.
#[derive(Debug, Error)]
pub enum BackendError {
    #[error("authentication rejected (status {status}): {body}")]
    Auth { status: u16, body: String },
    #[error("request failed with status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("request timed out")]
    Timeout,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("missing credential: environment variable {0} is not set")]
    MissingCredential(String),
    #[error("malformed response: {0}")]
    Decode(String),
    #[error("unknown element: {0}")]
    UnknownElement(String),
    #[error("invalid image reference: {0}")]
    InvalidImage(String),
    #[error("sim cannot serve this prompt: {0}")]
    Unsupported(String),
    #[error("backend returned a non-finite value")]
    NonFinite,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl BackendError {
    /// Whether a retry with backoff may succeed.
    pub fn is_transient(&self) -> bool {
        match self {
            BackendError::Status { status, .. } => *status == 429 || *status >= 500,
            BackendError::Timeout | BackendError::Transport(_) => true,
            _ => false,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("no reports")]
    NoReports,
    #[error("score {0} is outside [0, 1]")]
    ScoreOutOfRange(f64),
    #[error("percentage {0} is outside [0, 100]")]
    PercentOutOfRange(f64),
    #[error("undefined relative improvement: initial score is zero")]
    UndefinedRelativeImprovement,
    #[error("history is empty")]
    EmptyHistory,
    #[error("no prompts parsed")]
    NoPromptsParsed,
    #[error("no noun phrases parsed")]
    NoPhrases,
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error("embedder failed on phrase {index}: {source}")]
    Embedder {
        index: usize,
        #[source]
        source: BackendError,
    },
    #[error("question answering failed on question {question_id}: {source}")]
    Vqa {
        question_id: u32,
        #[source]
        source: BackendError,
    },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("filter undefined for dCS")]
    FilterUndefinedForDcs,
    #[error("pool of {available} images is smaller than k = {k}")]
    PoolTooSmall { available: usize, k: usize },
    #[error("method budgets differ: {0}")]
    BudgetMismatch(String),
    #[error("run directory {path} is locked by another process")]
    Locked { path: PathBuf },
    #[error("run directory error at {path}: {message}")]
    RunDir { path: PathBuf, message: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Whether this error originates in a backend (infrastructure) rather than
    /// in user input or configuration.
    pub fn is_infrastructure(&self) -> bool {
        matches!(
            self,
            Error::Backend(_)
                | Error::Embedder { .. }
                | Error::Vqa { .. }
                | Error::Io(_)
                | Error::Locked { .. }
                | Error::RunDir { .. }
        )
    }
}
