use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("invalid prompt: {0}")]
    InvalidPrompt(String),

    #[error("cannot parse prompt {text:?}: {reason}")]
    PromptParse { text: String, reason: String },

    #[error("requested {requested} prompts but only {max} distinct relational triples exist (maximum {max})")]
    TooManyPrompts { requested: usize, max: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("incompatible runs: {}", .0.join(", "))]
    IncompatibleRuns(Vec<String>),

    #[error("malformed record: {0}")]
    Record(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

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
