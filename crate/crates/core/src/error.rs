use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value or inconsistent option combination.
    #[error("config error: {0}")]
    Config(String),

    /// Array or image dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A word is not present in the vocabulary.
    #[error("unknown word: {0:?}")]
    UnknownWord(String),

    /// An optimization loop produced a non-finite loss or gradient.
    #[error("non-finite value during {context}: {detail}")]
    NonFinite { context: String, detail: String },

    /// A referenced input artifact does not exist or cannot be parsed.
    #[error("artifact error: {0}")]
    Artifact(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    /// Process exit code associated with each error class; the CLI maps
    /// failures through this so scripts can distinguish them.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Shape(_) | Error::UnknownWord(_) => 2,
            Error::Artifact(_) => 3,
            Error::NonFinite { .. } => 4,
            Error::Io(_) | Error::Json(_) => 5,
        }
    }
}
