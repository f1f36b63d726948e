use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid scene: {0}")]
    InvalidScene(String),

    #[error("shape mismatch in {what}: expected {expected}, got {actual}")]
    Shape {
        what: String,
        expected: String,
        actual: String,
    },

    #[error("invalid argument `{name}`: {reason}")]
    InvalidArgument { name: String, reason: String },

    #[error("invalid config key `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("codec mismatch: latents were produced by `{produced_by}`, decoder is `{decoder}`")]
    CodecMismatch { produced_by: String, decoder: String },

    #[error("checkpoint rejected: {0}")]
    Checkpoint(String),

    #[error("non-finite activations in stage `{0}`")]
    NonFinite(String),

    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },

    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: u32, size: usize },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub fn shape(what: impl Into<String>, expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape {
            what: what.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub fn arg(name: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            name: name.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the error was caused by bad user input rather than a bug or
    /// environment failure. The CLI maps this to its exit code.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidScene(_)
                | Error::Shape { .. }
                | Error::InvalidArgument { .. }
                | Error::Config { .. }
                | Error::CodecMismatch { .. }
                | Error::Checkpoint(_)
                | Error::TokenOutOfRange { .. }
                | Error::Io { .. }
                | Error::Image { .. }
                | Error::Json(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
