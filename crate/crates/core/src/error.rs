use std::path::PathBuf;

/// Errors surfaced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid environment, training, or analysis configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// A config key failed validation. Always names the key.
    #[error("config key `{key}`: {message}")]
    ConfigKey { key: String, message: String },

    /// Inputs that violate an operation's preconditions.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Sequence lengths that must agree do not.
    #[error("length mismatch: {what} ({left} vs {right})")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },

    /// Non-finite values in logits, losses, gradients, or updates.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Attempt to mutate a frozen snapshot or mix snapshots from different versions.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Malformed trace line.
    #[error("trace line {line}: {message}")]
    TraceFormat { line: usize, message: String },

    /// Malformed checkpoint file.
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    /// Metrics logs that cannot be combined into one report.
    #[error("report error: {0}")]
    Report(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn key(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::ConfigKey {
            key: key.into(),
            message: message.into(),
        }
    }

    /// True for errors that represent a numerical failure (CLI exit code 2).
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
