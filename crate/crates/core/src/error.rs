use thiserror::Error;

/// Errors raised while talking to a critic, local or remote.
#[derive(Debug, Error)]
pub enum CriticError {
    /// Connection, timeout or 5xx failure. Safe to retry.
    #[error("critic transport failure: {0}")]
    Transport(String),

    /// The server answered with a payload that breaks the wire contract.
    #[error("critic protocol violation: {0}")]
    Protocol(String),

    /// Error reported by the server itself, passed through unchanged.
    #[error("critic server error {status} ({code}): {message}")]
    Server {
        status: u16,
        code: String,
        message: String,
    },

    #[error("critic schedule mismatch: {0}")]
    ScheduleMismatch(String),

    #[error("critic returned non-finite values from {0}")]
    NonFinite(&'static str),

    #[error("critic does not support {0}")]
    Unsupported(&'static str),
}

impl CriticError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, CriticError::Transport(_))
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error(transparent)]
    Critic(#[from] CriticError),

    #[error("svg parse error at byte {offset}: {message}")]
    SvgParse { offset: usize, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn check_shape(expected: &[usize], found: &[usize]) -> Result<()> {
    if expected != found {
        return Err(Error::ShapeMismatch {
            expected: expected.to_vec(),
            found: found.to_vec(),
        });
    }
    Ok(())
}
