//! Crate-wide error type.

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// All errors surfaced by this crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Caller passed something structurally invalid (shape, range, factor).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A configuration file or override could not be applied.
    #[error("configuration error: {0}")]
    Config(String),

    /// Underlying filesystem failure. The cause lives in the message rather
    /// than in `source()`, so chained reporting prints it exactly once.
    #[error("io error: {0}")]
    Io(std::io::Error),

    /// Image or checkpoint container could not be encoded/decoded.
    #[error("format error: {0}")]
    Format(String),

    /// A training or inference run hit a non-recoverable state.
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        Error::Runtime(msg.into())
    }
}
