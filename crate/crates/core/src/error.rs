use thiserror::Error;

/// Errors raised anywhere in the model, training, evaluation and data layers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Incompatible tensor shapes or grid sizes.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),
    /// A caller broke an operation's precondition.
    #[error("contract error: {0}")]
    Contract(String),
    /// Operation invoked in the wrong lifecycle state.
    #[error("state error: {0}")]
    State(String),
    /// The dataset cannot satisfy the request.
    #[error("data error: {0}")]
    Data(String),
    /// Non-finite value encountered during training.
    #[error("numeric error: {0}")]
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}
