use thiserror::Error;

/// Unified error type for tensor ops, model construction, and I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape or argument mismatch in a tensor operation.
    #[error("{op}: {msg}")]
    Shape { op: &'static str, msg: String },

    /// Invalid or inconsistent configuration.
    #[error("config: {0}")]
    Config(String),

    /// Backward-pass misuse (no recorded graph, non-scalar root, ...).
    #[error("autograd: {0}")]
    Autograd(String),

    /// Malformed or incompatible weights file.
    #[error("weights: {0}")]
    Weights(String),

    /// Malformed dataset or annotation records.
    #[error("data: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Shape { op, msg: msg.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
