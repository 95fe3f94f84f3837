use thiserror::Error;

pub type Result<T, E = CcaError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CcaError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// A documented precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("not found: {0}")]
    NotFound(String),

    /// NaN/Inf reached a loss or a gradient.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("tape error: {0}")]
    Tape(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CcaError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        CcaError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        CcaError::Contract(msg.into())
    }
}
