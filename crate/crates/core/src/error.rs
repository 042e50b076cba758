use thiserror::Error;

/// Error taxonomy shared by every module. The CLI maps these onto distinct
/// exit codes (configuration vs numerical failure).
#[derive(Debug, Error)]
pub enum Error {
    /// Caller violated an operation contract (shape mismatch, non-scalar
    /// loss, invalid argument range).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Bad or inconsistent run configuration / missing input artifact.
    #[error("configuration error: {0}")]
    Config(String),

    /// A forward or backward pass produced NaN/Inf. Carries the op name.
    #[error("numerical failure in `{op}`: {detail}")]
    Numerical { op: String, detail: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn numerical(op: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numerical { op: op.into(), detail: detail.into() }
    }
}
