use thiserror::Error;

/// Errors raised by the certifier and its supporting machinery.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("structural error: {0}")]
    Structural(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("value {value} is not representable in {format}")]
    NotRepresentable { value: String, format: String },

    #[error("floating-point execution overflowed at layer {layer}")]
    Overflow { layer: usize },

    #[error("search failed: {0}")]
    SearchFailure(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
