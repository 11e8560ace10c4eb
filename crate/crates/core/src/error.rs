use thiserror::Error;

pub type Result<T> = std::result::Result<T, FameError>;

#[derive(Debug, Error)]
pub enum FameError {
    #[error("io error")]
    Io(#[from] std::io::Error),

    #[error("malformed tensor file: {0}")]
    Format(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("invalid json")]
    Json(#[from] serde_json::Error),
}

impl FameError {
    /// Stable diagnostic taxonomy used by the command line: `io`, `config`,
    /// `shape` or `numeric`.
    pub fn kind(&self) -> &'static str {
        match self {
            FameError::Io(_) | FameError::Format(_) => "io",
            FameError::Config(_) | FameError::Json(_) => "config",
            FameError::Shape(_) => "shape",
            FameError::Numeric(_) => "numeric",
        }
    }
}

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::FameError::Shape(format!($($arg)*)) };
}

macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::FameError::Config(format!($($arg)*)) };
}

pub(crate) use config_err;
pub(crate) use shape_err;
