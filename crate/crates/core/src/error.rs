use thiserror::Error;

/// Errors shared by every module of the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("range error: {0}")]
    Range(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("decode error in entry `{entry}`: {reason}")]
    Decode { entry: String, reason: String },
    #[error("missing data: {0}")]
    MissingData(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("capacity error: {0}")]
    Capacity(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("incomplete output: {0}")]
    Incomplete(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("pipeline error: {0}")]
    Pipeline(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Json(_) | Error::Schema(_) => 2,
            _ => 3,
        }
    }
}
