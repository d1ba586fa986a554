//! Crate-wide error type and exit-code mapping.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {left:?} vs {right:?} in {op}")]
    DimMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("domain error in {op}: {msg}")]
    Domain { op: &'static str, msg: String },

    #[error("non-finite value in {op}: {msg}")]
    Numeric { op: &'static str, msg: String },

    #[error("no router registered for dataset {0}")]
    UnknownDataset(u32),

    #[error("structural error: {0}")]
    Structural(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("inadmissible plan: {0}")]
    Plan(String),

    #[error("missing entity: {0}")]
    Missing(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the CLI: 0 ok, 2 config, 3 numeric, 4 plan, 5 missing entity.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Json(_) | Error::Io(_) => 2,
            Error::Numeric { .. } | Error::Domain { .. } => 3,
            Error::Plan(_) => 4,
            Error::Missing(_) | Error::UnknownDataset(_) => 5,
            _ => 2,
        }
    }
}
