use thiserror::Error;

/// Errors produced anywhere in the generation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("value out of domain: {0}")]
    Domain(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("format error in record {record}: {reason}")]
    Format { record: String, reason: String },
    #[error("non-finite value during training at step {step}: {what}")]
    Training { step: u64, what: String },
    #[error("non-finite state during sampling at Euler step {step}")]
    Sampling { step: usize },
    #[error("numerical failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by arithmetic (NaN/Inf, solver breakdown)
    /// rather than by bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Training { .. } | Error::Sampling { .. } | Error::Numeric(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure_same_len(what: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{what}: lengths {a} and {b} differ")));
    }
    Ok(())
}
