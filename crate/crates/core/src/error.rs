use thiserror::Error;

pub type Result<T> = std::result::Result<T, QcdError>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QcdError {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("stream count {streams} exceeds the limit {limit} for {what}")]
    TooManyStreams {
        streams: usize,
        limit: usize,
        what: &'static str,
    },

    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error("increments depend on the candidate change point; {0}")]
    ChangePointDependent(String),

    #[error("window of {available} samples cannot cover {requested} candidate change points")]
    WindowTooShort { available: usize, requested: usize },

    #[error("no threshold A > 1 solves the cost equation: {0}")]
    Infeasible(String),

    #[error("horizon {horizon} too short: prior tail {tail:e} beyond horizon exceeds {limit:e}")]
    InsufficientHorizon {
        horizon: usize,
        tail: f64,
        limit: f64,
    },
}

impl QcdError {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        QcdError::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
