use serde::{Deserialize, Serialize};

/// Coarse failure classes a [`RetryPolicy`](super::RetryPolicy) reasons about.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorClass {
    Timeout,
    RateLimit,
    Server,
    Connection,
    Auth,
    BadRequest,
    Malformed,
    Other,
}

impl std::fmt::Display for ErrorClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ErrorClass::Timeout => "timeout",
            ErrorClass::RateLimit => "rate_limit",
            ErrorClass::Server => "server",
            ErrorClass::Connection => "connection",
            ErrorClass::Auth => "auth",
            ErrorClass::BadRequest => "bad_request",
            ErrorClass::Malformed => "malformed",
            ErrorClass::Other => "other",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProviderError {
    #[error("request timed out")]
    Timeout,
    #[error("rate limited (status {status})")]
    RateLimited { status: u16 },
    #[error("server error {status}: {message}")]
    Server { status: u16, message: String },
    #[error("connection failed: {0}")]
    Connection(String),
    #[error("authentication rejected (status {status})")]
    Auth { status: u16 },
    #[error("request rejected (status {status}): {message}")]
    Rejected { status: u16, message: String },
    #[error("malformed provider response: {0}")]
    Malformed(String),
    #[error("environment variable {0} is not set")]
    MissingCredential(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("provider unavailable after {attempts} attempts (last failure: {last})")]
    Unavailable {
        attempts: u32,
        last: Box<ProviderError>,
    },
    #[error("{0}")]
    Other(String),
}

impl ProviderError {
    pub fn class(&self) -> ErrorClass {
        match self {
            ProviderError::Timeout => ErrorClass::Timeout,
            ProviderError::RateLimited { .. } => ErrorClass::RateLimit,
            ProviderError::Server { .. } => ErrorClass::Server,
            ProviderError::Connection(_) => ErrorClass::Connection,
            ProviderError::Auth { .. } | ProviderError::MissingCredential(_) => ErrorClass::Auth,
            ProviderError::Rejected { .. } | ProviderError::InvalidRequest(_) => {
                ErrorClass::BadRequest
            }
            ProviderError::Malformed(_) => ErrorClass::Malformed,
            ProviderError::Unavailable { last, .. } => last.class(),
            ProviderError::Other(_) => ErrorClass::Other,
        }
    }

    /// Maps an HTTP status (non-2xx) to a provider error.
    pub fn from_status(status: u16, body: &str) -> Self {
        let message: String = body.chars().take(200).collect();
        match status {
            401 | 403 => ProviderError::Auth { status },
            408 => ProviderError::Timeout,
            429 => ProviderError::RateLimited { status },
            500..=599 => ProviderError::Server { status, message },
            _ => ProviderError::Rejected { status, message },
        }
    }

    pub fn from_reqwest(err: &reqwest::Error) -> Self {
        if err.is_timeout() {
            ProviderError::Timeout
        } else if let Some(status) = err.status() {
            ProviderError::from_status(status.as_u16(), "")
        } else if err.is_decode() {
            ProviderError::Malformed(err.to_string())
        } else {
            ProviderError::Connection(err.to_string())
        }
    }
}
