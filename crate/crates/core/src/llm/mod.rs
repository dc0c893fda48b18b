//! Generative labeling for OOD-routed samples: remote chat-completion
//! client, offline mocks, retry policy, admission cap and audit log.

pub mod audit;
pub mod backend;
pub mod gateway;
pub mod transport;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use audit::AuditLog;
pub use backend::{Backend, KeywordTable, RemoteConfig};
pub use gateway::{classify_ood, Gateway, OodPrediction};
pub use transport::{HttpResponse, HttpTransport, RetryPolicy, Sleeper, ThreadSleeper, Transport, TransportError};

pub const ENV_BASE_URL: &str = "TAONET_LLM_BASE_URL";
pub const ENV_MODEL: &str = "TAONET_LLM_MODEL";
pub const ENV_API_KEY: &str = "TAONET_LLM_API_KEY";

pub const DEFAULT_TEMPERATURE: f64 = 0.7;
pub const DEFAULT_TOP_P: f64 = 0.95;
pub const DEFAULT_MAX_TOKENS: u32 = 16;
pub const DEFAULT_IN_FLIGHT: usize = 4;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("no credential for the remote backend (set {ENV_API_KEY})")]
    AuthMissing,
    #[error("rate limited after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("backend unreachable after {attempts} attempts: {message}")]
    BackendUnreachable { attempts: u32, message: String },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("request rejected with status {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error(transparent)]
    Sps(#[from] crate::sps::SpsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    /// Sample id; mocks key on it and the audit log records it.
    pub request_id: String,
}

impl GenerationRequest {
    pub fn new(prompt: impl Into<String>, request_id: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            temperature: DEFAULT_TEMPERATURE,
            top_p: DEFAULT_TOP_P,
            max_tokens: DEFAULT_MAX_TOKENS,
            request_id: request_id.into(),
        }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if !(self.temperature >= 0.0) {
            return Err(LlmError::InvalidRequest(format!("temperature {} is negative", self.temperature)));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(LlmError::InvalidRequest(format!("top_p {} outside (0, 1]", self.top_p)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_defaults_and_bounds() {
        let r = GenerationRequest::new("p", "id");
        assert_eq!((r.temperature, r.top_p), (0.7, 0.95));
        r.validate().unwrap();
        assert!(GenerationRequest { temperature: -0.1, ..r.clone() }.validate().is_err());
        assert!(GenerationRequest { top_p: 0.0, ..r.clone() }.validate().is_err());
        assert!(GenerationRequest { top_p: 1.0, temperature: 0.0, ..r }.validate().is_ok());
    }
}
