//! HTTP transport, sleeping and the retry schedule, all swappable in tests.

use std::time::Duration;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
}

#[derive(Debug, Clone, Error)]
#[error("connection error: {0}")]
pub struct TransportError(pub String);

pub trait Transport: Send + Sync {
    /// POSTs `body` as JSON with a bearer token.
    fn post_json(&self, url: &str, bearer: &str, body: &serde_json::Value) -> Result<HttpResponse, TransportError>;
}

/// Blocking HTTP client.
pub struct HttpTransport {
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new(timeout: Duration) -> Result<Self, TransportError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| TransportError(e.to_string()))?;
        Ok(Self { client })
    }
}

impl Transport for HttpTransport {
    fn post_json(&self, url: &str, bearer: &str, body: &serde_json::Value) -> Result<HttpResponse, TransportError> {
        let resp = self
            .client
            .post(url)
            .bearer_auth(bearer)
            .json(body)
            .send()
            .map_err(|e| TransportError(e.without_url().to_string()))?;
        let status = resp.status().as_u16();
        let body = resp.text().map_err(|e| TransportError(e.without_url().to_string()))?;
        Ok(HttpResponse { status, body })
    }
}

pub trait Sleeper: Send + Sync {
    fn sleep(&self, d: Duration);
}

pub struct ThreadSleeper;

impl Sleeper for ThreadSleeper {
    fn sleep(&self, d: Duration) {
        std::thread::sleep(d);
    }
}

/// Exponential backoff: the wait after failed attempt `n` (1-based) is
/// `base · factor^(n−1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base: Duration,
    pub factor: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 5, base: Duration::from_secs(1), factor: 2 }
    }
}

impl RetryPolicy {
    pub fn delay_after(&self, attempt: u32) -> Duration {
        self.base * self.factor.pow(attempt.saturating_sub(1))
    }

    pub fn is_transient(status: u16) -> bool {
        status == 429 || (500..600).contains(&status)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule() {
        let p = RetryPolicy::default();
        let delays: Vec<u64> = (1..5).map(|a| p.delay_after(a).as_secs()).collect();
        assert_eq!(delays, [1, 2, 4, 8]);
        assert!(RetryPolicy::is_transient(429));
        assert!(RetryPolicy::is_transient(503));
        assert!(!RetryPolicy::is_transient(400));
        assert!(!RetryPolicy::is_transient(200));
    }
}
