//! Backend kinds and the remote wire protocol.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::transport::{RetryPolicy, Sleeper, Transport};
use super::{GenerationRequest, LlmError, ENV_API_KEY, ENV_BASE_URL, ENV_MODEL};

/// Remote chat-completion endpoint. The credential is read when a call is made.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub base_url: String,
    pub model: String,
    #[serde(skip)]
    pub api_key: Option<String>,
}

impl std::fmt::Debug for RemoteConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteConfig")
            .field("base_url", &self.base_url)
            .field("model", &self.model)
            .field("api_key", &self.api_key.as_ref().map(|_| "[REDACTED]"))
            .finish()
    }
}

impl RemoteConfig {
    /// Reads the endpoint, model and key from the environment.
    pub fn from_env() -> Self {
        let var = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
        Self {
            base_url: var(ENV_BASE_URL).unwrap_or_else(|| "http://localhost:8000/v1".into()),
            model: var(ENV_MODEL).unwrap_or_else(|| "default".into()),
            api_key: var(ENV_API_KEY),
        }
    }

    pub fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }

    pub fn request_body(&self, req: &GenerationRequest) -> serde_json::Value {
        serde_json::json!({
            "model": self.model,
            "messages": [{ "role": "user", "content": req.prompt }],
            "temperature": req.temperature,
            "top_p": req.top_p,
            "max_tokens": req.max_tokens,
        })
    }
}

/// Extracts `choices[0].message.content`.
pub fn parse_completion(body: &str) -> Result<String, LlmError> {
    let v: serde_json::Value =
        serde_json::from_str(body).map_err(|e| LlmError::MalformedResponse(format!("not JSON: {e}")))?;
    v.pointer("/choices/0/message/content")
        .and_then(|c| c.as_str())
        .map(str::to_string)
        .ok_or_else(|| LlmError::MalformedResponse("missing choices[0].message.content".into()))
}

/// Sends the request, retrying transient failures. Returns the text and the
/// number of attempts used.
pub fn remote_complete(
    config: &RemoteConfig,
    req: &GenerationRequest,
    transport: &dyn Transport,
    sleeper: &dyn Sleeper,
    policy: &RetryPolicy,
) -> Result<(String, u32), LlmError> {
    let key = config.api_key.as_deref().filter(|k| !k.is_empty()).ok_or(LlmError::AuthMissing)?;
    let body = config.request_body(req);
    let url = config.endpoint();
    let mut attempt = 0;
    loop {
        attempt += 1;
        let failure = match transport.post_json(&url, key, &body) {
            Ok(resp) if (200..300).contains(&resp.status) => return parse_completion(&resp.body).map(|t| (t, attempt)),
            Ok(resp) if RetryPolicy::is_transient(resp.status) => {
                if resp.status == 429 {
                    LlmError::RateLimited { attempts: attempt }
                } else {
                    LlmError::BackendUnreachable { attempts: attempt, message: format!("status {}", resp.status) }
                }
            }
            Ok(resp) => {
                let body: String = resp.body.chars().take(200).collect();
                return Err(LlmError::Rejected { status: resp.status, body: body.replace(key, "[REDACTED]") });
            }
            Err(e) => LlmError::BackendUnreachable { attempts: attempt, message: e.0.replace(key, "[REDACTED]") },
        };
        if attempt >= policy.max_attempts {
            return Err(failure);
        }
        sleeper.sleep(policy.delay_after(attempt));
    }
}

/// Ordered `label → keywords`; a label matches when every keyword occurs in the prompt.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordTable {
    pub rules: Vec<(String, Vec<String>)>,
    /// Returned when no rule matches.
    #[serde(default = "KeywordTable::default_fallback")]
    pub fallback: String,
}

impl KeywordTable {
    fn default_fallback() -> String {
        "unknown application".into()
    }

    pub fn new(rules: Vec<(String, Vec<String>)>) -> Self {
        Self { rules, fallback: Self::default_fallback() }
    }

    pub fn lookup(&self, prompt: &str) -> String {
        self.rules
            .iter()
            .find(|(_, kws)| kws.iter().all(|k| prompt.contains(k.as_str())))
            .map_or_else(|| self.fallback.clone(), |(label, _)| label.clone())
    }
}

#[derive(Debug, Clone)]
pub enum Backend {
    Remote(RemoteConfig),
    MockKeyword(KeywordTable),
    /// Test-only: answers with the gold label of the request id.
    MockOracle(BTreeMap<String, String>),
}

impl Backend {
    pub fn kind(&self) -> &'static str {
        match self {
            Backend::Remote(_) => "remote",
            Backend::MockKeyword(_) => "mock-keyword",
            Backend::MockOracle(_) => "mock-oracle",
        }
    }

    pub fn is_mock(&self) -> bool {
        !matches!(self, Backend::Remote(_))
    }
}
