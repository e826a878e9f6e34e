//! OpenAI-compatible HTTP clients (chat completions) and the retry policy
//! shared with the remote embedding encoder.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

/// Endpoint settings for one remote service.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub base_url: String,
    #[serde(default)]
    pub api_key: Option<String>,
    pub model: String,
}

impl EndpointConfig {
    /// Reads `{PREFIX}_BASE_URL`, `{PREFIX}_MODEL` and `{PREFIX}_API_KEY`.
    /// Returns `None` unless both URL and model are set.
    pub fn from_env(prefix: &str) -> Option<Self> {
        let base_url = std::env::var(format!("{prefix}_BASE_URL")).ok()?;
        let model = std::env::var(format!("{prefix}_MODEL")).ok()?;
        let api_key = std::env::var(format!("{prefix}_API_KEY")).ok();
        Some(EndpointConfig {
            base_url,
            api_key,
            model,
        })
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.base_url.trim_end_matches('/'), path)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}

impl RetryPolicy {
    /// Runs `op` up to `attempts` times, sleeping `base_delay * 2^i` between
    /// failures. Returns the last error message.
    pub fn run<T>(&self, mut op: impl FnMut() -> Result<T, String>) -> Result<T, String> {
        let attempts = self.attempts.max(1);
        let mut last = String::new();
        for attempt in 0..attempts {
            match op() {
                Ok(v) => return Ok(v),
                Err(e) => {
                    log::warn!("remote attempt {}/{} failed: {e}", attempt + 1, attempts);
                    last = e;
                    if attempt + 1 < attempts {
                        std::thread::sleep(self.base_delay * 2u32.pow(attempt));
                    }
                }
            }
        }
        Err(last)
    }
}

pub(crate) fn make_agent() -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_secs(120)))
        .build()
        .into()
}

pub(crate) fn post_json(
    agent: &ureq::Agent,
    endpoint: &EndpointConfig,
    path: &str,
    body: &Value,
) -> Result<Value, String> {
    let mut req = agent.post(endpoint.url(path));
    if let Some(key) = &endpoint.api_key {
        req = req.header("Authorization", format!("Bearer {key}"));
    }
    req.send_json(body)
        .map_err(|e| e.to_string())?
        .body_mut()
        .read_json::<Value>()
        .map_err(|e| e.to_string())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self::new("system", content)
    }
    pub fn user(content: impl Into<String>) -> Self {
        Self::new("user", content)
    }
    pub fn assistant(content: impl Into<String>) -> Self {
        Self::new("assistant", content)
    }
    fn new(role: &str, content: impl Into<String>) -> Self {
        ChatMessage {
            role: role.to_string(),
            content: content.into(),
        }
    }
}

/// Chat-completions client. Sampling temperature is always 0.
#[derive(Clone)]
pub struct ChatClient {
    endpoint: EndpointConfig,
    retry: RetryPolicy,
    agent: ureq::Agent,
}

impl std::fmt::Debug for ChatClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ChatClient")
            .field("endpoint", &self.endpoint.base_url)
            .field("model", &self.endpoint.model)
            .finish()
    }
}

impl ChatClient {
    pub fn new(endpoint: EndpointConfig, retry: RetryPolicy) -> Self {
        ChatClient {
            endpoint,
            retry,
            agent: make_agent(),
        }
    }

    pub fn model(&self) -> &str {
        &self.endpoint.model
    }

    pub fn complete(&self, messages: &[ChatMessage]) -> Result<String> {
        let body = serde_json::json!({
            "model": self.endpoint.model,
            "messages": messages,
            "temperature": 0,
        });
        self.retry
            .run(|| {
                let resp = post_json(&self.agent, &self.endpoint, "chat/completions", &body)?;
                resp.pointer("/choices/0/message/content")
                    .and_then(Value::as_str)
                    .map(str::to_string)
                    .ok_or_else(|| format!("malformed chat response: {resp}"))
            })
            .map_err(Error::Remote)
    }
}
