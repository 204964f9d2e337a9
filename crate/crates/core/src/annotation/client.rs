use std::collections::HashMap;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::{ContactEvent, TrajectorySummary};
use crate::error::{CoreError, Result};

/// Structured facts behind a prompt, for backends that do not read text.
#[derive(Clone, Debug, PartialEq)]
pub enum LmContext {
    Coarse { summary: TrajectorySummary },
    Fine { coarse: String, summary: TrajectorySummary, events: Vec<ContactEvent> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct LmRequest {
    pub prompt: String,
    pub context: LmContext,
}

/// Request in, text out. Implementations must be safe to retry.
pub trait LanguageModelClient: Send + Sync {
    fn complete(&self, request: &LmRequest) -> Result<String>;
}

/// Hex SHA-256 of a prompt; the key used by recorded fixtures.
pub fn prompt_key(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

/// Answers with a tag derived from the prompt hash. Fine requests get three
/// tagged sentences so downstream phase splitting succeeds.
#[derive(Clone, Copy, Debug, Default)]
pub struct EchoClient;

impl LanguageModelClient for EchoClient {
    fn complete(&self, request: &LmRequest) -> Result<String> {
        let tag = format!("[echo:{}]", &prompt_key(&request.prompt)[..12]);
        Ok(match request.context {
            LmContext::Coarse { .. } => format!("{tag}."),
            LmContext::Fine { .. } => format!("First, {tag}. Next, {tag}. Finally, {tag}."),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayEntry {
    pub prompt_sha256: String,
    pub response: String,
}

/// Replays responses recorded as JSON lines of [`ReplayEntry`].
#[derive(Clone, Debug, Default)]
pub struct ReplayClient {
    responses: HashMap<String, String>,
}

impl ReplayClient {
    pub fn from_entries(entries: impl IntoIterator<Item = ReplayEntry>) -> Self {
        Self { responses: entries.into_iter().map(|e| (e.prompt_sha256, e.response)).collect() }
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e: ReplayEntry = serde_json::from_str(line)
                .map_err(|e| CoreError::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
            entries.push(e);
        }
        Ok(Self::from_entries(entries))
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }
}

impl LanguageModelClient for ReplayClient {
    fn complete(&self, request: &LmRequest) -> Result<String> {
        self.responses.get(&prompt_key(&request.prompt)).cloned().ok_or_else(|| CoreError::LanguageModel {
            prompt: request.prompt.clone(),
            reason: "no recorded response for this prompt".into(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HttpClientConfig {
    pub endpoint: String,
    pub token: Option<String>,
    pub model: String,
    pub timeout: Duration,
}

impl HttpClientConfig {
    pub const ENDPOINT_VAR: &'static str = "HOIMOTION_LLM_ENDPOINT";
    pub const TOKEN_VAR: &'static str = "HOIMOTION_LLM_TOKEN";
    pub const TIMEOUT_VAR: &'static str = "HOIMOTION_LLM_TIMEOUT_S";
    pub const MODEL_VAR: &'static str = "HOIMOTION_LLM_MODEL";

    /// Reads the endpoint (required), token, model and timeout from the environment.
    pub fn from_env() -> Result<Self> {
        let endpoint = std::env::var(Self::ENDPOINT_VAR)
            .map_err(|_| CoreError::Config(format!("{} is not set", Self::ENDPOINT_VAR)))?;
        let timeout_s = match std::env::var(Self::TIMEOUT_VAR) {
            Ok(v) => v
                .parse::<f64>()
                .ok()
                .filter(|t| *t > 0.0)
                .ok_or_else(|| CoreError::Config(format!("{} must be a positive number, got {v:?}", Self::TIMEOUT_VAR)))?,
            Err(_) => 60.0,
        };
        Ok(Self {
            endpoint,
            token: std::env::var(Self::TOKEN_VAR).ok(),
            model: std::env::var(Self::MODEL_VAR).unwrap_or_else(|_| "default".into()),
            timeout: Duration::from_secs_f64(timeout_s),
        })
    }
}

/// OpenAI-style chat-completions client.
pub struct HttpClient {
    config: HttpClientConfig,
    agent: ureq::Agent,
}

impl HttpClient {
    pub fn new(config: HttpClientConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder().timeout_global(Some(config.timeout)).build().into();
        Self { config, agent }
    }
}

impl LanguageModelClient for HttpClient {
    fn complete(&self, request: &LmRequest) -> Result<String> {
        let fail = |reason: String| CoreError::LanguageModel { prompt: request.prompt.clone(), reason };
        let body = json!({
            "model": self.config.model,
            "temperature": 0.0,
            "messages": [{"role": "user", "content": request.prompt}],
        });
        let mut req = self.agent.post(&self.config.endpoint);
        if let Some(token) = &self.config.token {
            req = req.header("Authorization", format!("Bearer {token}"));
        }
        let mut resp = req.send_json(&body).map_err(|e| fail(e.to_string()))?;
        let v: Value = resp.body_mut().read_json().map_err(|e| fail(e.to_string()))?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_owned)
            .ok_or_else(|| fail("response lacks choices[0].message.content".into()))
    }
}
