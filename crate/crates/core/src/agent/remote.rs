//! Policy backed by an HTTP chat-completion endpoint.
//!
//! Configuration comes from the environment:
//! `SRSPLAN_POLICY_URL` (required), `SRSPLAN_POLICY_MODEL`,
//! `SRSPLAN_POLICY_API_KEY` and `SRSPLAN_POLICY_TIMEOUT_S`.

use std::time::Duration;

use serde_json::{json, Value};

use super::policy::{PolicyAdapter, PolicyConfig, PolicyError, PolicyRequest};

pub const ENV_URL: &str = "SRSPLAN_POLICY_URL";
pub const ENV_MODEL: &str = "SRSPLAN_POLICY_MODEL";
pub const ENV_API_KEY: &str = "SRSPLAN_POLICY_API_KEY";
pub const ENV_TIMEOUT: &str = "SRSPLAN_POLICY_TIMEOUT_S";

const SYSTEM_PROMPT: &str =
    "You are an expert medical dosimetrist. Think step by step, then answer in the requested format.";

#[derive(Debug, Clone, PartialEq)]
pub struct RemotePolicyConfig {
    pub url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub sampling: PolicyConfig,
}

impl RemotePolicyConfig {
    pub fn from_env(sampling: PolicyConfig) -> Result<Self, PolicyError> {
        Self::from_lookup(sampling, |k| std::env::var(k).ok())
    }

    pub fn from_lookup(sampling: PolicyConfig, get: impl Fn(&str) -> Option<String>) -> Result<Self, PolicyError> {
        let url = get(ENV_URL)
            .filter(|u| !u.is_empty())
            .ok_or_else(|| PolicyError::Config(format!("{ENV_URL} is not set")))?;
        let timeout_s = match get(ENV_TIMEOUT) {
            Some(t) => t.parse::<u64>().map_err(|e| PolicyError::Config(format!("{ENV_TIMEOUT}: {e}")))?,
            None => 120,
        };
        Ok(Self {
            url,
            model: get(ENV_MODEL).unwrap_or_else(|| "default".into()),
            api_key: get(ENV_API_KEY).filter(|k| !k.is_empty()),
            timeout: Duration::from_secs(timeout_s),
            sampling,
        })
    }
}

pub struct RemotePolicy {
    cfg: RemotePolicyConfig,
    name: String,
    agent: ureq::Agent,
}

impl RemotePolicy {
    pub fn new(cfg: RemotePolicyConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder().timeout_global(Some(cfg.timeout)).build().into();
        let name = format!("remote:{}", cfg.model);
        Self { cfg, name, agent }
    }

    /// Request body sent for `prompt`.
    pub fn request_body(&self, prompt: &str, seed: u64) -> Value {
        json!({
            "model": self.cfg.model,
            "messages": [
                { "role": "system", "content": SYSTEM_PROMPT },
                { "role": "user", "content": prompt },
            ],
            "temperature": self.cfg.sampling.temperature,
            "top_k": self.cfg.sampling.top_k,
            "seed": seed,
        })
    }
}

fn extract_content(v: &Value) -> Option<String> {
    let choice = v.get("choices")?.get(0)?;
    choice
        .get("message")
        .and_then(|m| m.get("content"))
        .or_else(|| choice.get("text"))
        .and_then(Value::as_str)
        .map(str::to_string)
}

impl PolicyAdapter for RemotePolicy {
    fn name(&self) -> &str {
        &self.name
    }

    fn config(&self) -> &PolicyConfig {
        &self.cfg.sampling
    }

    fn invoke(&self, request: &PolicyRequest<'_>) -> Result<String, PolicyError> {
        let body = self.request_body(request.prompt, request.context.seed);
        let mut req = self.agent.post(&self.cfg.url).header("Content-Type", "application/json");
        if let Some(key) = &self.cfg.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(&body).map_err(|e| PolicyError::Transport(e.to_string()))?;
        let v: Value = resp.body_mut().read_json().map_err(|e| PolicyError::Transport(e.to_string()))?;
        extract_content(&v).ok_or_else(|| PolicyError::Transport("response has no message content".into()))
    }
}
