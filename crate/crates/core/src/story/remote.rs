//! Generic HTTP text-completion backend.
//!
//! `POST <endpoint>` with a JSON body `{"prompt", "max_tokens",
//! "temperature"}` and an optional bearer token read from the environment.
//! The reply must be a JSON object with a string field `text`. The full
//! schema is in `docs/PROTOCOLS.md`.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{BackendError, GenerationRequest, StoryBackend};

pub const DEFAULT_TOKEN_ENV: &str = "GEOSTORY_BACKEND_TOKEN";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteBackendConfig {
    pub endpoint: String,
    /// Name of the environment variable holding the bearer token.
    pub token_env: String,
    pub max_tokens: u32,
    pub temperature: f64,
    pub timeout_s: u64,
}

impl Default for RemoteBackendConfig {
    fn default() -> Self {
        RemoteBackendConfig {
            endpoint: String::new(),
            token_env: DEFAULT_TOKEN_ENV.to_string(),
            max_tokens: 1024,
            temperature: 0.7,
            timeout_s: 120,
        }
    }
}

#[derive(Serialize)]
struct CompletionRequest<'a> {
    prompt: &'a str,
    max_tokens: u32,
    temperature: f64,
}

#[derive(Deserialize)]
struct CompletionResponse {
    text: String,
}

pub struct RemoteBackend {
    cfg: RemoteBackendConfig,
    token: Option<String>,
    agent: ureq::Agent,
}

impl RemoteBackend {
    pub fn new(cfg: RemoteBackendConfig) -> Result<Self, BackendError> {
        if cfg.endpoint.trim().is_empty() {
            return Err(BackendError::Config("remote backend needs an endpoint".into()));
        }
        let token = std::env::var(&cfg.token_env).ok().filter(|t| !t.is_empty());
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.timeout_s.max(1))))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(RemoteBackend { cfg, token, agent })
    }
}

impl StoryBackend for RemoteBackend {
    fn id(&self) -> &str {
        "remote"
    }

    fn generate(&self, request: &GenerationRequest) -> Result<String, BackendError> {
        let body = serde_json::to_string(&CompletionRequest {
            prompt: &request.prompt,
            max_tokens: self.cfg.max_tokens,
            temperature: self.cfg.temperature,
        })
        .expect("request serializes");
        let mut req = self
            .agent
            .post(&self.cfg.endpoint)
            .header("Content-Type", "application/json");
        if let Some(token) = &self.token {
            req = req.header("Authorization", format!("Bearer {token}"));
        }
        let mut resp = req.send(body).map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        match status {
            200..=299 => serde_json::from_str::<CompletionResponse>(&text)
                .map(|r| r.text)
                .map_err(|e| BackendError::Protocol(e.to_string())),
            429 | 500..=599 => Err(BackendError::Transport(format!("HTTP {status}"))),
            _ => Err(BackendError::Protocol(format!("HTTP {status}"))),
        }
    }
}
