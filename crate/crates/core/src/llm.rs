//! Text-completion backends.
//!
//! Everything that talks to a language model goes through [`LlmBackend`], so
//! tests and offline runs can inject [`ScriptedBackend`] in place of the HTTP
//! adapter.

use std::collections::VecDeque;
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("backend returned an unusable payload: {0}")]
    BadPayload(String),
    #[error("backend config: {0}")]
    Config(String),
}

pub trait LlmBackend: Send + Sync {
    fn name(&self) -> &str;
    fn complete(&self, prompt: &str) -> Result<String, BackendError>;
}

impl<T: LlmBackend + ?Sized> LlmBackend for &T {
    fn name(&self) -> &str {
        (**self).name()
    }

    fn complete(&self, prompt: &str) -> Result<String, BackendError> {
        (**self).complete(prompt)
    }
}

impl<T: LlmBackend + ?Sized> LlmBackend for std::sync::Arc<T> {
    fn name(&self) -> &str {
        (**self).name()
    }

    fn complete(&self, prompt: &str) -> Result<String, BackendError> {
        (**self).complete(prompt)
    }
}

/// Hex SHA-256 of a prompt or response, used in audit records.
pub fn text_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

type Responder = Box<dyn Fn(&str) -> Result<String, BackendError> + Send + Sync>;

/// Deterministic test double.
///
/// Either replays a fixed queue of responses or answers through a closure.
/// Every prompt it receives is recorded.
pub struct ScriptedBackend {
    name: String,
    queue: Mutex<VecDeque<Result<String, BackendError>>>,
    fallback: Option<Responder>,
    calls: Mutex<Vec<String>>,
}

impl ScriptedBackend {
    pub fn new<I, S>(responses: I) -> Self
    where
        I: IntoIterator<Item = Result<S, BackendError>>,
        S: Into<String>,
    {
        ScriptedBackend {
            name: "scripted".into(),
            queue: Mutex::new(responses.into_iter().map(|r| r.map(Into::into)).collect()),
            fallback: None,
            calls: Mutex::new(Vec::new()),
        }
    }

    /// Answers every prompt with `f`.
    pub fn with_handler<F>(f: F) -> Self
    where
        F: Fn(&str) -> Result<String, BackendError> + Send + Sync + 'static,
    {
        ScriptedBackend {
            name: "scripted".into(),
            queue: Mutex::new(VecDeque::new()),
            fallback: Some(Box::new(f)),
            calls: Mutex::new(Vec::new()),
        }
    }

    /// A backend that is never reachable.
    pub fn unavailable() -> Self {
        ScriptedBackend::with_handler(|_| Err(BackendError::Unavailable("offline".into())))
    }

    pub fn calls(&self) -> Vec<String> {
        self.calls.lock().expect("calls lock").clone()
    }

    pub fn call_count(&self) -> usize {
        self.calls.lock().expect("calls lock").len()
    }
}

impl LlmBackend for ScriptedBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn complete(&self, prompt: &str) -> Result<String, BackendError> {
        self.calls.lock().expect("calls lock").push(prompt.to_string());
        if let Some(next) = self.queue.lock().expect("queue lock").pop_front() {
            return next;
        }
        match &self.fallback {
            Some(f) => f(prompt),
            None => Err(BackendError::Unavailable("script exhausted".into())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provider {
    /// Any server speaking the `/v1/chat/completions` protocol.
    OpenaiCompatible,
    /// No network backend; callers fall back to offline estimation.
    Offline,
}

/// Backend adapter config, usually loaded from a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub provider: Provider,
    #[serde(default)]
    pub endpoint: String,
    #[serde(default)]
    pub model: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub max_retries: usize,
    /// Sampling temperature; 0 is the most deterministic setting.
    #[serde(default)]
    pub temperature: f64,
    /// Name of the environment variable holding the API key, if any.
    #[serde(default)]
    pub api_key_env: Option<String>,
}

fn default_timeout() -> u64 {
    30
}

fn default_retries() -> usize {
    2
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            provider: Provider::Offline,
            endpoint: String::new(),
            model: String::new(),
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            temperature: 0.0,
            api_key_env: None,
        }
    }
}

impl BackendConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, BackendError> {
        toml::from_str(s).map_err(|e| BackendError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Instantiates the configured backend.
    pub fn build(&self) -> Result<Box<dyn LlmBackend>, BackendError> {
        match self.provider {
            Provider::Offline => Ok(Box::new(ScriptedBackend::unavailable())),
            Provider::OpenaiCompatible => Ok(Box::new(HttpBackend::new(self.clone())?)),
        }
    }
}

/// Blocking client for OpenAI-compatible chat completion servers.
pub struct HttpBackend {
    config: BackendConfig,
    client: reqwest::blocking::Client,
    api_key: Option<String>,
}

impl HttpBackend {
    pub fn new(config: BackendConfig) -> Result<Self, BackendError> {
        if config.endpoint.is_empty() || config.model.is_empty() {
            return Err(BackendError::Config("endpoint and model are required".into()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        let api_key = config
            .api_key_env
            .as_deref()
            .and_then(|var| std::env::var(var).ok());
        Ok(HttpBackend {
            config,
            client,
            api_key,
        })
    }
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    temperature: f64,
    messages: [ChatMessage<'a>; 1],
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatContent,
}

#[derive(Deserialize)]
struct ChatContent {
    content: String,
}

impl LlmBackend for HttpBackend {
    fn name(&self) -> &str {
        &self.config.model
    }

    fn complete(&self, prompt: &str) -> Result<String, BackendError> {
        let body = ChatRequest {
            model: &self.config.model,
            temperature: self.config.temperature,
            messages: [ChatMessage {
                role: "user",
                content: prompt,
            }],
        };
        let mut req = self.client.post(&self.config.endpoint).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .map_err(|e| BackendError::Unavailable(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(BackendError::Unavailable(format!("HTTP {}", resp.status())));
        }
        let parsed: ChatResponse = resp
            .json()
            .map_err(|e| BackendError::BadPayload(e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| BackendError::BadPayload("no choices".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scripted_replays_then_exhausts() {
        let b = ScriptedBackend::new([Ok("a"), Err(BackendError::Unavailable("x".into()))]);
        assert_eq!(b.complete("p1").unwrap(), "a");
        assert!(b.complete("p2").is_err());
        assert!(b.complete("p3").is_err());
        assert_eq!(b.calls(), vec!["p1", "p2", "p3"]);
    }

    #[test]
    fn config_parses_with_defaults() {
        let cfg = BackendConfig::from_toml_str(
            "provider = \"openai_compatible\"\nendpoint = \"http://localhost:8000/v1/chat/completions\"\nmodel = \"m\"\n",
        )
        .unwrap();
        assert_eq!(cfg.max_retries, 2);
        assert_eq!(cfg.temperature, 0.0);
        assert!(cfg.build().is_ok());
        let bad = BackendConfig {
            provider: Provider::OpenaiCompatible,
            ..BackendConfig::default()
        };
        assert!(bad.build().is_err());
    }

    #[test]
    fn hash_is_stable() {
        assert_eq!(
            text_hash("abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
