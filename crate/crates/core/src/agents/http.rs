//! Chat-completion and embedding clients over blocking HTTP.

use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::templates::{parse_analysis, parse_generated_prompt, Templates};
use super::{AgentError, Analysis, Analyzer, ErrorCase, GenerationRequest, Generator, Predictor};
use crate::topics::{EmbedError, EmbeddingProvider};
use crate::types::TaskKind;

fn default_auth_header() -> String {
    "Authorization".to_string()
}

fn default_auth_prefix() -> String {
    "Bearer ".to_string()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    pub endpoint_url: String,
    pub model_name: String,
    pub temperature: f64,
    #[serde(default = "AgentConfig::default_max_tokens")]
    pub max_output_tokens: u32,
    /// Name of the environment variable holding the API key. `None` sends no auth header.
    #[serde(default)]
    pub auth_env: Option<String>,
    #[serde(default = "default_auth_header")]
    pub auth_header: String,
    #[serde(default = "default_auth_prefix")]
    pub auth_prefix: String,
    #[serde(default = "AgentConfig::default_timeout_ms")]
    pub request_timeout_ms: u64,
    #[serde(default = "AgentConfig::default_retry_budget")]
    pub retry_budget: u32,
    #[serde(default = "AgentConfig::default_backoff_ms")]
    pub backoff_base_ms: u64,
}

impl AgentConfig {
    fn default_max_tokens() -> u32 {
        2048
    }
    fn default_timeout_ms() -> u64 {
        120_000
    }
    fn default_retry_budget() -> u32 {
        3
    }
    fn default_backoff_ms() -> u64 {
        500
    }

    fn with_temperature(temperature: f64) -> Self {
        Self {
            endpoint_url: "https://api.openai.com/v1/chat/completions".into(),
            model_name: "gpt-4o-mini".into(),
            temperature,
            max_output_tokens: Self::default_max_tokens(),
            auth_env: Some("OPENAI_API_KEY".into()),
            auth_header: default_auth_header(),
            auth_prefix: default_auth_prefix(),
            request_timeout_ms: Self::default_timeout_ms(),
            retry_budget: Self::default_retry_budget(),
            backoff_base_ms: Self::default_backoff_ms(),
        }
    }

    /// Greedy decoding for scoring.
    pub fn predictor_default() -> Self {
        Self::with_temperature(0.0)
    }

    pub fn analyzer_default() -> Self {
        Self::with_temperature(1.0)
    }

    pub fn generator_default() -> Self {
        Self::with_temperature(1.0)
    }
}

/// Caps the number of concurrent requests across every client sharing it.
#[derive(Debug)]
pub struct InFlightLimiter {
    max: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

pub struct Permit<'a>(&'a InFlightLimiter);

impl InFlightLimiter {
    pub fn new(max: usize) -> Self {
        Self { max: max.max(1), active: Mutex::new(0), freed: Condvar::new() }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut active = self.active.lock().unwrap();
        while *active >= self.max {
            active = self.freed.wait(active).unwrap();
        }
        *active += 1;
        Permit(self)
    }

    pub fn in_flight(&self) -> usize {
        *self.active.lock().unwrap()
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.active.lock().unwrap() -= 1;
        self.0.freed.notify_one();
    }
}

/// Shared HTTP client and request budget for every agent of one provider.
#[derive(Clone, Debug)]
pub struct HttpBackend {
    client: reqwest::blocking::Client,
    limiter: Arc<InFlightLimiter>,
}

impl HttpBackend {
    pub fn new(max_in_flight: usize) -> Result<Self, AgentError> {
        let client = reqwest::blocking::Client::builder()
            .build()
            .map_err(|e| AgentError::Config(format!("cannot build HTTP client: {e}")))?;
        Ok(Self { client, limiter: Arc::new(InFlightLimiter::new(max_in_flight)) })
    }

    pub fn limiter(&self) -> &InFlightLimiter {
        &self.limiter
    }

    /// POSTs `body` and returns the parsed JSON response, retrying on 429, 5xx
    /// and connection failures.
    fn post_json(&self, target: &Target<'_>, body: &Value) -> Result<Value, AgentError> {
        let auth = match target.auth_env {
            Some(var) => match std::env::var(var) {
                Ok(v) if !v.is_empty() => Some(format!("{}{}", target.auth_prefix, v)),
                _ => return Err(AgentError::Config(format!("environment variable {var} is not set"))),
            },
            None => None,
        };
        let mut attempt = 0u32;
        loop {
            let result = {
                let _permit = self.limiter.acquire();
                let mut req = self
                    .client
                    .post(target.url)
                    .timeout(Duration::from_millis(target.timeout_ms))
                    .json(body);
                if let Some(value) = &auth {
                    req = req.header(target.auth_header, value);
                }
                req.send().and_then(|resp| {
                    let status = resp.status().as_u16();
                    resp.text().map(|text| (status, text))
                })
            };
            let retryable = match result {
                Ok((200..=299, text)) => {
                    return serde_json::from_str(&text)
                        .map_err(|e| AgentError::Protocol(format!("response is not valid JSON: {e}")));
                }
                Ok((status, body)) if status == 429 || status >= 500 => AgentError::Status { status, body },
                Ok((status, body)) => return Err(AgentError::Status { status, body }),
                Err(e) => AgentError::Transport(e.to_string()),
            };
            if attempt >= target.retry_budget {
                return Err(match retryable {
                    AgentError::Status { status, body } => {
                        AgentError::Transport(format!("gave up after {} attempts, last status {status}: {body}", attempt + 1))
                    }
                    other => other,
                });
            }
            tracing::debug!(attempt, error = %retryable, "retrying request");
            thread::sleep(backoff(target.backoff_base_ms, attempt));
            attempt += 1;
        }
    }
}

pub(crate) fn backoff(base_ms: u64, attempt: u32) -> Duration {
    Duration::from_millis(base_ms.saturating_mul(1u64 << attempt.min(16)))
}

struct Target<'a> {
    url: &'a str,
    auth_env: Option<&'a str>,
    auth_header: &'a str,
    auth_prefix: &'a str,
    timeout_ms: u64,
    retry_budget: u32,
    backoff_base_ms: u64,
}

impl<'a> From<&'a AgentConfig> for Target<'a> {
    fn from(c: &'a AgentConfig) -> Self {
        Self {
            url: &c.endpoint_url,
            auth_env: c.auth_env.as_deref(),
            auth_header: &c.auth_header,
            auth_prefix: &c.auth_prefix,
            timeout_ms: c.request_timeout_ms,
            retry_budget: c.retry_budget,
            backoff_base_ms: c.backoff_base_ms,
        }
    }
}

/// Sends a single-turn chat request and returns the first choice's text.
pub fn chat_complete(backend: &HttpBackend, cfg: &AgentConfig, message: &str) -> Result<String, AgentError> {
    let body = json!({
        "model": cfg.model_name,
        "messages": [{ "role": "user", "content": message }],
        "temperature": cfg.temperature,
        "max_tokens": cfg.max_output_tokens,
    });
    let resp = backend.post_json(&Target::from(cfg), &body)?;
    let choice = resp
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| AgentError::Protocol("response has no choices".into()))?;
    choice
        .pointer("/message/content")
        .or_else(|| choice.get("text"))
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| AgentError::Protocol("first choice carries no text".into()))
}

pub struct HttpPredictor {
    pub backend: HttpBackend,
    pub config: AgentConfig,
    pub templates: Arc<Templates>,
    pub task_kind: TaskKind,
}

impl Predictor for HttpPredictor {
    fn predict(&self, prompt_text: &str, question: &str) -> Result<String, AgentError> {
        let message = self.templates.render_predictor(prompt_text, question, self.task_kind);
        chat_complete(&self.backend, &self.config, &message)
    }
}

pub struct HttpAnalyzer {
    pub backend: HttpBackend,
    pub config: AgentConfig,
    pub templates: Arc<Templates>,
}

impl Analyzer for HttpAnalyzer {
    fn analyze(&self, prompt_text: &str, cases: &[ErrorCase<'_>]) -> Result<Analysis, AgentError> {
        let message = self.templates.render_analyzer(prompt_text, cases);
        let mut attempt = 0;
        loop {
            match parse_analysis(&chat_complete(&self.backend, &self.config, &message)?) {
                Err(AgentError::EmptyOutput) if attempt < self.config.retry_budget => attempt += 1,
                other => return other,
            }
        }
    }
}

pub struct HttpGenerator {
    pub backend: HttpBackend,
    pub config: AgentConfig,
    pub templates: Arc<Templates>,
}

impl Generator for HttpGenerator {
    fn generate(&self, request: &GenerationRequest<'_>) -> Result<String, AgentError> {
        let message = self.templates.render_generator(request);
        let mut attempt = 0;
        loop {
            match parse_generated_prompt(&chat_complete(&self.backend, &self.config, &message)?) {
                Err(AgentError::EmptyOutput) if attempt < self.config.retry_budget => attempt += 1,
                other => return other,
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub endpoint_url: String,
    pub model_name: String,
    #[serde(default)]
    pub auth_env: Option<String>,
    #[serde(default = "default_auth_header")]
    pub auth_header: String,
    #[serde(default = "default_auth_prefix")]
    pub auth_prefix: String,
    #[serde(default = "AgentConfig::default_timeout_ms")]
    pub request_timeout_ms: u64,
    #[serde(default = "AgentConfig::default_retry_budget")]
    pub retry_budget: u32,
    #[serde(default = "AgentConfig::default_backoff_ms")]
    pub backoff_base_ms: u64,
    #[serde(default = "EmbeddingConfig::default_batch")]
    pub batch_size: usize,
}

impl EmbeddingConfig {
    fn default_batch() -> usize {
        64
    }
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            endpoint_url: "https://api.openai.com/v1/embeddings".into(),
            model_name: "text-embedding-3-small".into(),
            auth_env: Some("OPENAI_API_KEY".into()),
            auth_header: default_auth_header(),
            auth_prefix: default_auth_prefix(),
            request_timeout_ms: AgentConfig::default_timeout_ms(),
            retry_budget: AgentConfig::default_retry_budget(),
            backoff_base_ms: AgentConfig::default_backoff_ms(),
            batch_size: Self::default_batch(),
        }
    }
}

/// Client for `{"model", "input": [..]}` → `{"data": [{"embedding": [..]}]}` endpoints.
pub struct HttpEmbedder {
    pub backend: HttpBackend,
    pub config: EmbeddingConfig,
}

impl EmbeddingProvider for HttpEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbedError> {
        let c = &self.config;
        let target = Target {
            url: &c.endpoint_url,
            auth_env: c.auth_env.as_deref(),
            auth_header: &c.auth_header,
            auth_prefix: &c.auth_prefix,
            timeout_ms: c.request_timeout_ms,
            retry_budget: c.retry_budget,
            backoff_base_ms: c.backoff_base_ms,
        };
        let mut out = Vec::with_capacity(texts.len());
        for batch in texts.chunks(c.batch_size.max(1)) {
            let resp = self
                .backend
                .post_json(&target, &json!({ "model": c.model_name, "input": batch }))
                .map_err(|e| EmbedError::Provider(e.to_string()))?;
            let data = resp
                .get("data")
                .and_then(Value::as_array)
                .ok_or_else(|| EmbedError::Provider("protocol error: response has no data array".into()))?;
            if data.len() != batch.len() {
                return Err(EmbedError::Provider(format!(
                    "protocol error: sent {} inputs, received {} embeddings",
                    batch.len(),
                    data.len()
                )));
            }
            for item in data {
                let vector = item
                    .get("embedding")
                    .and_then(Value::as_array)
                    .and_then(|v| v.iter().map(Value::as_f64).collect::<Option<Vec<f64>>>())
                    .ok_or_else(|| EmbedError::Provider("protocol error: malformed embedding".into()))?;
                out.push(vector);
            }
        }
        Ok(out)
    }
}
