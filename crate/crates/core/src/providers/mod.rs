//! Model access: chat completion and embedding interfaces.
//!
//! The engine only ever talks to `dyn ChatProvider` / `dyn EmbeddingProvider`.
//! [`http`] speaks the OpenAI-compatible wire format; [`mock`] holds the
//! deterministic providers used by tests, the simulator and offline runs.

pub mod http;
pub mod mock;

use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use http::{HttpChatProvider, HttpEmbeddingProvider};
pub use mock::{hash_embedding, EmbeddingSynergyJudge, HashEmbedder, ScriptRule, ScriptedChat};

/// Temperature for extraction, judging and policy calls.
pub const DETERMINISTIC_TEMPERATURE: f64 = 0.0;
/// Temperature for trajectory sampling.
pub const SAMPLING_TEMPERATURE: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProviderError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("endpoint returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("request timed out after {0:?}")]
    Timeout(Duration),
    #[error("invalid request: {0}")]
    Precondition(String),
    #[error("no scripted reply matches request: {0}")]
    Unmatched(String),
    #[error("malformed provider response: {0}")]
    Malformed(String),
    #[error("provider configuration: {0}")]
    Config(String),
}

impl ProviderError {
    /// Transport-level failures worth retrying.
    pub fn is_retryable(&self) -> bool {
        match self {
            ProviderError::Transport(_) | ProviderError::Timeout(_) => true,
            ProviderError::Status { status, .. } => *status >= 500 || *status == 429,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system: String,
    pub user: String,
    pub temperature: f64,
    pub sample_seed: Option<u64>,
    pub max_reply_tokens: Option<u32>,
}

impl ChatRequest {
    pub fn new(system: impl Into<String>, user: impl Into<String>) -> Self {
        Self {
            system: system.into(),
            user: user.into(),
            temperature: DETERMINISTIC_TEMPERATURE,
            sample_seed: None,
            max_reply_tokens: None,
        }
    }

    pub fn with_temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.sample_seed = Some(seed);
        self
    }

    pub fn check(&self) -> Result<(), ProviderError> {
        if self.user.trim().is_empty() {
            return Err(ProviderError::Precondition("user message is empty".into()));
        }
        if !(self.temperature >= 0.0) {
            return Err(ProviderError::Precondition("temperature must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub usage: Option<Usage>,
}

impl ChatResponse {
    pub fn text(text: impl Into<String>) -> Self {
        Self { text: text.into(), usage: None }
    }
}

pub trait ChatProvider: Send + Sync {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, ProviderError>;
}

pub trait EmbeddingProvider: Send + Sync {
    /// One unit-norm vector per input, in input order.
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError>;

    fn embed_one(&self, text: &str) -> Result<EmbeddingVector, ProviderError> {
        let mut v = self.embed(&[text.to_string()])?;
        v.pop().ok_or_else(|| ProviderError::Malformed("empty embedding batch".into()))
    }
}

impl<T: ChatProvider + ?Sized> ChatProvider for &T {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        (**self).chat(req)
    }
}

impl<T: ChatProvider + ?Sized> ChatProvider for std::sync::Arc<T> {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        (**self).chat(req)
    }
}

impl<T: ChatProvider + ?Sized> ChatProvider for Box<T> {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        (**self).chat(req)
    }
}

impl<T: EmbeddingProvider + ?Sized> EmbeddingProvider for Box<T> {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError> {
        (**self).embed(texts)
    }
}

impl<T: EmbeddingProvider + ?Sized> EmbeddingProvider for std::sync::Arc<T> {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError> {
        (**self).embed(texts)
    }
}

/// Unit-norm dense vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    /// Normalizes `values` to unit length. A zero vector becomes the first basis vector.
    pub fn normalized(mut values: Vec<f64>) -> Self {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 && norm.is_finite() {
            values.iter_mut().for_each(|v| *v /= norm);
        } else {
            values.iter_mut().for_each(|v| *v = 0.0);
            if let Some(first) = values.first_mut() {
                *first = 1.0;
            }
        }
        Self(values)
    }

    /// Wraps values that are already unit-norm (e.g. loaded from a snapshot).
    pub fn from_raw(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Dot product; both sides are unit-norm so this is the cosine.
    pub fn cosine(&self, other: &EmbeddingVector) -> f64 {
        if self.0.len() != other.0.len() {
            return 0.0;
        }
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderConfig {
    pub endpoint_url: String,
    pub model_name: String,
    /// Name of the environment variable that holds the API key.
    pub api_key_env_var: String,
    pub timeout_secs: u64,
    pub retry_count: u32,
    /// Optional client-side rate limit.
    pub requests_per_second: Option<f64>,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            endpoint_url: "http://localhost:8000/v1".into(),
            model_name: String::new(),
            api_key_env_var: "GSEM_API_KEY".into(),
            timeout_secs: 120,
            retry_count: 2,
            requests_per_second: None,
        }
    }
}

impl ProviderConfig {
    pub fn timeout(&self) -> Duration {
        Duration::from_secs(self.timeout_secs)
    }
}

/// Failure of a model call whose reply must also parse.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CallError {
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("unparseable reply ({reason}): {reply:?}")]
    Parse { reply: String, reason: String },
}

/// Sends `req` and parses the reply, retrying up to `retries` times.
///
/// Retryable transport errors resend the same request. Parse failures
/// re-prompt with the parser's complaint appended (a repair retry). The
/// last error is returned once attempts run out.
pub fn call_parsed<T>(
    provider: &dyn ChatProvider,
    req: &ChatRequest,
    retries: u32,
    parse: impl Fn(&str) -> Result<T, String>,
) -> Result<T, CallError> {
    let mut current = req.clone();
    let mut last = None;
    for attempt in 0..=retries {
        match provider.chat(&current) {
            Ok(resp) => match parse(&resp.text) {
                Ok(v) => return Ok(v),
                Err(reason) => {
                    log::debug!("attempt {attempt}: unparseable reply: {reason}");
                    current = req.clone();
                    current.user = format!(
                        "{}\n\nYour previous reply could not be used ({reason}). Follow the output format exactly.",
                        req.user
                    );
                    last = Some(CallError::Parse { reply: resp.text, reason });
                }
            },
            Err(e) if e.is_retryable() => {
                log::debug!("attempt {attempt}: {e}");
                last = Some(CallError::Provider(e));
            }
            Err(e) => return Err(e.into()),
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Pulls the JSON payload out of a reply that may carry code fences or prose.
///
/// `open` is `'['` or `'{'`; the slice from the first `open` to the last
/// matching closer is returned.
pub fn extract_json(reply: &str, open: char) -> Option<&str> {
    let close = match open {
        '[' => ']',
        '{' => '}',
        _ => return None,
    };
    let start = reply.find(open)?;
    let end = reply.rfind(close)?;
    (end > start).then(|| &reply[start..=end])
}

/// Parses a JSON array reply (tolerating fences and surrounding prose).
pub fn parse_json_array(reply: &str) -> Result<Vec<serde_json::Value>, String> {
    let body = strip_fences(reply);
    let trimmed = body.trim_start();
    if trimmed.starts_with('{') {
        return Err("expected a JSON array, got an object".into());
    }
    let slice = extract_json(body, '[').ok_or("no JSON array found")?;
    match serde_json::from_str::<serde_json::Value>(slice) {
        Ok(serde_json::Value::Array(items)) => Ok(items),
        Ok(_) => Err("expected a JSON array".into()),
        Err(e) => Err(format!("invalid JSON: {e}")),
    }
}

/// Parses a JSON object reply (tolerating fences and surrounding prose).
pub fn parse_json_object(reply: &str) -> Result<serde_json::Map<String, serde_json::Value>, String> {
    let body = strip_fences(reply);
    if body.trim_start().starts_with('[') {
        return Err("expected a JSON object, got an array".into());
    }
    let slice = extract_json(body, '{').ok_or("no JSON object found")?;
    match serde_json::from_str::<serde_json::Value>(slice) {
        Ok(serde_json::Value::Object(map)) => Ok(map),
        Ok(_) => Err("expected a JSON object".into()),
        Err(e) => Err(format!("invalid JSON: {e}")),
    }
}

fn strip_fences(reply: &str) -> &str {
    let t = reply.trim();
    if let Some(rest) = t.strip_prefix("```") {
        // drop an optional language tag on the fence line
        let rest = rest.split_once('\n').map_or("", |(_, body)| body);
        return rest.trim_end().strip_suffix("```").unwrap_or(rest);
    }
    t
}
