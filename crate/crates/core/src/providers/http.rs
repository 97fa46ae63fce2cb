//! OpenAI-compatible HTTP client for `/chat/completions` and `/embeddings`.

use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use reqwest::blocking::Client;
use serde::{Deserialize, Serialize};

use super::{
    ChatProvider, ChatRequest, ChatResponse, EmbeddingProvider, EmbeddingVector, ProviderConfig,
    ProviderError, Usage,
};

/// Token bucket with a burst of one second's worth of requests.
#[derive(Debug)]
struct RateLimiter {
    rate: f64,
    state: Mutex<(f64, Instant)>,
}

impl RateLimiter {
    fn new(rate: f64) -> Self {
        Self { rate, state: Mutex::new((rate.max(1.0), Instant::now())) }
    }

    fn acquire(&self) {
        loop {
            let wait = {
                let mut st = self.state.lock().expect("rate limiter poisoned");
                let now = Instant::now();
                let refill = now.duration_since(st.1).as_secs_f64() * self.rate;
                st.0 = (st.0 + refill).min(self.rate.max(1.0));
                st.1 = now;
                if st.0 >= 1.0 {
                    st.0 -= 1.0;
                    return;
                }
                Duration::from_secs_f64((1.0 - st.0) / self.rate)
            };
            thread::sleep(wait);
        }
    }
}

/// Shared transport: auth, timeout, retry with exponential backoff, rate limit.
#[derive(Debug)]
struct Transport {
    client: Client,
    base_url: String,
    api_key: Option<String>,
    timeout: Duration,
    retry_count: u32,
    backoff: Duration,
    limiter: Option<RateLimiter>,
}

impl Transport {
    fn new(cfg: &ProviderConfig) -> Result<Self, ProviderError> {
        if cfg.endpoint_url.trim().is_empty() {
            return Err(ProviderError::Config("endpoint_url is empty".into()));
        }
        let client = Client::builder()
            .timeout(cfg.timeout())
            .build()
            .map_err(|e| ProviderError::Config(e.to_string()))?;
        let api_key = std::env::var(&cfg.api_key_env_var).ok().filter(|k| !k.is_empty());
        if api_key.is_none() {
            log::debug!("{} not set; sending requests without authorization", cfg.api_key_env_var);
        }
        Ok(Self {
            client,
            base_url: cfg.endpoint_url.trim_end_matches('/').to_string(),
            api_key,
            timeout: cfg.timeout(),
            retry_count: cfg.retry_count,
            backoff: Duration::from_millis(250),
            limiter: cfg.requests_per_second.filter(|r| *r > 0.0).map(RateLimiter::new),
        })
    }

    fn post<B: Serialize, R: for<'de> Deserialize<'de>>(&self, path: &str, body: &B) -> Result<R, ProviderError> {
        let url = format!("{}/{}", self.base_url, path);
        let mut attempt = 0;
        loop {
            let result = self.post_once(&url, body);
            match result {
                Err(e) if e.is_retryable() && attempt < self.retry_count => {
                    let delay = self.backoff * 2u32.pow(attempt);
                    log::warn!("POST {url} failed ({e}); retry {} in {delay:?}", attempt + 1);
                    thread::sleep(delay);
                    attempt += 1;
                }
                other => return other,
            }
        }
    }

    fn post_once<B: Serialize, R: for<'de> Deserialize<'de>>(&self, url: &str, body: &B) -> Result<R, ProviderError> {
        if let Some(l) = &self.limiter {
            l.acquire();
        }
        let mut req = self.client.post(url).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                ProviderError::Timeout(self.timeout)
            } else {
                ProviderError::Transport(e.to_string())
            }
        })?;
        let status = resp.status();
        let text = resp.text().map_err(|e| ProviderError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(ProviderError::Status { status: status.as_u16(), body: text });
        }
        serde_json::from_str(&text).map_err(|e| ProviderError::Malformed(format!("{e}: {text}")))
    }
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'static str,
    content: &'a str,
}

#[derive(Serialize)]
struct WireChatRequest<'a> {
    model: &'a str,
    messages: Vec<WireMessage<'a>>,
    temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_tokens: Option<u32>,
}

#[derive(Deserialize)]
struct WireChatResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireReplyMessage,
}

#[derive(Deserialize)]
struct WireReplyMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

/// Chat provider for any OpenAI-compatible endpoint.
#[derive(Debug)]
pub struct HttpChatProvider {
    transport: Transport,
    model: String,
}

impl HttpChatProvider {
    pub fn new(cfg: &ProviderConfig) -> Result<Self, ProviderError> {
        Ok(Self { transport: Transport::new(cfg)?, model: cfg.model_name.clone() })
    }

    /// Overrides the initial retry backoff (doubles per retry).
    pub fn with_backoff(mut self, backoff: Duration) -> Self {
        self.transport.backoff = backoff;
        self
    }
}

impl ChatProvider for HttpChatProvider {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        req.check()?;
        let mut messages = Vec::with_capacity(2);
        if !req.system.is_empty() {
            messages.push(WireMessage { role: "system", content: &req.system });
        }
        messages.push(WireMessage { role: "user", content: &req.user });
        let body = WireChatRequest {
            model: &self.model,
            messages,
            temperature: req.temperature,
            seed: req.sample_seed,
            max_tokens: req.max_reply_tokens,
        };
        let resp: WireChatResponse = self.transport.post("chat/completions", &body)?;
        let text = resp
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| ProviderError::Malformed("response has no choices".into()))?;
        Ok(ChatResponse {
            text,
            usage: resp.usage.map(|u| Usage { prompt_tokens: u.prompt_tokens, completion_tokens: u.completion_tokens }),
        })
    }
}

#[derive(Serialize)]
struct WireEmbeddingRequest<'a> {
    model: &'a str,
    input: &'a [String],
}

#[derive(Deserialize)]
struct WireEmbeddingResponse {
    data: Vec<WireEmbedding>,
}

#[derive(Deserialize)]
struct WireEmbedding {
    #[serde(default)]
    index: usize,
    embedding: Vec<f64>,
}

/// Embedding provider for any OpenAI-compatible endpoint. One batched call per `embed`.
#[derive(Debug)]
pub struct HttpEmbeddingProvider {
    transport: Transport,
    model: String,
}

impl HttpEmbeddingProvider {
    pub fn new(cfg: &ProviderConfig) -> Result<Self, ProviderError> {
        Ok(Self { transport: Transport::new(cfg)?, model: cfg.model_name.clone() })
    }

    pub fn with_backoff(mut self, backoff: Duration) -> Self {
        self.transport.backoff = backoff;
        self
    }
}

impl EmbeddingProvider for HttpEmbeddingProvider {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError> {
        if texts.is_empty() {
            return Err(ProviderError::Precondition("no texts to embed".into()));
        }
        let body = WireEmbeddingRequest { model: &self.model, input: texts };
        let mut resp: WireEmbeddingResponse = self.transport.post("embeddings", &body)?;
        if resp.data.len() != texts.len() {
            return Err(ProviderError::Malformed(format!(
                "expected {} embeddings, got {}",
                texts.len(),
                resp.data.len()
            )));
        }
        resp.data.sort_by_key(|d| d.index);
        Ok(resp.data.into_iter().map(|d| EmbeddingVector::normalized(d.embedding)).collect())
    }
}
