//! LLM generation of similar texts: transports, retries, caching and
//! response parsing.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::markup::parse_marked;
use crate::prompt::{PromptBundle, SAMPLE_SEPARATOR};
use crate::tokenizer::{Tokenizer, TokenizerError};

pub const GENERATION_SCHEMA: &str = "generation/1";

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("HTTP {status}: {message}")]
    Status { status: u16, message: String },
    #[error("network error: {0}")]
    Network(String),
    #[error("malformed response: {0}")]
    Protocol(String),
    #[error("transport configuration error: {0}")]
    Configuration(String),
}

impl TransportError {
    pub fn is_retryable(&self) -> bool {
        match self {
            TransportError::Status { status, .. } => *status == 429 || *status >= 500,
            TransportError::Network(_) | TransportError::Protocol(_) => true,
            TransportError::Configuration(_) => false,
        }
    }
}

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error("generation for feature {feature_id} failed after {attempts} attempt(s): {source}")]
    Transport {
        feature_id: u32,
        attempts: u32,
        #[source]
        source: TransportError,
    },
    #[error("response contained no samples")]
    EmptyResponse,
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

/// Body of an OpenAI-compatible chat completion request.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl ChatRequest {
    pub fn from_prompt(prompt: &PromptBundle) -> Self {
        Self {
            model: prompt.request_params.model.clone(),
            messages: vec![
                ChatMessage {
                    role: "system".into(),
                    content: prompt.system_text.clone(),
                },
                ChatMessage {
                    role: "user".into(),
                    content: prompt.user_text.clone(),
                },
            ],
            temperature: prompt.request_params.temperature,
            max_tokens: prompt.request_params.max_tokens,
            seed: prompt.request_params.seed,
        }
    }

    pub fn user_text(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == "user")
            .map_or("", |m| m.content.as_str())
    }

    /// Content hash identifying one attempt of this request.
    pub fn cache_key(&self, attempt: u32) -> String {
        let body = serde_json::to_vec(self).expect("request serializes");
        let mut h = Sha256::new();
        h.update(&body);
        h.update(attempt.to_le_bytes());
        hex::encode(h.finalize())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    #[serde(default)]
    pub prompt_tokens: u64,
    #[serde(default)]
    pub completion_tokens: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    #[serde(default)]
    pub usage: Option<Usage>,
    #[serde(default)]
    pub model: Option<String>,
}

pub trait LlmTransport: Send + Sync {
    /// Performs one completion. `attempt` (0-based) distinguishes retries
    /// of the same request, so caches and scripts can tell them apart.
    fn complete(&self, request: &ChatRequest, attempt: u32) -> Result<ChatResponse, TransportError>;

    /// Short description recorded in run manifests.
    fn describe(&self) -> String;
}

/// `POST {endpoint}/v1/chat/completions` with a bearer key from the
/// environment.
pub struct OpenAiTransport {
    endpoint: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl OpenAiTransport {
    pub fn new(endpoint: &str, api_key_env: &str, timeout: Duration) -> Result<Self, TransportError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| TransportError::Configuration(e.to_string()))?;
        Ok(Self {
            endpoint: endpoint.trim_end_matches('/').to_owned(),
            api_key: std::env::var(api_key_env).ok(),
            client,
        })
    }

    fn url(&self) -> String {
        if self.endpoint.ends_with("/chat/completions") {
            self.endpoint.clone()
        } else {
            format!("{}/v1/chat/completions", self.endpoint)
        }
    }
}

#[derive(Deserialize)]
struct CompletionBody {
    choices: Vec<CompletionChoice>,
    #[serde(default)]
    usage: Option<Usage>,
    #[serde(default)]
    model: Option<String>,
}

#[derive(Deserialize)]
struct CompletionChoice {
    message: ChatMessage,
}

impl LlmTransport for OpenAiTransport {
    fn complete(&self, request: &ChatRequest, attempt: u32) -> Result<ChatResponse, TransportError> {
        let url = self.url();
        tracing::debug!(
            %url,
            attempt,
            body = %serde_json::to_string(request).unwrap_or_default(),
            authorization = if self.api_key.is_some() { "Bearer [redacted]" } else { "none" },
            "chat completion request"
        );
        let mut req = self.client.post(&url).json(request);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| TransportError::Network(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| TransportError::Network(e.to_string()))?;
        tracing::debug!(%status, body = %text, "chat completion response");
        if !status.is_success() {
            return Err(TransportError::Status {
                status: status.as_u16(),
                message: text.chars().take(500).collect(),
            });
        }
        let body: CompletionBody =
            serde_json::from_str(&text).map_err(|e| TransportError::Protocol(e.to_string()))?;
        let content = body
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| TransportError::Protocol("response has no choices".into()))?;
        Ok(ChatResponse {
            content,
            usage: body.usage,
            model: body.model,
        })
    }

    fn describe(&self) -> String {
        format!("openai-compatible {}", self.url())
    }
}

/// One scripted reply: response text, or an HTTP error status.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScriptedReply {
    Text(String),
    Error { status: u16 },
}

/// Replies for requests whose user prompt contains `contains`. Attempt `n`
/// receives `replies[min(n, len - 1)]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScriptRule {
    pub contains: String,
    pub replies: Vec<ScriptedReply>,
}

/// Deterministic offline transport for fixtures and tests. The first rule
/// whose `contains` string occurs in the user prompt answers; unmatched
/// prompts get `default`, or an HTTP 404 when there is none.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScriptedTransport {
    pub rules: Vec<ScriptRule>,
    #[serde(default)]
    pub default: Vec<ScriptedReply>,
}

impl ScriptedTransport {
    pub fn load(path: &Path) -> Result<Self, TransportError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| TransportError::Configuration(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| TransportError::Configuration(format!("{}: {e}", path.display())))
    }

    pub fn rule(mut self, contains: impl Into<String>, replies: Vec<ScriptedReply>) -> Self {
        self.rules.push(ScriptRule {
            contains: contains.into(),
            replies,
        });
        self
    }
}

impl LlmTransport for ScriptedTransport {
    fn complete(&self, request: &ChatRequest, attempt: u32) -> Result<ChatResponse, TransportError> {
        let user = request.user_text();
        let replies = self
            .rules
            .iter()
            .find(|r| user.contains(&r.contains))
            .map(|r| &r.replies)
            .unwrap_or(&self.default);
        let Some(last) = replies.len().checked_sub(1) else {
            return Err(TransportError::Status {
                status: 404,
                message: "no scripted reply matches the prompt".into(),
            });
        };
        match &replies[(attempt as usize).min(last)] {
            ScriptedReply::Text(content) => Ok(ChatResponse {
                content: content.clone(),
                usage: Some(Usage {
                    prompt_tokens: (user.len() / 4) as u64,
                    completion_tokens: (content.len() / 4) as u64,
                }),
                model: Some("scripted".into()),
            }),
            ScriptedReply::Error { status } => Err(TransportError::Status {
                status: *status,
                message: "scripted failure".into(),
            }),
        }
    }

    fn describe(&self) -> String {
        format!("scripted ({} rules)", self.rules.len())
    }
}

/// Content-addressed on-disk cache in front of another transport. Entries
/// live at `dir/<key[..2]>/<key>.json` and are written atomically.
pub struct CachedTransport<T> {
    inner: T,
    dir: PathBuf,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

impl<T: LlmTransport> CachedTransport<T> {
    pub fn new(inner: T, dir: impl Into<PathBuf>) -> Self {
        Self {
            inner,
            dir: dir.into(),
            hits: AtomicUsize::new(0),
            misses: AtomicUsize::new(0),
        }
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(&key[..2]).join(format!("{key}.json"))
    }

    pub fn stats(&self) -> (usize, usize) {
        (self.hits.load(Ordering::Relaxed), self.misses.load(Ordering::Relaxed))
    }
}

impl<T: LlmTransport> LlmTransport for CachedTransport<T> {
    fn complete(&self, request: &ChatRequest, attempt: u32) -> Result<ChatResponse, TransportError> {
        let key = request.cache_key(attempt);
        let path = self.path(&key);
        if let Ok(bytes) = std::fs::read(&path) {
            if let Ok(resp) = serde_json::from_slice::<ChatResponse>(&bytes) {
                self.hits.fetch_add(1, Ordering::Relaxed);
                return Ok(resp);
            }
            tracing::warn!(path = %path.display(), "ignoring unreadable cache entry");
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let resp = self.inner.complete(request, attempt)?;
        let write = || -> std::io::Result<()> {
            let parent = path.parent().expect("cache path has a parent");
            std::fs::create_dir_all(parent)?;
            let tmp = parent.join(format!(".{key}.{}.tmp", std::process::id()));
            std::fs::write(&tmp, serde_json::to_vec_pretty(&resp)?)?;
            std::fs::rename(tmp, &path)
        };
        if let Err(e) = write() {
            tracing::warn!(path = %path.display(), error = %e, "failed to write cache entry");
        }
        Ok(resp)
    }

    fn describe(&self) -> String {
        format!("{} (cached)", self.inner.describe())
    }
}

/// Token bucket limiting request starts across threads.
pub struct RateLimiter {
    state: Mutex<(f64, Instant)>,
    capacity: f64,
    per_second: f64,
}

impl RateLimiter {
    pub fn per_minute(requests: f64) -> Self {
        let capacity = requests.max(1.0).min(60.0);
        Self {
            state: Mutex::new((capacity, Instant::now())),
            capacity,
            per_second: requests / 60.0,
        }
    }

    pub fn acquire(&self) {
        loop {
            let wait = {
                let mut s = self.state.lock();
                let now = Instant::now();
                let refill = now.duration_since(s.1).as_secs_f64() * self.per_second;
                s.0 = (s.0 + refill).min(self.capacity);
                s.1 = now;
                if s.0 >= 1.0 {
                    s.0 -= 1.0;
                    return;
                }
                (1.0 - s.0) / self.per_second
            };
            std::thread::sleep(Duration::from_secs_f64(wait));
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedSample {
    pub raw_text: String,
    pub clean_text: String,
    /// Byte ranges of marked target text in `clean_text`.
    pub target_spans: Vec<(usize, usize)>,
    /// Number of tokens preceding the first marked token.
    pub first_target_token_index: Option<usize>,
}

/// Splits a response into samples and parses their markers.
pub fn parse_samples(
    response_text: &str,
    tokenizer: &dyn Tokenizer,
) -> Result<Vec<GeneratedSample>, GenerationError> {
    let mut samples = Vec::new();
    for segment in response_text.split(SAMPLE_SEPARATOR) {
        let raw = strip_enclosing_quotes(segment.trim()).trim();
        if raw.is_empty() {
            continue;
        }
        let parsed = parse_marked(raw);
        if parsed.unbalanced {
            tracing::debug!(sample = raw, "unbalanced marker braces kept as text");
        }
        let first_target_token_index = match parsed.spans.first() {
            Some(&(start, _)) => tokenizer
                .encode(&parsed.clean)?
                .iter()
                .position(|t| t.end > start),
            None => None,
        };
        samples.push(GeneratedSample {
            raw_text: raw.to_owned(),
            clean_text: parsed.clean,
            target_spans: parsed.spans,
            first_target_token_index,
        });
    }
    if samples.is_empty() {
        return Err(GenerationError::EmptyResponse);
    }
    Ok(samples)
}

fn strip_enclosing_quotes(s: &str) -> &str {
    const PAIRS: [(char, char); 4] = [('"', '"'), ('\'', '\''), ('“', '”'), ('‘', '’')];
    for (open, close) in PAIRS {
        if let Some(inner) = s.strip_prefix(open).and_then(|r| r.strip_suffix(close)) {
            return inner;
        }
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerationStatus {
    Complete,
    /// Fewer than the minimum usable samples after all retries.
    LowSample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub schema: String,
    pub feature_id: u32,
    pub samples: Vec<GeneratedSample>,
    pub attempts: u32,
    pub status: GenerationStatus,
    pub provider_metadata: serde_json::Value,
}

impl GenerationResult {
    pub fn is_usable(&self) -> bool {
        self.status == GenerationStatus::Complete
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub max_attempts: u32,
    pub min_samples: usize,
    #[serde(default)]
    pub retry_backoff_ms: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            min_samples: 5,
            retry_backoff_ms: 0,
        }
    }
}

/// Issues the prompt, retrying with fresh requests while the transport
/// fails or too few samples parse.
pub fn generate(
    feature_id: u32,
    prompt: &PromptBundle,
    transport: &dyn LlmTransport,
    tokenizer: &dyn Tokenizer,
    config: &GenerationConfig,
) -> Result<GenerationResult, GenerationError> {
    let request = ChatRequest::from_prompt(prompt);
    let max_attempts = config.max_attempts.max(1);
    let mut best: Option<Vec<GeneratedSample>> = None;
    let mut usage = Vec::new();
    let mut model = None;
    let mut last_error = None;
    let mut attempts = 0;

    for attempt in 0..max_attempts {
        attempts = attempt + 1;
        if attempt > 0 && config.retry_backoff_ms > 0 {
            std::thread::sleep(Duration::from_millis(config.retry_backoff_ms << (attempt - 1)));
        }
        match transport.complete(&request, attempt) {
            Ok(resp) => {
                usage.push(resp.usage.clone().unwrap_or_default());
                model = model.or(resp.model.clone());
                let samples = match parse_samples(&resp.content, tokenizer) {
                    Ok(s) => s,
                    Err(GenerationError::EmptyResponse) => Vec::new(),
                    Err(e) => return Err(e),
                };
                let n = samples.len();
                if best.as_ref().is_none_or(|b| n > b.len()) {
                    best = Some(samples);
                }
                if n >= config.min_samples {
                    break;
                }
                tracing::info!(feature_id, attempt, samples = n, "sample shortfall, retrying");
            }
            Err(e) => {
                tracing::warn!(feature_id, attempt, error = %e, "generation request failed");
                let retryable = e.is_retryable();
                last_error = Some(e);
                if !retryable {
                    break;
                }
            }
        }
    }

    let Some(samples) = best else {
        return Err(GenerationError::Transport {
            feature_id,
            attempts,
            source: last_error.expect("no response implies an error"),
        });
    };
    let status = if samples.len() >= config.min_samples {
        GenerationStatus::Complete
    } else {
        GenerationStatus::LowSample
    };
    Ok(GenerationResult {
        schema: GENERATION_SCHEMA.to_owned(),
        feature_id,
        samples,
        attempts,
        status,
        provider_metadata: serde_json::json!({
            "model": model,
            "transport": transport.describe(),
            "usage": usage,
        }),
    })
}

/// Generates for many features on up to `max_in_flight` worker threads.
/// Results come back keyed by feature id, independent of completion order.
pub fn generate_many(
    prompts: &[(u32, PromptBundle)],
    transport: &dyn LlmTransport,
    tokenizer: &dyn Tokenizer,
    config: &GenerationConfig,
    max_in_flight: usize,
    limiter: Option<&RateLimiter>,
) -> BTreeMap<u32, Result<GenerationResult, GenerationError>> {
    let next = AtomicUsize::new(0);
    let results = Mutex::new(BTreeMap::new());
    std::thread::scope(|scope| {
        for _ in 0..max_in_flight.max(1).min(prompts.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some((feature_id, prompt)) = prompts.get(i) else {
                    break;
                };
                if let Some(l) = limiter {
                    l.acquire();
                }
                let r = generate(*feature_id, prompt, transport, tokenizer, config);
                results.lock().insert(*feature_id, r);
            });
        }
    });
    results.into_inner()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PositionHistogram {
    /// Preceding-token count -> number of samples.
    pub counts: BTreeMap<usize, usize>,
    pub marked: usize,
    pub unmarked: usize,
    pub fraction_at_zero: f64,
    pub fraction_at_most_five: f64,
}

/// Distribution of the first marked token's position across all samples.
pub fn target_position_histogram<'a>(
    results: impl IntoIterator<Item = &'a GenerationResult>,
) -> PositionHistogram {
    let mut h = PositionHistogram::default();
    for sample in results.into_iter().flat_map(|r| &r.samples) {
        match sample.first_target_token_index {
            Some(i) => {
                *h.counts.entry(i).or_default() += 1;
                h.marked += 1;
            }
            None => h.unmarked += 1,
        }
    }
    if h.marked > 0 {
        let at = |pred: &dyn Fn(usize) -> bool| {
            h.counts
                .iter()
                .filter(|(&i, _)| pred(i))
                .map(|(_, &n)| n)
                .sum::<usize>() as f64
                / h.marked as f64
        };
        h.fraction_at_zero = at(&|i| i == 0);
        h.fraction_at_most_five = at(&|i| i <= 5);
    }
    h
}
