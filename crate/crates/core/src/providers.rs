//! Model providers: a deterministic scripted provider for tests and fixtures,
//! an OpenAI-style chat-completion HTTP client for live runs, and token/cost
//! accounting.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

pub const DEFAULT_TEMPERATURE: f64 = 0.01;
pub const DEFAULT_MAX_TOKENS: u32 = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Designer,
    Executor,
    Summarizer,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Designer => "designer",
            Self::Executor => "executor",
            Self::Summarizer => "summarizer",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system: String,
    pub user: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub tag: Role,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl ChatRequest {
    pub fn new(tag: Role, system: impl Into<String>, user: impl Into<String>) -> Self {
        Self {
            system: system.into(),
            user: user.into(),
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
            tag,
            top_p: None,
            seed: None,
        }
    }

    pub fn with_sampling(mut self, sampling: &Sampling) -> Self {
        self.temperature = sampling.temperature;
        self.max_tokens = sampling.max_tokens;
        self.top_p = sampling.top_p;
        self.seed = sampling.seed;
        self
    }
}

/// Decoding parameters shared by every request of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sampling {
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn default_temperature() -> f64 {
    DEFAULT_TEMPERATURE
}

fn default_max_tokens() -> u32 {
    DEFAULT_MAX_TOKENS
}

impl Default for Sampling {
    fn default() -> Self {
        Self { temperature: DEFAULT_TEMPERATURE, max_tokens: DEFAULT_MAX_TOKENS, top_p: None, seed: None }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProviderError {
    #[error("QUEUE_EXHAUSTED: no scripted response left for tag `{0}`")]
    QueueExhausted(Role),
    #[error("SCRIPTED_FAILURE: {0}")]
    ScriptedFailure(String),
    #[error("TRANSPORT: {0}")]
    Transport(String),
    #[error("AUTH: {0}")]
    Auth(String),
    #[error("RATE_LIMIT: {0}")]
    RateLimit(String),
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("INVALID_RESPONSE: {0}")]
    InvalidResponse(String),
    #[error("CONFIG: {0}")]
    Config(String),
}

impl ProviderError {
    fn is_retryable(&self) -> bool {
        match self {
            Self::Transport(_) | Self::RateLimit(_) => true,
            Self::Http { status, .. } => *status >= 500,
            _ => false,
        }
    }
}

/// A chat model reachable by the engine. Implementations must tolerate
/// concurrent calls from independent runs.
pub trait ChatProvider: Send + Sync {
    fn model_name(&self) -> &str;
    fn complete(&self, request: &ChatRequest) -> Result<CompletionResult, ProviderError>;
}

// ---------------------------------------------------------------------------
// Scripted provider
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ScriptedResponse {
    #[serde(default)]
    pub text: String,
    /// When set, the call fails with this message instead of returning text.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fail: Option<String>,
    #[serde(default)]
    pub prompt_tokens: u64,
    #[serde(default)]
    pub completion_tokens: u64,
}

impl ScriptedResponse {
    pub fn text(text: impl Into<String>) -> Self {
        Self { text: text.into(), ..Default::default() }
    }

    pub fn failure(message: impl Into<String>) -> Self {
        Self { fail: Some(message.into()), ..Default::default() }
    }

    pub fn with_tokens(mut self, prompt: u64, completion: u64) -> Self {
        self.prompt_tokens = prompt;
        self.completion_tokens = completion;
        self
    }
}

/// Fallback response used once a tag's queue is empty, chosen by the first
/// rule whose needle occurs in the user message. Rules are never consumed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptRule {
    pub when_contains: String,
    #[serde(flatten)]
    pub response: ScriptedResponse,
}

/// Per-tag FIFO queues of canned responses. Every request is captured so
/// tests can inspect rendered prompts.
pub struct ScriptedProvider {
    model: String,
    queues: Mutex<HashMap<Role, VecDeque<ScriptedResponse>>>,
    rules: Vec<ScriptRule>,
    captured: Mutex<Vec<ChatRequest>>,
}

impl ScriptedProvider {
    pub fn new(model: impl Into<String>) -> Self {
        Self { model: model.into(), queues: Mutex::default(), rules: Vec::new(), captured: Mutex::default() }
    }

    pub fn with_queue<I>(self, tag: Role, responses: I) -> Self
    where
        I: IntoIterator<Item = ScriptedResponse>,
    {
        self.queues.lock().expect("queue lock").entry(tag).or_default().extend(responses);
        self
    }

    pub fn with_rules(mut self, rules: Vec<ScriptRule>) -> Self {
        self.rules = rules;
        self
    }

    pub fn push(&self, tag: Role, response: ScriptedResponse) {
        self.queues.lock().expect("queue lock").entry(tag).or_default().push_back(response);
    }

    pub fn remaining(&self, tag: Role) -> usize {
        self.queues.lock().expect("queue lock").get(&tag).map_or(0, VecDeque::len)
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.captured.lock().expect("capture lock").clone()
    }
}

impl ChatProvider for ScriptedProvider {
    fn model_name(&self) -> &str {
        &self.model
    }

    fn complete(&self, request: &ChatRequest) -> Result<CompletionResult, ProviderError> {
        self.captured.lock().expect("capture lock").push(request.clone());
        let queued = self.queues.lock().expect("queue lock").get_mut(&request.tag).and_then(VecDeque::pop_front);
        let response = match queued {
            Some(r) => r,
            None => self
                .rules
                .iter()
                .find(|r| request.user.contains(&r.when_contains))
                .map(|r| r.response.clone())
                .ok_or(ProviderError::QueueExhausted(request.tag))?,
        };
        if let Some(message) = response.fail {
            return Err(ProviderError::ScriptedFailure(message));
        }
        Ok(CompletionResult {
            text: response.text,
            prompt_tokens: response.prompt_tokens,
            completion_tokens: response.completion_tokens,
            latency_ms: 0,
        })
    }
}

// ---------------------------------------------------------------------------
// HTTP chat provider
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    /// Delay before the first retry; doubles after each attempt.
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_retries: 3, base_delay: Duration::from_millis(500) }
    }
}

impl RetryPolicy {
    pub fn delay_for(&self, retry: u32) -> Duration {
        self.base_delay * 2u32.saturating_pow(retry)
    }
}

/// One OpenAI-style `chat/completions` endpoint.
pub struct HttpChatProvider {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    retry: RetryPolicy,
    agent: ureq::Agent,
}

impl fmt::Debug for HttpChatProvider {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HttpChatProvider")
            .field("endpoint", &self.endpoint)
            .field("model", &self.model)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .field("retry", &self.retry)
            .finish()
    }
}

impl HttpChatProvider {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>, api_key: Option<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(300)))
            .build()
            .into();
        Self { endpoint: endpoint.into(), model: model.into(), api_key, retry: RetryPolicy::default(), agent }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    fn body(&self, request: &ChatRequest) -> serde_json::Value {
        let mut messages = Vec::new();
        if !request.system.is_empty() {
            messages.push(json!({"role": "system", "content": request.system}));
        }
        messages.push(json!({"role": "user", "content": request.user}));
        let mut body = json!({
            "model": self.model,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        if let Some(top_p) = request.top_p {
            body["top_p"] = json!(top_p);
        }
        if let Some(seed) = request.seed {
            body["seed"] = json!(seed);
        }
        body
    }

    fn attempt(&self, body: &serde_json::Value) -> Result<CompletionResult, ProviderError> {
        let started = Instant::now();
        let mut req = self.agent.post(&self.endpoint).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(|e| ProviderError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| ProviderError::Transport(e.to_string()))?;
        match status {
            200..=299 => {}
            401 | 403 => return Err(ProviderError::Auth(format!("status {status}"))),
            429 => return Err(ProviderError::RateLimit(truncate(&text, 200))),
            _ => return Err(ProviderError::Http { status, body: truncate(&text, 200) }),
        }
        parse_chat_response(&text, started.elapsed())
    }
}

fn truncate(s: &str, max_chars: usize) -> String {
    s.chars().take(max_chars).collect()
}

fn parse_chat_response(text: &str, elapsed: Duration) -> Result<CompletionResult, ProviderError> {
    let v: serde_json::Value =
        serde_json::from_str(text).map_err(|e| ProviderError::InvalidResponse(e.to_string()))?;
    let content = v["choices"][0]["message"]["content"]
        .as_str()
        .ok_or_else(|| ProviderError::InvalidResponse("missing choices[0].message.content".into()))?;
    Ok(CompletionResult {
        text: content.to_string(),
        prompt_tokens: v["usage"]["prompt_tokens"].as_u64().unwrap_or(0),
        completion_tokens: v["usage"]["completion_tokens"].as_u64().unwrap_or(0),
        latency_ms: elapsed.as_millis() as u64,
    })
}

impl ChatProvider for HttpChatProvider {
    fn model_name(&self) -> &str {
        &self.model
    }

    fn complete(&self, request: &ChatRequest) -> Result<CompletionResult, ProviderError> {
        let body = self.body(request);
        let mut retry = 0;
        loop {
            match self.attempt(&body) {
                Err(e) if e.is_retryable() && retry < self.retry.max_retries => {
                    thread::sleep(self.retry.delay_for(retry));
                    retry += 1;
                }
                other => return other,
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Provider configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    Scripted,
    HttpChat,
}

/// USD per one million tokens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Price {
    pub prompt: f64,
    pub completion: f64,
}

/// Provider entry of a config file. Credentials are only ever read from the
/// environment variable named by `credential_env`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderRef {
    pub kind: ProviderKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default, rename = "model", skip_serializing_if = "Option::is_none")]
    pub model_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub credential_env: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub price: Option<Price>,
    /// Scripted only: queued responses, consumed in order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub responses: Vec<ScriptedResponse>,
    /// Scripted only: prompt-matched fallbacks once the queue is empty.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rules: Vec<ScriptRule>,
}

impl ProviderRef {
    pub fn scripted(model: impl Into<String>, responses: Vec<ScriptedResponse>) -> Self {
        Self {
            kind: ProviderKind::Scripted,
            endpoint: None,
            model_name: Some(model.into()),
            credential_env: None,
            price: None,
            responses,
            rules: Vec::new(),
        }
    }

    pub fn model(&self) -> &str {
        self.model_name.as_deref().unwrap_or(match self.kind {
            ProviderKind::Scripted => "scripted",
            ProviderKind::HttpChat => "",
        })
    }

    pub fn validate(&self) -> Result<(), ProviderError> {
        if self.kind == ProviderKind::HttpChat {
            if self.endpoint.as_deref().is_none_or(str::is_empty) {
                return Err(ProviderError::Config("http_chat provider requires `endpoint`".into()));
            }
            if self.model_name.as_deref().is_none_or(str::is_empty) {
                return Err(ProviderError::Config("http_chat provider requires `model`".into()));
            }
        }
        Ok(())
    }

    /// Instantiates the provider. Scripted providers get a fresh copy of
    /// their queue on every call, queued under `role`.
    pub fn build(&self, role: Role) -> Result<Arc<dyn ChatProvider>, ProviderError> {
        self.validate()?;
        match self.kind {
            ProviderKind::Scripted => Ok(Arc::new(
                ScriptedProvider::new(self.model())
                    .with_queue(role, self.responses.clone())
                    .with_rules(self.rules.clone()),
            )),
            ProviderKind::HttpChat => {
                let api_key = match &self.credential_env {
                    Some(var) => Some(std::env::var(var).map_err(|_| {
                        ProviderError::Auth(format!("environment variable `{var}` is not set"))
                    })?),
                    None => None,
                };
                Ok(Arc::new(HttpChatProvider::new(
                    self.endpoint.clone().expect("validated"),
                    self.model(),
                    api_key,
                )))
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Usage ledger and cost
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub tag: Role,
    pub model: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub latency_ms: u64,
}

/// Append-only sink of every completed provider call of a run.
#[derive(Debug, Default)]
pub struct UsageLedger {
    entries: Mutex<Vec<LedgerEntry>>,
}

impl UsageLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, tag: Role, model: &str, result: &CompletionResult) {
        self.entries.lock().expect("ledger lock").push(LedgerEntry {
            tag,
            model: model.to_string(),
            prompt_tokens: result.prompt_tokens,
            completion_tokens: result.completion_tokens,
            latency_ms: result.latency_ms,
        });
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("ledger lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn entries(&self) -> Vec<LedgerEntry> {
        self.entries.lock().expect("ledger lock").clone()
    }

    /// Entries recorded at or after position `from`.
    pub fn entries_since(&self, from: usize) -> Vec<LedgerEntry> {
        self.entries.lock().expect("ledger lock")[from..].to_vec()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CostLine {
    pub calls: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    /// `None` when any contributing model has no configured price.
    pub cost_usd: Option<f64>,
}

impl CostLine {
    fn zero() -> Self {
        Self { cost_usd: Some(0.0), ..Default::default() }
    }

    fn add(&mut self, other: &CostLine) {
        self.calls += other.calls;
        self.prompt_tokens += other.prompt_tokens;
        self.completion_tokens += other.completion_tokens;
        self.cost_usd = match (self.cost_usd, other.cost_usd) {
            (Some(a), Some(b)) => Some(a + b),
            _ => None,
        };
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostSummary {
    pub per_tag: BTreeMap<Role, CostLine>,
    pub per_model: BTreeMap<String, CostLine>,
    pub total: CostLine,
}

/// Sums tokens per tag and per model and prices them at
/// `tokens * usd_per_million / 1e6`.
pub fn cost_report(ledger: &[LedgerEntry], prices: &BTreeMap<String, Price>) -> CostSummary {
    let mut groups: BTreeMap<(Role, &str), (u64, u64, u64)> = BTreeMap::new();
    for e in ledger {
        let g = groups.entry((e.tag, e.model.as_str())).or_default();
        g.0 += 1;
        g.1 += e.prompt_tokens;
        g.2 += e.completion_tokens;
    }
    let mut per_tag: BTreeMap<Role, CostLine> = BTreeMap::new();
    let mut per_model: BTreeMap<String, CostLine> = BTreeMap::new();
    let mut total = CostLine::zero();
    for ((tag, model), (calls, prompt, completion)) in groups {
        let line = CostLine {
            calls,
            prompt_tokens: prompt,
            completion_tokens: completion,
            cost_usd: prices
                .get(model)
                .map(|p| prompt as f64 * p.prompt / 1e6 + completion as f64 * p.completion / 1e6),
        };
        per_tag.entry(tag).or_insert_with(CostLine::zero).add(&line);
        per_model.entry(model.to_string()).or_insert_with(CostLine::zero).add(&line);
        total.add(&line);
    }
    CostSummary { per_tag, per_model, total }
}
