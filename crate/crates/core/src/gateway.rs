//! Chat-completion gateway: an OpenAI-compatible HTTP backend, a scripted
//! backend for deterministic tests, and per-role call accounting.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Environment variable holding the API key for remote backends.
pub const API_KEY_ENV: &str = "R2KG_API_KEY";

/// Token budget for temporal and fact-verification datasets.
pub const MAX_TOKENS_SHORT: u32 = 8_192;
/// Token budget for multi-hop QA datasets.
pub const MAX_TOKENS_LONG: u32 = 16_384;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChatRole {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: ChatRole,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: ChatRole::System, content: content.into() }
    }
    pub fn user(content: impl Into<String>) -> Self {
        Self { role: ChatRole::User, content: content.into() }
    }
    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: ChatRole::Assistant, content: content.into() }
    }
}

/// Nucleus and temperature settings for one call.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sampling {
    pub top_p: f64,
    pub temperature: f64,
}

impl Default for Sampling {
    fn default() -> Self {
        Self { top_p: 0.95, temperature: 0.95 }
    }
}

impl Sampling {
    pub fn new(top_p: f64, temperature: f64) -> Self {
        Self { top_p, temperature }
    }

    /// The three (top-p, temperature) pairs used for sampling variation.
    pub fn variation_triples() -> [Sampling; 3] {
        [Sampling::new(0.3, 0.5), Sampling::new(0.7, 1.0), Sampling::new(0.95, 0.95)]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model_id: String,
    pub messages: Vec<ChatMessage>,
    pub top_p: f64,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl CompletionRequest {
    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |msg: String| Err(GatewayError::InvalidRequest(msg));
        match self.messages.first() {
            None => return bad("messages must not be empty".into()),
            Some(m) if m.role == ChatRole::Assistant => {
                return bad("first message must be a system or user message".into())
            }
            _ => {}
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return bad(format!("top_p {} outside (0, 1]", self.top_p));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return bad(format!("temperature {} is negative", self.temperature));
        }
        if self.max_tokens == 0 {
            return bad("max_tokens must be positive".into());
        }
        Ok(())
    }

    /// JSON body in the chat-completions wire format. Field order is fixed.
    pub fn to_wire_json(&self) -> String {
        #[derive(Serialize)]
        struct Wire<'a> {
            model: &'a str,
            messages: &'a [ChatMessage],
            temperature: f64,
            top_p: f64,
            max_tokens: u32,
        }
        serde_json::to_string(&Wire {
            model: &self.model_id,
            messages: &self.messages,
            temperature: self.temperature,
            top_p: self.top_p,
            max_tokens: self.max_tokens,
        })
        .expect("request serialization cannot fail")
    }

    /// All message contents joined, used for predicates and token proxies.
    pub fn prompt_text(&self) -> String {
        self.messages.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    /// Generation stopped at `max_tokens`.
    pub truncated: bool,
    /// Exact counts when the endpoint reported them.
    pub usage: Option<Usage>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("endpoint returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    InvalidResponse(String),
    #[error("script entry {index} expected {expected}, prompt did not match")]
    ScriptMismatch { index: usize, expected: String },
    #[error("script exhausted after {len} responses")]
    ScriptExhausted { len: usize },
    #[error("missing API key: set {API_KEY_ENV}")]
    MissingApiKey,
}

impl GatewayError {
    pub fn is_transient(&self) -> bool {
        match self {
            GatewayError::Transport(_) => true,
            GatewayError::Http { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

/// Anything that can answer a chat-completion request.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, req: &CompletionRequest) -> Result<Completion, GatewayError>;
}

impl<B: ChatBackend + ?Sized> ChatBackend for Arc<B> {
    fn complete(&self, req: &CompletionRequest) -> Result<Completion, GatewayError> {
        (**self).complete(req)
    }
}

/// Rough token count: one token per four characters, rounded up.
pub fn token_proxy(text: &str) -> u64 {
    (text.chars().count() as u64).div_ceil(4)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    /// Total attempts, including the first.
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 3, base_delay: Duration::from_millis(500), max_delay: Duration::from_secs(8) }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (1-based).
    pub fn delay(&self, retry: u32) -> Duration {
        let factor = 1u32 << retry.saturating_sub(1).min(16);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

/// OpenAI-compatible chat-completions endpoint.
pub struct RemoteBackend {
    endpoint: String,
    api_key: Option<String>,
    retry: RetryPolicy,
    client: reqwest::blocking::Client,
}

impl fmt::Debug for RemoteBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RemoteBackend")
            .field("endpoint", &self.endpoint)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .field("retry", &self.retry)
            .finish()
    }
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

const BODY_EXCERPT: usize = 512;

impl RemoteBackend {
    /// Backend without credentials, for local or proxy endpoints.
    pub fn new(endpoint: impl Into<String>) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(300))
            .build()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        Ok(Self { endpoint: endpoint.into(), api_key: None, retry: RetryPolicy::default(), client })
    }

    /// Backend authenticated with the key in [`API_KEY_ENV`].
    pub fn from_env(endpoint: impl Into<String>) -> Result<Self, GatewayError> {
        let key = std::env::var(API_KEY_ENV).map_err(|_| GatewayError::MissingApiKey)?;
        Ok(Self::new(endpoint)?.with_api_key(key))
    }

    pub fn with_api_key(mut self, key: impl Into<String>) -> Self {
        self.api_key = Some(key.into());
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    fn attempt(&self, body: &str) -> Result<Completion, GatewayError> {
        let mut request = self
            .client
            .post(&self.endpoint)
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(body.to_string());
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let response = request.send().map_err(|e| GatewayError::Transport(e.to_string()))?;
        let status = response.status();
        let text = response.text().map_err(|e| GatewayError::Transport(e.to_string()))?;
        if !status.is_success() {
            let body: String = text.chars().take(BODY_EXCERPT).collect();
            return Err(GatewayError::Http { status: status.as_u16(), body });
        }
        let parsed: WireResponse =
            serde_json::from_str(&text).map_err(|e| GatewayError::InvalidResponse(e.to_string()))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| GatewayError::InvalidResponse("no choices in response".into()))?;
        Ok(Completion {
            text: choice.message.content.unwrap_or_default(),
            truncated: choice.finish_reason.as_deref() == Some("length"),
            usage: parsed.usage,
        })
    }
}

impl ChatBackend for RemoteBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<Completion, GatewayError> {
        req.validate()?;
        let body = req.to_wire_json();
        let mut attempt = 1;
        loop {
            match self.attempt(&body) {
                Err(err) if err.is_transient() && attempt < self.retry.max_attempts => {
                    std::thread::sleep(self.retry.delay(attempt));
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

/// Condition a scripted entry places on the incoming prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predicate {
    Any,
    /// Some message contains the substring.
    PromptContains(String),
    /// The final message contains the substring.
    LastMessageContains(String),
}

impl Predicate {
    pub fn matches(&self, req: &CompletionRequest) -> bool {
        match self {
            Predicate::Any => true,
            Predicate::PromptContains(s) => req.messages.iter().any(|m| m.content.contains(s.as_str())),
            Predicate::LastMessageContains(s) => req.messages.last().is_some_and(|m| m.content.contains(s.as_str())),
        }
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Predicate::Any => f.write_str("any prompt"),
            Predicate::PromptContains(s) => write!(f, "prompt containing {s:?}"),
            Predicate::LastMessageContains(s) => write!(f, "last message containing {s:?}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    #[serde(default = "any_predicate")]
    pub expect: Predicate,
    pub response: String,
}

fn any_predicate() -> Predicate {
    Predicate::Any
}

impl ScriptEntry {
    pub fn any(response: impl Into<String>) -> Self {
        Self { expect: Predicate::Any, response: response.into() }
    }

    pub fn when(expect: Predicate, response: impl Into<String>) -> Self {
        Self { expect, response: response.into() }
    }
}

/// Replays canned responses strictly in order.
#[derive(Debug, Default)]
pub struct ScriptedBackend {
    script: Vec<ScriptEntry>,
    cursor: Mutex<usize>,
    requests: Mutex<Vec<CompletionRequest>>,
}

impl ScriptedBackend {
    pub fn new(script: Vec<ScriptEntry>) -> Self {
        Self { script, cursor: Mutex::new(0), requests: Mutex::new(Vec::new()) }
    }

    /// Script where every entry accepts any prompt.
    pub fn from_responses<S: Into<String>, I: IntoIterator<Item = S>>(responses: I) -> Self {
        Self::new(responses.into_iter().map(ScriptEntry::any).collect())
    }

    pub fn cursor(&self) -> usize {
        *self.cursor.lock().unwrap()
    }

    pub fn remaining(&self) -> usize {
        self.script.len() - self.cursor()
    }

    /// Requests received so far, in order.
    pub fn requests(&self) -> Vec<CompletionRequest> {
        self.requests.lock().unwrap().clone()
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<Completion, GatewayError> {
        req.validate()?;
        let mut cursor = self.cursor.lock().unwrap();
        let entry = self.script.get(*cursor).ok_or(GatewayError::ScriptExhausted { len: self.script.len() })?;
        if !entry.expect.matches(req) {
            return Err(GatewayError::ScriptMismatch { index: *cursor, expected: entry.expect.to_string() });
        }
        *cursor += 1;
        self.requests.lock().unwrap().push(req.clone());
        Ok(Completion {
            text: entry.response.clone(),
            truncated: token_proxy(&entry.response) > u64::from(req.max_tokens),
            usage: None,
        })
    }
}

/// Which agent a call is made for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentRole {
    Operator,
    Supervisor,
}

#[derive(Debug, Default)]
struct RoleCounters {
    calls: AtomicU64,
    prompt_tokens: AtomicU64,
    completion_tokens: AtomicU64,
    failures: AtomicU64,
}

/// Shared call counters, aggregated across concurrent sessions.
#[derive(Debug, Default)]
pub struct CallCounters {
    operator: RoleCounters,
    supervisor: RoleCounters,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RoleTally {
    pub calls: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub failures: u64,
}

impl CallCounters {
    fn slot(&self, role: AgentRole) -> &RoleCounters {
        match role {
            AgentRole::Operator => &self.operator,
            AgentRole::Supervisor => &self.supervisor,
        }
    }

    pub fn tally(&self, role: AgentRole) -> RoleTally {
        let c = self.slot(role);
        RoleTally {
            calls: c.calls.load(Ordering::Relaxed),
            prompt_tokens: c.prompt_tokens.load(Ordering::Relaxed),
            completion_tokens: c.completion_tokens.load(Ordering::Relaxed),
            failures: c.failures.load(Ordering::Relaxed),
        }
    }
}

/// A backend bound to an agent role, model and sampling defaults. Every
/// call is counted in the shared [`CallCounters`].
#[derive(Clone)]
pub struct AgentClient {
    backend: Arc<dyn ChatBackend>,
    role: AgentRole,
    pub model_id: String,
    pub sampling: Sampling,
    pub max_tokens: u32,
    counters: Arc<CallCounters>,
}

impl fmt::Debug for AgentClient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AgentClient")
            .field("role", &self.role)
            .field("model_id", &self.model_id)
            .field("sampling", &self.sampling)
            .field("max_tokens", &self.max_tokens)
            .finish()
    }
}

impl AgentClient {
    pub fn new(backend: Arc<dyn ChatBackend>, role: AgentRole, model_id: impl Into<String>) -> Self {
        Self {
            backend,
            role,
            model_id: model_id.into(),
            sampling: Sampling::default(),
            max_tokens: MAX_TOKENS_LONG,
            counters: Arc::new(CallCounters::default()),
        }
    }

    pub fn with_sampling(mut self, sampling: Sampling) -> Self {
        self.sampling = sampling;
        self
    }

    pub fn with_max_tokens(mut self, max_tokens: u32) -> Self {
        self.max_tokens = max_tokens;
        self
    }

    pub fn with_counters(mut self, counters: Arc<CallCounters>) -> Self {
        self.counters = counters;
        self
    }

    pub fn role(&self) -> AgentRole {
        self.role
    }

    pub fn counters(&self) -> &Arc<CallCounters> {
        &self.counters
    }

    /// Same backend and counters acting in a different role.
    pub fn as_role(&self, role: AgentRole) -> Self {
        Self { role, ..self.clone() }
    }

    pub fn request(&self, messages: Vec<ChatMessage>, sampling: Option<Sampling>) -> CompletionRequest {
        let sampling = sampling.unwrap_or(self.sampling);
        CompletionRequest {
            model_id: self.model_id.clone(),
            messages,
            top_p: sampling.top_p,
            temperature: sampling.temperature,
            max_tokens: self.max_tokens,
        }
    }

    /// Sends one request and records the call.
    pub fn complete(&self, req: &CompletionRequest) -> Result<Completion, GatewayError> {
        let slot = self.counters.slot(self.role);
        slot.calls.fetch_add(1, Ordering::Relaxed);
        let result = self.backend.complete(req);
        match &result {
            Ok(c) => {
                let (prompt, completion) = match c.usage {
                    Some(u) => (u.prompt_tokens, u.completion_tokens),
                    None => (token_proxy(&req.prompt_text()), token_proxy(&c.text)),
                };
                slot.prompt_tokens.fetch_add(prompt, Ordering::Relaxed);
                slot.completion_tokens.fetch_add(completion, Ordering::Relaxed);
            }
            Err(_) => {
                slot.failures.fetch_add(1, Ordering::Relaxed);
            }
        }
        result
    }

    pub fn ask(&self, messages: Vec<ChatMessage>, sampling: Option<Sampling>) -> Result<Completion, GatewayError> {
        self.complete(&self.request(messages, sampling))
    }
}
