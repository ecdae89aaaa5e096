//! Chat-completion access shared by every agent.
//!
//! A [`Gateway`] resolves each agent role to a backend and model through a
//! [`ModelRoute`], bounds the number of in-flight calls, and counts calls.
//! Backends: [`RemoteBackend`] (OpenAI-compatible HTTP), [`ScriptedBackend`]
//! (fixtures for offline runs), and [`ReplayBackend`] (on-disk record/replay
//! cache wrapping another backend).

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const DEFAULT_MAX_OUTPUT_TOKENS: u32 = 4096;
pub const DEFAULT_IN_FLIGHT: usize = 4;

/// The six pipeline agents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentRole {
    SchemaLinking,
    Subproblem,
    QueryPlan,
    Sql,
    CorrectionPlan,
    CorrectionSql,
}

impl AgentRole {
    pub const ALL: [AgentRole; 6] = [
        AgentRole::SchemaLinking,
        AgentRole::Subproblem,
        AgentRole::QueryPlan,
        AgentRole::Sql,
        AgentRole::CorrectionPlan,
        AgentRole::CorrectionSql,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AgentRole::SchemaLinking => "schema_linking",
            AgentRole::Subproblem => "subproblem",
            AgentRole::QueryPlan => "query_plan",
            AgentRole::Sql => "sql",
            AgentRole::CorrectionPlan => "correction_plan",
            AgentRole::CorrectionSql => "correction_sql",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.as_str() == s)
    }
}

impl fmt::Display for AgentRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MessageRole {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: MessageRole,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: MessageRole::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: MessageRole::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: MessageRole::Assistant, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model_id: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_output_tokens: u32,
}

impl ChatRequest {
    pub fn new(model_id: impl Into<String>, messages: Vec<Message>) -> Self {
        Self { model_id: model_id.into(), messages, temperature: 0.0, max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |m: &str| Err(GatewayError::InvalidRequest(m.to_string()));
        match self.messages.first() {
            None => return bad("no messages"),
            Some(m) if m.role == MessageRole::Assistant => return bad("first message must be system or user"),
            _ => {}
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return bad("temperature must be >= 0");
        }
        if self.max_output_tokens == 0 {
            return bad("max_output_tokens must be positive");
        }
        Ok(())
    }

    /// Deterministic digest over model, messages, and temperature.
    /// `max_output_tokens` is deliberately excluded.
    pub fn cache_key(&self) -> String {
        #[derive(Serialize)]
        struct KeyView<'a> {
            model: &'a str,
            messages: &'a [Message],
            temperature: String,
        }
        let view =
            KeyView { model: &self.model_id, messages: &self.messages, temperature: format!("{:?}", self.temperature) };
        let bytes = serde_json::to_vec(&view).expect("key view serializes");
        hex::encode(Sha256::digest(bytes))
    }

    fn prompt_words(&self) -> u64 {
        self.messages.iter().map(|m| m.content.split_whitespace().count() as u64).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendTag {
    Remote,
    Scripted,
    Replay,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl Usage {
    pub fn total(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }
}

impl std::ops::AddAssign for Usage {
    fn add_assign(&mut self, rhs: Self) {
        self.prompt_tokens += rhs.prompt_tokens;
        self.completion_tokens += rhs.completion_tokens;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatResponse {
    pub content: String,
    pub usage: Usage,
    pub latency: Duration,
    pub backend: BackendTag,
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("rate limited")]
    RateLimited { retry_after: Option<Duration> },
    #[error("server error {status}: {body}")]
    Server { status: u16, body: String },
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("request rejected with status {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("no scripted response for role {role} (key {key})")]
    ScriptMiss { role: AgentRole, key: String },
    #[error("replay cache miss for key {0}")]
    CacheMiss(String),
    #[error("replay cache error: {0}")]
    Cache(String),
    #[error("route names unknown backend `{0}`")]
    UnknownBackend(String),
    #[error("giving up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: Box<GatewayError> },
}

impl GatewayError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, GatewayError::Transport(_) | GatewayError::RateLimited { .. } | GatewayError::Server { .. })
    }
}

pub trait Backend: Send + Sync {
    fn complete(&self, role: AgentRole, request: &ChatRequest) -> Result<ChatResponse, GatewayError>;
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn complete(&self, role: AgentRole, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        (**self).complete(role, request)
    }
}

// ---------------------------------------------------------------------------
// Routing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouteTarget {
    pub backend: String,
    pub model: String,
}

/// Backend and model per agent role. All six roles must be mapped.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelRoute {
    routes: BTreeMap<AgentRole, RouteTarget>,
}

impl ModelRoute {
    pub fn new(routes: BTreeMap<AgentRole, RouteTarget>) -> Result<Self, GatewayError> {
        let missing: Vec<&str> =
            AgentRole::ALL.iter().filter(|r| !routes.contains_key(r)).map(|r| r.as_str()).collect();
        if !missing.is_empty() {
            return Err(GatewayError::InvalidRequest(format!("roles without a route: {}", missing.join(", "))));
        }
        Ok(Self { routes })
    }

    /// Every role on the same backend and model.
    pub fn uniform(backend: &str, model: &str) -> Self {
        let target = RouteTarget { backend: backend.into(), model: model.into() };
        Self { routes: AgentRole::ALL.iter().map(|r| (*r, target.clone())).collect() }
    }

    pub fn target(&self, role: AgentRole) -> &RouteTarget {
        &self.routes[&role]
    }

    pub fn set(&mut self, role: AgentRole, target: RouteTarget) {
        self.routes.insert(role, target);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&AgentRole, &RouteTarget)> {
        self.routes.iter()
    }
}

struct Limiter {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Limiter {
    fn new(n: usize) -> Self {
        Self { free: Mutex::new(n.max(1)), cv: Condvar::new() }
    }

    fn acquire(&self) -> LimiterGuard<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        LimiterGuard(self)
    }
}

struct LimiterGuard<'a>(&'a Limiter);

impl Drop for LimiterGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

/// Routes agent calls to backends. Shareable across threads.
pub struct Gateway {
    route: ModelRoute,
    backends: HashMap<String, Arc<dyn Backend>>,
    limiter: Limiter,
    calls: AtomicU64,
    pub temperature: f64,
    pub max_output_tokens: u32,
}

impl Gateway {
    pub fn new(route: ModelRoute, backends: HashMap<String, Arc<dyn Backend>>) -> Result<Self, GatewayError> {
        for (_, t) in route.iter() {
            if !backends.contains_key(&t.backend) {
                return Err(GatewayError::UnknownBackend(t.backend.clone()));
            }
        }
        Ok(Self {
            route,
            backends,
            limiter: Limiter::new(DEFAULT_IN_FLIGHT),
            calls: AtomicU64::new(0),
            temperature: 0.0,
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
        })
    }

    /// A gateway that sends every role to one backend.
    pub fn single(backend: Arc<dyn Backend>, model: &str) -> Self {
        let mut backends = HashMap::new();
        backends.insert("default".to_string(), backend);
        Self::new(ModelRoute::uniform("default", model), backends).expect("single route is complete")
    }

    pub fn with_in_flight_limit(mut self, n: usize) -> Self {
        self.limiter = Limiter::new(n);
        self
    }

    pub fn route(&self) -> &ModelRoute {
        &self.route
    }

    /// Builds the request a role would send.
    pub fn request(&self, role: AgentRole, messages: Vec<Message>) -> ChatRequest {
        let mut req = ChatRequest::new(self.route.target(role).model.clone(), messages);
        req.temperature = self.temperature;
        req.max_output_tokens = self.max_output_tokens;
        req
    }

    pub fn complete(&self, role: AgentRole, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        request.validate()?;
        let target = self.route.target(role);
        let backend =
            self.backends.get(&target.backend).ok_or_else(|| GatewayError::UnknownBackend(target.backend.clone()))?;
        self.calls.fetch_add(1, Ordering::SeqCst);
        let _slot = self.limiter.acquire();
        backend.complete(role, request)
    }

    /// Number of `complete` invocations that reached a backend.
    pub fn call_count(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

// ---------------------------------------------------------------------------
// Cost accounting
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CostSummary {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub total_tokens: u64,
    pub cost: f64,
}

/// Sums usage over `usages` and prices it at `price_per_mtok` dollars per
/// million tokens.
pub fn accumulate_usage<I>(usages: I, price_per_mtok: f64) -> CostSummary
where
    I: IntoIterator<Item = Usage>,
{
    let mut total = Usage::default();
    for u in usages {
        total += u;
    }
    CostSummary {
        prompt_tokens: total.prompt_tokens,
        completion_tokens: total.completion_tokens,
        total_tokens: total.total(),
        cost: total.total() as f64 * price_per_mtok / 1_000_000.0,
    }
}

/// Dollars per million tokens, per model id with a fallback.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceTable {
    pub default_per_mtok: f64,
    #[serde(default)]
    pub per_model: BTreeMap<String, f64>,
}

impl Default for PriceTable {
    fn default() -> Self {
        Self { default_per_mtok: 15.0, per_model: BTreeMap::new() }
    }
}

impl PriceTable {
    pub fn price_for(&self, model: &str) -> f64 {
        self.per_model.get(model).copied().unwrap_or(self.default_per_mtok)
    }

    pub fn cost(&self, model: &str, usage: Usage) -> f64 {
        usage.total() as f64 * self.price_for(model) / 1_000_000.0
    }
}

// ---------------------------------------------------------------------------
// Remote backend
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
    /// Relative jitter, e.g. 0.2 for ±20%.
    pub jitter: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 5, base_delay: Duration::from_secs(1), max_delay: Duration::from_secs(60), jitter: 0.2 }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (0-based), ignoring server hints.
    pub fn backoff(&self, retry: u32) -> Duration {
        let exp = self.base_delay.as_secs_f64() * 2f64.powi(retry.min(30) as i32);
        let factor = if self.jitter > 0.0 { 1.0 + rand::random_range(-self.jitter..self.jitter) } else { 1.0 };
        Duration::from_secs_f64((exp * factor).min(self.max_delay.as_secs_f64()))
    }

    /// Calls `op` until it succeeds, fails fatally, or attempts run out.
    pub fn run<T>(&self, mut op: impl FnMut() -> Result<T, GatewayError>) -> Result<T, GatewayError> {
        let mut attempt = 0;
        loop {
            attempt += 1;
            match op() {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() && attempt < self.max_attempts => {
                    let wait = match &e {
                        GatewayError::RateLimited { retry_after: Some(hint) } => (*hint).min(self.max_delay),
                        _ => self.backoff(attempt - 1),
                    };
                    std::thread::sleep(wait);
                }
                Err(e) if e.is_retryable() => {
                    return Err(GatewayError::Exhausted { attempts: attempt, last: Box::new(e) });
                }
                Err(e) => return Err(e),
            }
        }
    }
}

/// OpenAI-compatible `POST {base_url}/v1/chat/completions` client.
pub struct RemoteBackend {
    base_url: String,
    api_key: Option<String>,
    agent: ureq::Agent,
    pub retry: RetryPolicy,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
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

impl RemoteBackend {
    /// `timeout` bounds each HTTP exchange end to end.
    pub fn new(base_url: impl Into<String>, api_key: Option<String>, timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder().http_status_as_error(false).timeout_global(Some(timeout)).build();
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key,
            agent: ureq::Agent::new_with_config(config),
            retry: RetryPolicy::default(),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    fn endpoint(&self) -> String {
        if self.base_url.ends_with("/v1") {
            format!("{}/chat/completions", self.base_url)
        } else {
            format!("{}/v1/chat/completions", self.base_url)
        }
    }

    fn attempt(&self, body: &str) -> Result<(String, Usage), GatewayError> {
        let mut req = self.agent.post(self.endpoint()).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req.send(body).map_err(|e| GatewayError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let retry_after = resp
            .headers()
            .get("retry-after")
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.trim().parse::<f64>().ok())
            .filter(|s| s.is_finite() && *s >= 0.0)
            .map(Duration::from_secs_f64);
        let text = resp.body_mut().read_to_string().map_err(|e| GatewayError::Transport(e.to_string()))?;
        match status {
            200..=299 => {}
            401 | 403 => return Err(GatewayError::Auth(text)),
            429 => return Err(GatewayError::RateLimited { retry_after }),
            500..=599 => return Err(GatewayError::Server { status, body: text }),
            _ => return Err(GatewayError::Rejected { status, body: text }),
        }
        let wire: WireResponse = serde_json::from_str(&text).map_err(|e| GatewayError::Malformed(e.to_string()))?;
        let content = wire
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| GatewayError::Malformed("no choices".into()))?;
        let usage = wire
            .usage
            .map(|u| Usage { prompt_tokens: u.prompt_tokens, completion_tokens: u.completion_tokens })
            .unwrap_or_default();
        Ok((content, usage))
    }
}

impl Backend for RemoteBackend {
    fn complete(&self, _role: AgentRole, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let body = serde_json::json!({
            "model": request.model_id,
            "messages": request.messages,
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        })
        .to_string();
        let started = Instant::now();
        let (content, usage) = self.retry.run(|| self.attempt(&body))?;
        Ok(ChatResponse { content, usage, latency: started.elapsed(), backend: BackendTag::Remote })
    }
}

// ---------------------------------------------------------------------------
// Scripted backend
// ---------------------------------------------------------------------------

type Responder = dyn Fn(AgentRole, &ChatRequest) -> Option<String> + Send + Sync;

/// Deterministic stand-in for a model.
///
/// Lookup order: exact `cache_key` match, then the responder function, then
/// the per-role ordered script (the Nth call for a role gets entry N).
/// Usage is synthetic: whitespace word counts of the prompt and response.
#[derive(Default)]
pub struct ScriptedBackend {
    by_key: HashMap<String, String>,
    by_role: Mutex<HashMap<AgentRole, VecDeque<String>>>,
    responder: Option<Box<Responder>>,
    /// When set, a miss is an error; otherwise an exhausted role script
    /// repeats its last entry.
    pub strict: bool,
    last: Mutex<HashMap<AgentRole, String>>,
}

impl ScriptedBackend {
    pub fn new() -> Self {
        Self { strict: true, ..Default::default() }
    }

    pub fn with_key(mut self, key: impl Into<String>, content: impl Into<String>) -> Self {
        self.by_key.insert(key.into(), content.into());
        self
    }

    pub fn with_script<I, S>(self, role: AgentRole, responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.by_role
            .lock()
            .expect("fresh mutex")
            .entry(role)
            .or_default()
            .extend(responses.into_iter().map(Into::into));
        self
    }

    pub fn with_responder(
        mut self,
        f: impl Fn(AgentRole, &ChatRequest) -> Option<String> + Send + Sync + 'static,
    ) -> Self {
        self.responder = Some(Box::new(f));
        self
    }

    pub fn lenient(mut self) -> Self {
        self.strict = false;
        self
    }
}

impl Backend for ScriptedBackend {
    fn complete(&self, role: AgentRole, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let key = request.cache_key();
        let content = self
            .by_key
            .get(&key)
            .cloned()
            .or_else(|| self.responder.as_ref().and_then(|f| f(role, request)))
            .or_else(|| {
                let next = self.by_role.lock().unwrap_or_else(|e| e.into_inner()).get_mut(&role)?.pop_front();
                let mut last = self.last.lock().unwrap_or_else(|e| e.into_inner());
                match next {
                    Some(c) => {
                        last.insert(role, c.clone());
                        Some(c)
                    }
                    None if !self.strict => last.get(&role).cloned(),
                    None => None,
                }
            })
            .ok_or(GatewayError::ScriptMiss { role, key })?;
        let usage = Usage {
            prompt_tokens: request.prompt_words(),
            completion_tokens: content.split_whitespace().count() as u64,
        };
        Ok(ChatResponse { content, usage, latency: Duration::ZERO, backend: BackendTag::Scripted })
    }
}

// ---------------------------------------------------------------------------
// Replay cache
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct CacheRecord {
    key: String,
    model_id: String,
    prompt_tokens: u64,
    completion_tokens: u64,
    content: String,
}

/// Record/replay cache: one `<key>.jsonl` file per request digest.
///
/// Hits return the recorded content byte-for-byte. Misses go to `inner` and
/// are recorded; with no inner backend a miss is an error.
pub struct ReplayBackend {
    dir: PathBuf,
    inner: Option<Arc<dyn Backend>>,
    write_lock: Mutex<()>,
}

impl ReplayBackend {
    pub fn new(dir: impl Into<PathBuf>, inner: Option<Arc<dyn Backend>>) -> Result<Self, GatewayError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| GatewayError::Cache(format!("{}: {e}", dir.display())))?;
        Ok(Self { dir, inner, write_lock: Mutex::new(()) })
    }

    fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.jsonl"))
    }

    fn read(&self, key: &str) -> Result<Option<CacheRecord>, GatewayError> {
        let path = self.path_for(key);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(GatewayError::Cache(format!("{}: {e}", path.display()))),
        };
        let line = text.lines().rev().find(|l| !l.trim().is_empty()).unwrap_or("");
        serde_json::from_str(line).map(Some).map_err(|e| GatewayError::Cache(format!("{}: {e}", path.display())))
    }

    fn write(&self, record: &CacheRecord) -> Result<(), GatewayError> {
        let _guard = self.write_lock.lock().unwrap_or_else(|e| e.into_inner());
        let path = self.path_for(&record.key);
        let tmp = path.with_extension("tmp");
        let io = |e: std::io::Error| GatewayError::Cache(format!("{}: {e}", path.display()));
        let mut line = serde_json::to_string(record).map_err(|e| GatewayError::Cache(e.to_string()))?;
        line.push('\n');
        let mut f = fs::File::create(&tmp).map_err(io)?;
        f.write_all(line.as_bytes()).map_err(io)?;
        f.sync_all().map_err(io)?;
        fs::rename(&tmp, &path).map_err(io)
    }
}

impl Backend for ReplayBackend {
    fn complete(&self, role: AgentRole, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let key = request.cache_key();
        if let Some(rec) = self.read(&key)? {
            return Ok(ChatResponse {
                content: rec.content,
                usage: Usage { prompt_tokens: rec.prompt_tokens, completion_tokens: rec.completion_tokens },
                latency: Duration::ZERO,
                backend: BackendTag::Replay,
            });
        }
        let inner = self.inner.as_ref().ok_or_else(|| GatewayError::CacheMiss(key.clone()))?;
        let resp = inner.complete(role, request)?;
        self.write(&CacheRecord {
            key,
            model_id: request.model_id.clone(),
            prompt_tokens: resp.usage.prompt_tokens,
            completion_tokens: resp.usage.completion_tokens,
            content: resp.content.clone(),
        })?;
        Ok(resp)
    }
}

/// Entry count and total size of a cache directory.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CacheStats {
    pub entries: u64,
    pub bytes: u64,
}

pub fn cache_stats(dir: &Path) -> std::io::Result<CacheStats> {
    let mut stats = CacheStats::default();
    if !dir.exists() {
        return Ok(stats);
    }
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        if entry.path().extension().is_some_and(|e| e == "jsonl") {
            stats.entries += 1;
            stats.bytes += entry.metadata()?.len();
        }
    }
    Ok(stats)
}

/// Removes every cache entry; returns how many were removed.
pub fn clear_cache(dir: &Path) -> std::io::Result<u64> {
    let mut n = 0;
    if !dir.exists() {
        return Ok(0);
    }
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "jsonl") {
            fs::remove_file(path)?;
            n += 1;
        }
    }
    Ok(n)
}
