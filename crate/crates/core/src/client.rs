//! Chat-completion providers: a live HTTP client for OpenAI-compatible
//! endpoints, a content-addressed on-disk cache, and a deterministic replay
//! provider for offline runs.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompts::{HINT_CLAUSE_PREFIX, REPHRASE_QUERY_MARKER};
use crate::seed::sha256_hex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model: String,
    /// Sent as a single user message.
    pub prompt: String,
    pub temperature: f64,
    /// Distinguishes self-consistency draws of the same prompt.
    pub sample_index: usize,
    pub max_tokens: u32,
}

impl CompletionRequest {
    pub fn validate(&self) -> Result<(), ClientError> {
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(ClientError::InvalidRequest(format!(
                "temperature {} must be a finite non-negative number",
                self.temperature
            )));
        }
        if self.prompt.is_empty() {
            return Err(ClientError::InvalidRequest("prompt is empty".into()));
        }
        if self.max_tokens == 0 {
            return Err(ClientError::InvalidRequest("max_tokens must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub text: String,
    pub provider_id: String,
    pub token_usage: Option<TokenUsage>,
    pub latency_ms: u64,
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("credential environment variable {env} is not set")]
    CredentialMissing { env: String },
    #[error("network failure after {attempts} attempts: {message}")]
    Network { attempts: u32, message: String },
    #[error("rate limited after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("provider rejected the request (status {status}): {message}")]
    Provider { status: u16, message: String },
    #[error("malformed provider response: {0}")]
    MalformedResponse(String),
    #[error("no fixture entry for a {stage} request ending …{prompt_tail:?}")]
    FixtureMiss { stage: String, prompt_tail: String },
    #[error("{path}:{line}: {message}")]
    FixtureFormat {
        path: String,
        line: usize,
        message: String,
    },
    #[error("sample {index} failed: {source}")]
    SampleFailed {
        index: usize,
        #[source]
        source: Box<ClientError>,
    },
    #[error("cache I/O at {path}: {source}")]
    Cache {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A chat-completion backend. Implementations must be shareable across
/// worker threads.
pub trait Provider: Send + Sync {
    fn id(&self) -> &str;
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, ClientError>;
}

/// Runs `req` at sample_index 0..n, returning the results in index order.
/// A failing draw aborts with its index.
pub fn complete_sampled(
    provider: &dyn Provider,
    req: &CompletionRequest,
    n: usize,
) -> Result<Vec<CompletionResult>, ClientError> {
    if n == 0 {
        return Err(ClientError::InvalidRequest("sample count must be at least 1".into()));
    }
    let mut results = Vec::with_capacity(n);
    for index in 0..n {
        let sample = CompletionRequest {
            sample_index: index,
            ..req.clone()
        };
        let result = provider
            .complete(&sample)
            .map_err(|source| ClientError::SampleFailed {
                index,
                source: Box::new(source),
            })?;
        results.push(result);
    }
    Ok(results)
}

/// Stable digest of the request tuple that decides response identity.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CacheKey(pub String);

impl CacheKey {
    pub fn of(req: &CompletionRequest) -> CacheKey {
        #[derive(Serialize)]
        struct KeyTuple<'a> {
            model: &'a str,
            prompt: &'a str,
            temperature: f64,
            sample_index: usize,
        }
        let canonical = serde_json::to_string(&KeyTuple {
            model: &req.model,
            prompt: &req.prompt,
            temperature: req.temperature,
            sample_index: req.sample_index,
        })
        .expect("key tuple serialization is infallible");
        CacheKey(sha256_hex(canonical.as_bytes()))
    }
}

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    key: String,
    request: CompletionRequest,
    text: String,
    token_usage: Option<TokenUsage>,
    provider_id: String,
    timestamp: String,
}

/// One file per response under `dir/<2-char prefix>/<digest>.json`, written
/// atomically so concurrent workers never observe partial entries.
#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        ResponseCache { dir: dir.into() }
    }

    fn entry_path(&self, key: &CacheKey) -> PathBuf {
        self.dir.join(&key.0[..2]).join(format!("{}.json", key.0))
    }

    /// Corrupt or unreadable entries read as misses.
    pub fn get(&self, req: &CompletionRequest) -> Option<CompletionResult> {
        let path = self.entry_path(&CacheKey::of(req));
        let text = fs::read_to_string(path).ok()?;
        let entry: CacheEntry = serde_json::from_str(&text).ok()?;
        Some(CompletionResult {
            text: entry.text,
            provider_id: entry.provider_id,
            token_usage: entry.token_usage,
            latency_ms: 0,
        })
    }

    pub fn put(&self, req: &CompletionRequest, result: &CompletionResult) -> Result<(), ClientError> {
        let key = CacheKey::of(req);
        let path = self.entry_path(&key);
        let parent = path.parent().expect("entry path has a parent");
        let to_cache_err = |source: std::io::Error| ClientError::Cache {
            path: path.display().to_string(),
            source,
        };
        fs::create_dir_all(parent).map_err(to_cache_err)?;
        let entry = CacheEntry {
            key: key.0.clone(),
            request: req.clone(),
            text: result.text.clone(),
            token_usage: result.token_usage,
            provider_id: result.provider_id.clone(),
            timestamp: chrono::Utc::now().to_rfc3339(),
        };
        let mut tmp = tempfile::NamedTempFile::new_in(parent).map_err(to_cache_err)?;
        tmp.write_all(
            serde_json::to_string_pretty(&entry)
                .expect("cache entry serialization is infallible")
                .as_bytes(),
        )
        .map_err(to_cache_err)?;
        tmp.persist(&path).map_err(|e| to_cache_err(e.error))?;
        Ok(())
    }
}

/// Wraps any provider with the response cache: hits skip the inner provider
/// entirely, misses are stored after the inner call succeeds.
pub struct CachingProvider<P: Provider> {
    inner: P,
    cache: ResponseCache,
}

impl<P: Provider> CachingProvider<P> {
    pub fn new(inner: P, cache: ResponseCache) -> Self {
        CachingProvider { inner, cache }
    }
}

impl<P: Provider> Provider for CachingProvider<P> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, ClientError> {
        req.validate()?;
        if let Some(hit) = self.cache.get(req) {
            return Ok(hit);
        }
        let result = self.inner.complete(req)?;
        self.cache.put(req, &result)?;
        Ok(result)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 5,
            base_delay: Duration::from_secs(1),
            max_delay: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    /// Exponential backoff for the wait after `attempt` (1-based), jittered
    /// to half-to-full of the nominal delay.
    fn backoff(&self, attempt: u32) -> Duration {
        let nominal = self
            .base_delay
            .saturating_mul(2u32.saturating_pow(attempt.saturating_sub(1)))
            .min(self.max_delay);
        nominal.mul_f64(0.5 + 0.5 * rand::random::<f64>())
    }
}

/// Steady-rate limiter: one permit every `60 / per_minute` seconds, shared
/// by all workers holding a clone.
#[derive(Clone)]
pub struct RateLimiter {
    interval: Duration,
    next_free: Arc<Mutex<Instant>>,
}

impl RateLimiter {
    pub fn per_minute(requests: u32) -> Self {
        let requests = requests.max(1);
        RateLimiter {
            interval: Duration::from_secs_f64(60.0 / requests as f64),
            next_free: Arc::new(Mutex::new(Instant::now())),
        }
    }

    pub fn acquire(&self) {
        let wait = {
            let mut next_free = self.next_free.lock().expect("limiter lock");
            let now = Instant::now();
            let at = (*next_free).max(now);
            *next_free = at + self.interval;
            at.saturating_duration_since(now)
        };
        if !wait.is_zero() {
            std::thread::sleep(wait);
        }
    }
}

static NET_OPS: AtomicU64 = AtomicU64::new(0);

/// Number of HTTP sends performed by any [`HttpProvider`] in this process.
/// Lets tests assert that replay runs never touch the network.
pub fn network_ops() -> u64 {
    NET_OPS.load(Ordering::Relaxed)
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct ChatChoiceMessage {
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatChoiceMessage,
}

#[derive(Deserialize)]
struct ChatUsage {
    prompt_tokens: Option<u64>,
    completion_tokens: Option<u64>,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
    usage: Option<ChatUsage>,
}

/// Live client for any OpenAI-compatible `/v1/chat/completions` endpoint.
/// The credential comes from the environment variable named in config, never
/// from flags or files.
pub struct HttpProvider {
    endpoint: String,
    credential: String,
    http: reqwest::blocking::Client,
    retry: RetryPolicy,
    limiter: Option<RateLimiter>,
}

impl HttpProvider {
    pub fn new(endpoint_url: &str, credential_env: &str) -> Result<Self, ClientError> {
        let credential = std::env::var(credential_env)
            .ok()
            .filter(|v| !v.trim().is_empty())
            .ok_or_else(|| ClientError::CredentialMissing {
                env: credential_env.to_string(),
            })?;
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| ClientError::Network {
                attempts: 0,
                message: e.to_string(),
            })?;
        Ok(HttpProvider {
            endpoint: chat_endpoint(endpoint_url),
            credential,
            http,
            retry: RetryPolicy::default(),
            limiter: None,
        })
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_rate_limit(mut self, requests_per_minute: u32) -> Self {
        self.limiter = Some(RateLimiter::per_minute(requests_per_minute));
        self
    }

    fn send_once(&self, req: &CompletionRequest) -> Result<CompletionResult, ClientError> {
        if let Some(limiter) = &self.limiter {
            limiter.acquire();
        }
        let body = ChatRequest {
            model: &req.model,
            messages: vec![ChatMessage {
                role: "user",
                content: &req.prompt,
            }],
            temperature: req.temperature,
            max_tokens: req.max_tokens,
        };
        NET_OPS.fetch_add(1, Ordering::Relaxed);
        let started = Instant::now();
        let response = self
            .http
            .post(&self.endpoint)
            .bearer_auth(&self.credential)
            .json(&body)
            .send()
            .map_err(|e| ClientError::Network {
                attempts: 1,
                message: e.to_string(),
            })?;
        let status = response.status();
        let latency_ms = started.elapsed().as_millis() as u64;
        if status.as_u16() == 429 {
            return Err(ClientError::RateLimited { attempts: 1 });
        }
        if status.is_server_error() {
            return Err(ClientError::Network {
                attempts: 1,
                message: format!("server error {status}"),
            });
        }
        if !status.is_success() {
            let message = response.text().unwrap_or_default();
            return Err(ClientError::Provider {
                status: status.as_u16(),
                message: message.chars().take(400).collect(),
            });
        }
        let parsed: ChatResponse = response
            .json()
            .map_err(|e| ClientError::MalformedResponse(e.to_string()))?;
        let text = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| ClientError::MalformedResponse("response carries no choices".into()))?;
        let token_usage = parsed.usage.and_then(|u| {
            Some(TokenUsage {
                prompt_tokens: u.prompt_tokens?,
                completion_tokens: u.completion_tokens?,
            })
        });
        Ok(CompletionResult {
            text,
            provider_id: "http".into(),
            token_usage,
            latency_ms,
        })
    }
}

fn chat_endpoint(url: &str) -> String {
    let trimmed = url.trim_end_matches('/');
    if trimmed.ends_with("/chat/completions") {
        trimmed.to_string()
    } else {
        format!("{trimmed}/v1/chat/completions")
    }
}

impl Provider for HttpProvider {
    fn id(&self) -> &str {
        "http"
    }

    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, ClientError> {
        req.validate()?;
        let mut last_err = None;
        for attempt in 1..=self.retry.max_attempts {
            match self.send_once(req) {
                Ok(result) => return Ok(result),
                Err(e @ (ClientError::Network { .. } | ClientError::RateLimited { .. })) => {
                    last_err = Some(e);
                    if attempt < self.retry.max_attempts {
                        std::thread::sleep(self.retry.backoff(attempt));
                    }
                }
                Err(other) => return Err(other),
            }
        }
        Err(match last_err.expect("loop ran at least once") {
            ClientError::Network { message, .. } => ClientError::Network {
                attempts: self.retry.max_attempts,
                message,
            },
            ClientError::RateLimited { .. } => ClientError::RateLimited {
                attempts: self.retry.max_attempts,
            },
            other => other,
        })
    }
}

/// One recorded response in a replay fixture file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixtureRecord {
    pub problem_id: String,
    /// The problem text; a request matches when its prompt contains it.
    pub question: String,
    /// `review`, `rephrase`, `resolve`, or `baseline`.
    pub stage: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_index: Option<usize>,
    /// Optional exact-prompt pin, checked before any fallback matching.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_sha256: Option<String>,
    pub response: String,
}

/// Serves recorded responses, never the network.
///
/// A request is matched first by exact prompt digest, then by stage and
/// question: the stage is read off the prompt (the rephrase query marker,
/// else the resolve hint clause, else review/baseline), and among records of
/// that stage whose question appears in the prompt the longest question
/// wins. Records may pin a `sample_index`; un-pinned records answer any
/// draw.
#[derive(Debug)]
pub struct ReplayProvider {
    records: Vec<FixtureRecord>,
}

impl ReplayProvider {
    pub fn new(records: Vec<FixtureRecord>) -> Self {
        ReplayProvider { records }
    }

    pub fn from_str(text: &str, origin: &str) -> Result<Self, ClientError> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record: FixtureRecord =
                serde_json::from_str(line).map_err(|e| ClientError::FixtureFormat {
                    path: origin.to_string(),
                    line: i + 1,
                    message: e.to_string(),
                })?;
            records.push(record);
        }
        Ok(ReplayProvider { records })
    }

    pub fn load(path: &Path) -> Result<Self, ClientError> {
        let text = fs::read_to_string(path).map_err(|source| ClientError::Cache {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_str(&text, &path.display().to_string())
    }

    fn find(&self, req: &CompletionRequest) -> Option<&FixtureRecord> {
        let digest = sha256_hex(req.prompt.as_bytes());
        if let Some(rec) = self
            .records
            .iter()
            .find(|r| r.prompt_sha256.as_deref() == Some(digest.as_str()))
        {
            return Some(rec);
        }
        let stages = stage_candidates(&req.prompt);
        let mut best: Option<(&FixtureRecord, (usize, u8))> = None;
        for rec in &self.records {
            if !stages.contains(&rec.stage.as_str()) || !req.prompt.contains(&rec.question) {
                continue;
            }
            let sample_rank = match rec.sample_index {
                Some(i) if i == req.sample_index => 2u8,
                None => 1,
                Some(_) => continue,
            };
            let score = (rec.question.len(), sample_rank);
            if best.is_none_or(|(_, cur)| score > cur) {
                best = Some((rec, score));
            }
        }
        best.map(|(rec, _)| rec)
    }
}

fn stage_candidates(prompt: &str) -> &'static [&'static str] {
    if prompt.contains(REPHRASE_QUERY_MARKER) {
        &["rephrase"]
    } else if prompt.contains(HINT_CLAUSE_PREFIX) {
        &["resolve"]
    } else {
        &["review", "baseline"]
    }
}

impl Provider for ReplayProvider {
    fn id(&self) -> &str {
        "replay"
    }

    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, ClientError> {
        req.validate()?;
        match self.find(req) {
            Some(rec) => Ok(CompletionResult {
                text: rec.response.clone(),
                provider_id: "replay".into(),
                token_usage: None,
                latency_ms: 0,
            }),
            None => Err(ClientError::FixtureMiss {
                stage: stage_candidates(&req.prompt).join("/"),
                prompt_tail: req
                    .prompt
                    .chars()
                    .rev()
                    .take(120)
                    .collect::<String>()
                    .chars()
                    .rev()
                    .collect(),
            }),
        }
    }
}

/// Counts completions passing through to the inner provider.
pub struct CountingProvider<P: Provider> {
    inner: P,
    calls: Arc<AtomicU64>,
}

impl<P: Provider> CountingProvider<P> {
    pub fn new(inner: P) -> Self {
        CountingProvider {
            inner,
            calls: Arc::new(AtomicU64::new(0)),
        }
    }

    pub fn counter(&self) -> Arc<AtomicU64> {
        Arc::clone(&self.calls)
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

impl<P: Provider> Provider for CountingProvider<P> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, ClientError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.complete(req)
    }
}

/// Closure-backed provider for tests.
pub struct FnProvider<F>
where
    F: Fn(&CompletionRequest) -> Result<String, ClientError> + Send + Sync,
{
    name: String,
    respond: F,
}

impl<F> FnProvider<F>
where
    F: Fn(&CompletionRequest) -> Result<String, ClientError> + Send + Sync,
{
    pub fn new(name: impl Into<String>, respond: F) -> Self {
        FnProvider {
            name: name.into(),
            respond,
        }
    }
}

impl<F> Provider for FnProvider<F>
where
    F: Fn(&CompletionRequest) -> Result<String, ClientError> + Send + Sync,
{
    fn id(&self) -> &str {
        &self.name
    }

    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, ClientError> {
        req.validate()?;
        Ok(CompletionResult {
            text: (self.respond)(req)?,
            provider_id: self.name.clone(),
            token_usage: None,
            latency_ms: 0,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::stream_rng;
    use rand::Rng;

    fn request(prompt: &str) -> CompletionRequest {
        CompletionRequest {
            model: "test-model".into(),
            prompt: prompt.into(),
            temperature: 0.0,
            sample_index: 0,
            max_tokens: 256,
        }
    }

    #[test]
    fn invalid_requests_are_rejected_before_send() {
        let mut req = request("hello");
        req.temperature = -1.0;
        assert!(matches!(req.validate(), Err(ClientError::InvalidRequest(_))));
        req.temperature = f64::NAN;
        assert!(req.validate().is_err());
        let empty = request("");
        assert!(empty.validate().is_err());
        assert!(request("ok").validate().is_ok());
    }

    #[test]
    fn cache_key_distinguishes_every_tuple_field() {
        let base = request("prompt");
        let key = CacheKey::of(&base);
        assert_eq!(key, CacheKey::of(&base.clone()));
        let mut other = base.clone();
        other.sample_index = 1;
        assert_ne!(key, CacheKey::of(&other));
        let mut other = base.clone();
        other.temperature = 0.7;
        assert_ne!(key, CacheKey::of(&other));
        let mut other = base.clone();
        other.model = "other-model".into();
        assert_ne!(key, CacheKey::of(&other));
        let mut other = base;
        other.prompt = "prompt!".into();
        assert_ne!(key, CacheKey::of(&other));
    }

    #[test]
    fn cache_keys_stay_distinct_over_many_random_tuples() {
        let mut rng = stream_rng(7, &["cache-key-test"]);
        let mut seen = std::collections::HashSet::new();
        let mut tuples = std::collections::HashSet::new();
        for _ in 0..10_000 {
            let req = CompletionRequest {
                model: format!("m{}", rng.random_range(0..50u32)),
                prompt: format!("prompt {}", rng.random_range(0..100_000u64)),
                temperature: f64::from(rng.random_range(0..20u8)) / 10.0,
                sample_index: rng.random_range(0..40usize),
                max_tokens: 64,
            };
            let tuple = format!(
                "{}|{}|{}|{}",
                req.model, req.prompt, req.temperature, req.sample_index
            );
            if tuples.insert(tuple) {
                assert!(
                    seen.insert(CacheKey::of(&req).0),
                    "digest collision for distinct tuples"
                );
            }
        }
        assert!(seen.len() > 9_000);
    }

    #[test]
    fn cache_round_trip_skips_the_inner_provider() {
        let dir = tempfile::tempdir().unwrap();
        let counted = CountingProvider::new(FnProvider::new("fn", |req: &CompletionRequest| {
            Ok(format!("echo: {}", req.prompt))
        }));
        let calls = counted.counter();
        let provider = CachingProvider::new(counted, ResponseCache::new(dir.path()));
        let req = request("what is 2 + 2?");
        let first = provider.complete(&req).unwrap();
        let second = provider.complete(&req).unwrap();
        assert_eq!(first.text, second.text);
        assert_eq!(calls.load(Ordering::Relaxed), 1);

        let fresh = CachingProvider::new(
            FnProvider::new("fn", |_: &CompletionRequest| {
                panic!("cache should satisfy this request")
            }),
            ResponseCache::new(dir.path()),
        );
        assert_eq!(fresh.complete(&req).unwrap().text, first.text);
    }

    #[test]
    fn sampling_assigns_consecutive_indices() {
        let provider = FnProvider::new("fn", |req: &CompletionRequest| {
            Ok(format!("draw {}", req.sample_index))
        });
        let results = complete_sampled(&provider, &request("q"), 5).unwrap();
        assert_eq!(results.len(), 5);
        for (i, r) in results.iter().enumerate() {
            assert_eq!(r.text, format!("draw {i}"));
        }
        assert!(matches!(
            complete_sampled(&provider, &request("q"), 0),
            Err(ClientError::InvalidRequest(_))
        ));
    }

    #[test]
    fn sampling_reports_the_failing_index() {
        let provider = FnProvider::new("fn", |req: &CompletionRequest| {
            if req.sample_index == 2 {
                Err(ClientError::MalformedResponse("boom".into()))
            } else {
                Ok("fine".into())
            }
        });
        match complete_sampled(&provider, &request("q"), 4) {
            Err(ClientError::SampleFailed { index, .. }) => assert_eq!(index, 2),
            other => panic!("expected SampleFailed, got {other:?}"),
        }
    }

    fn fixture() -> ReplayProvider {
        let lines = [
            r#"{"problem_id":"p1","question":"Al has 2 cats. How many cats does Al have?","stage":"review","response":"We need to notice: 1.\"Al has 2 cats\"."}"#,
            r#"{"problem_id":"p1","question":"Al has 2 cats. How many cats does Al have?","stage":"rephrase","response":"1.\"Number of cats = 2.\""}"#,
            r#"{"problem_id":"p1","question":"Al has 2 cats. How many cats does Al have?","stage":"resolve","response":"The answer is 2."}"#,
            r#"{"problem_id":"p1","question":"Al has 2 cats. How many cats does Al have?","stage":"resolve","sample_index":1,"response":"The answer is 3."}"#,
        ];
        ReplayProvider::from_str(&lines.join("\n"), "inline").unwrap()
    }

    #[test]
    fn replay_matches_stage_by_prompt_markers() {
        let replay = fixture();
        let question = "Al has 2 cats. How many cats does Al have?";

        let review = request(&format!("Q: demo\nA: demo\n\nQ: {question}\nA:"));
        assert!(replay.complete(&review).unwrap().text.starts_with("We need to notice"));

        let rephrase = request(&format!(
            "{question}\nQ: Translate following sentences into equation: 1.'Al has 2 cats'\nA:"
        ));
        assert!(replay.complete(&rephrase).unwrap().text.contains("Number of cats"));

        let resolve = request(&format!(
            "Q: {question}\nA: With the Equation Hints: 'Number of cats = 2.', we will answer the question."
        ));
        assert_eq!(replay.complete(&resolve).unwrap().text, "The answer is 2.");
    }

    #[test]
    fn replay_honors_sample_pins_and_misses_loudly() {
        let replay = fixture();
        let question = "Al has 2 cats. How many cats does Al have?";
        let mut resolve = request(&format!(
            "Q: {question}\nA: With the Equation Hints: 'x', we will answer the question."
        ));
        resolve.sample_index = 1;
        assert_eq!(replay.complete(&resolve).unwrap().text, "The answer is 3.");
        resolve.sample_index = 7;
        assert_eq!(replay.complete(&resolve).unwrap().text, "The answer is 2.");

        let unknown = request("Q: Zoe has 9 hens. How many hens?\nA:");
        assert!(matches!(
            replay.complete(&unknown),
            Err(ClientError::FixtureMiss { .. })
        ));
    }

    #[test]
    fn replay_prefers_exact_prompt_digest() {
        let prompt = "Q: Al has 2 cats. How many cats does Al have?\nA:";
        let pinned = FixtureRecord {
            problem_id: "p1".into(),
            question: "unrelated text".into(),
            stage: "review".into(),
            sample_index: None,
            prompt_sha256: Some(sha256_hex(prompt.as_bytes())),
            response: "pinned response".into(),
        };
        let replay = ReplayProvider::new(vec![pinned]);
        assert_eq!(replay.complete(&request(prompt)).unwrap().text, "pinned response");
    }

    #[test]
    fn replay_fixture_format_errors_carry_line_numbers() {
        let err = ReplayProvider::from_str("{\"problem_id\":\"a\"}\n", "inline").unwrap_err();
        match err {
            ClientError::FixtureFormat { line, .. } => assert_eq!(line, 1),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn missing_credential_is_reported_by_name() {
        match HttpProvider::new("http://localhost:1", "R3_TEST_ABSENT_CREDENTIAL") {
            Err(ClientError::CredentialMissing { env }) => {
                assert_eq!(env, "R3_TEST_ABSENT_CREDENTIAL");
            }
            other => panic!("expected CredentialMissing, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn endpoint_normalization_appends_standard_path() {
        assert_eq!(
            chat_endpoint("https://api.example.com"),
            "https://api.example.com/v1/chat/completions"
        );
        assert_eq!(
            chat_endpoint("https://api.example.com/"),
            "https://api.example.com/v1/chat/completions"
        );
        assert_eq!(
            chat_endpoint("https://proxy.example.com/v1/chat/completions"),
            "https://proxy.example.com/v1/chat/completions"
        );
    }

    #[test]
    fn rate_limiter_spaces_out_permits() {
        let limiter = RateLimiter::per_minute(1200);
        let started = Instant::now();
        limiter.acquire();
        limiter.acquire();
        limiter.acquire();
        assert!(started.elapsed() >= Duration::from_millis(80));
    }

    #[test]
    fn backoff_grows_and_respects_the_cap() {
        let policy = RetryPolicy {
            max_attempts: 5,
            base_delay: Duration::from_millis(100),
            max_delay: Duration::from_millis(250),
        };
        for attempt in 1..=5 {
            let d = policy.backoff(attempt);
            assert!(d <= Duration::from_millis(250));
            assert!(d >= Duration::from_millis(50));
        }
    }
}
