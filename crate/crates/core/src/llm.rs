//! Chat-completion transport for the explanation generator and debugger.
//!
//! The HTTP layer sits behind [`Transport`] and time behind [`Clock`] so
//! retry schedules and concurrency limits can be tested without a network.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const ENV_URL: &str = "LMX_LLM_URL";
pub const ENV_API_KEY: &str = "LMX_API_KEY";
pub const ENV_MODEL: &str = "LMX_LLM_MODEL";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attempt {
    pub number: u32,
    /// HTTP status, absent for network-level failures.
    pub status: Option<u16>,
    pub error: Option<String>,
}

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("transport failed after {} attempt(s): {message}", attempts.len())]
    Transport {
        message: String,
        attempts: Vec<Attempt>,
    },
    #[error("request rejected with HTTP {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("malformed response: {0}")]
    Protocol(String),
    #[error("invalid client configuration: {0}")]
    Config(String),
    #[error("invalid request: {0}")]
    Request(String),
    #[error("no recorded response for request {0} and no live endpoint configured")]
    ReplayMiss(String),
    #[error("cassette {path}: {message}")]
    Cassette { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpRequest {
    pub url: String,
    pub headers: Vec<(String, String)>,
    pub body: String,
    pub timeout: Duration,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
}

/// A single HTTP POST; network-level failures come back as `Err`.
pub trait Transport: Send + Sync {
    fn post(&self, request: &HttpRequest) -> Result<HttpResponse, String>;
}

pub struct ReqwestTransport {
    client: reqwest::blocking::Client,
}

impl ReqwestTransport {
    pub fn new() -> Result<Self, LlmError> {
        let client = reqwest::blocking::Client::builder()
            .build()
            .map_err(|e| LlmError::Config(e.to_string()))?;
        Ok(Self { client })
    }
}

impl Transport for ReqwestTransport {
    fn post(&self, request: &HttpRequest) -> Result<HttpResponse, String> {
        let mut builder = self
            .client
            .post(&request.url)
            .timeout(request.timeout)
            .header("content-type", "application/json")
            .body(request.body.clone());
        for (k, v) in &request.headers {
            builder = builder.header(k.as_str(), v.as_str());
        }
        let resp = builder.send().map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let body = resp.text().map_err(|e| e.to_string())?;
        Ok(HttpResponse { status, body })
    }
}

pub trait Clock: Send + Sync {
    fn now(&self) -> Instant;
    fn sleep(&self, duration: Duration);
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> Instant {
        Instant::now()
    }

    fn sleep(&self, duration: Duration) {
        std::thread::sleep(duration);
    }
}

/// Clock that advances only when slept on; records every sleep.
pub struct FakeClock {
    start: Instant,
    elapsed: Mutex<Duration>,
    sleeps: Mutex<Vec<Duration>>,
}

impl Default for FakeClock {
    fn default() -> Self {
        Self {
            start: Instant::now(),
            elapsed: Mutex::new(Duration::ZERO),
            sleeps: Mutex::new(Vec::new()),
        }
    }
}

impl FakeClock {
    pub fn sleeps(&self) -> Vec<Duration> {
        self.sleeps.lock().unwrap().clone()
    }
}

impl Clock for FakeClock {
    fn now(&self) -> Instant {
        self.start + *self.elapsed.lock().unwrap()
    }

    fn sleep(&self, duration: Duration) {
        *self.elapsed.lock().unwrap() += duration;
        self.sleeps.lock().unwrap().push(duration);
    }
}

/// Exponential backoff: `base · factor^k`, scaled by a uniform jitter in
/// `[1 − jitter, 1 + jitter]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base: Duration,
    pub factor: f64,
    pub jitter: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 2,
            base: Duration::from_secs(1),
            factor: 2.0,
            jitter: 0.1,
        }
    }
}

impl RetryPolicy {
    pub fn nominal_delay(&self, retry: u32) -> Duration {
        self.base.mul_f64(self.factor.powi(retry as i32))
    }

    fn delay(&self, retry: u32, rng: &mut ChaCha8Rng) -> Duration {
        let scale = if self.jitter > 0.0 {
            1.0 + rng.random_range(-self.jitter..=self.jitter)
        } else {
            1.0
        };
        self.nominal_delay(retry).mul_f64(scale)
    }
}

pub fn is_retryable_status(status: u16) -> bool {
    status == 429 || (500..600).contains(&status)
}

/// Bounds in-flight requests and spaces out admissions.
pub struct Limiter {
    max_in_flight: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
    min_interval: Option<Duration>,
    next_admission: Mutex<Option<Instant>>,
}

/// Releases its in-flight slot on drop, including on early return.
pub struct Permit<'a> {
    limiter: &'a Limiter,
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.limiter.in_flight.lock().unwrap();
        *n -= 1;
        self.limiter.freed.notify_one();
    }
}

impl Limiter {
    pub fn new(max_in_flight: usize, requests_per_second: Option<f64>) -> Self {
        Self {
            max_in_flight: max_in_flight.max(1),
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
            min_interval: requests_per_second
                .filter(|r| *r > 0.0)
                .map(|r| Duration::from_secs_f64(1.0 / r)),
            next_admission: Mutex::new(None),
        }
    }

    pub fn in_flight(&self) -> usize {
        *self.in_flight.lock().unwrap()
    }

    pub fn acquire(&self, clock: &dyn Clock) -> Permit<'_> {
        {
            let mut n = self.in_flight.lock().unwrap();
            while *n >= self.max_in_flight {
                n = self.freed.wait(n).unwrap();
            }
            *n += 1;
        }
        if let Some(interval) = self.min_interval {
            // token bucket of depth one: one admission per interval
            let wait = {
                let mut next = self.next_admission.lock().unwrap();
                let now = clock.now();
                let slot = match *next {
                    Some(t) if t > now => t,
                    _ => now,
                };
                *next = Some(slot + interval);
                slot.saturating_duration_since(now)
            };
            if !wait.is_zero() {
                clock.sleep(wait);
            }
        }
        Permit { limiter: self }
    }
}

/// Shared request executor: admission control plus retry with backoff.
pub struct Executor {
    pub transport: Arc<dyn Transport>,
    pub clock: Arc<dyn Clock>,
    pub policy: RetryPolicy,
    pub limiter: Limiter,
    rng: Mutex<ChaCha8Rng>,
}

impl Executor {
    pub fn new(
        transport: Arc<dyn Transport>,
        clock: Arc<dyn Clock>,
        policy: RetryPolicy,
        limiter: Limiter,
        jitter_seed: u64,
    ) -> Self {
        Self {
            transport,
            clock,
            policy,
            limiter,
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(jitter_seed)),
        }
    }

    /// Returns the successful response and the attempt log.
    pub fn execute(&self, request: &HttpRequest) -> Result<(HttpResponse, Vec<Attempt>), LlmError> {
        let mut attempts = Vec::new();
        let mut retry = 0u32;
        loop {
            let outcome = {
                let _permit = self.limiter.acquire(self.clock.as_ref());
                self.transport.post(request)
            };
            let number = attempts.len() as u32 + 1;
            let message = match outcome {
                Ok(resp) if (200..300).contains(&resp.status) => {
                    attempts.push(Attempt {
                        number,
                        status: Some(resp.status),
                        error: None,
                    });
                    return Ok((resp, attempts));
                }
                Ok(resp) if !is_retryable_status(resp.status) => {
                    return Err(LlmError::Rejected {
                        status: resp.status,
                        body: resp.body,
                    });
                }
                Ok(resp) => {
                    attempts.push(Attempt {
                        number,
                        status: Some(resp.status),
                        error: None,
                    });
                    format!("HTTP {}", resp.status)
                }
                Err(e) => {
                    attempts.push(Attempt {
                        number,
                        status: None,
                        error: Some(e.clone()),
                    });
                    e
                }
            };
            if retry >= self.policy.max_retries {
                return Err(LlmError::Transport { message, attempts });
            }
            let delay = {
                let mut rng = self.rng.lock().unwrap();
                self.policy.delay(retry, &mut rng)
            };
            self.clock.sleep(delay);
            retry += 1;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl ChatRequest {
    pub fn user(model: &str, prompt: &str) -> Self {
        Self {
            model: model.to_string(),
            messages: vec![ChatMessage {
                role: Role::User,
                content: prompt.to_string(),
            }],
            temperature: 0.0,
            max_tokens: 1024,
        }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if self.messages.is_empty() {
            return Err(LlmError::Request("at least one message is required".into()));
        }
        if self.messages.iter().any(|m| m.content.is_empty()) {
            return Err(LlmError::Request("message content must be non-empty".into()));
        }
        if !(self.temperature >= 0.0) {
            return Err(LlmError::Request("temperature must be >= 0".into()));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON encoding; keys replay cassettes.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("request serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    /// Content of the last user message.
    pub fn prompt(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map_or("", |m| m.content.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub attempts: u32,
}

/// Anything that turns a chat request into text.
pub trait TextGenerator: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<Completion, LlmError>;
    fn model_name(&self) -> &str;

    /// A single-user-message request in this generator's configuration.
    fn request(&self, prompt: &str) -> ChatRequest {
        ChatRequest::user(self.model_name(), prompt)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClientMode {
    Live,
    Mock,
    RecordReplay,
}

impl std::str::FromStr for ClientMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "live" => Ok(Self::Live),
            "mock" => Ok(Self::Mock),
            "record-replay" | "replay" => Ok(Self::RecordReplay),
            other => Err(format!("unknown client mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientConfig {
    pub endpoint: Option<String>,
    pub api_key: Option<String>,
    pub model: String,
    pub timeout: Duration,
    pub max_retries: u32,
    pub max_in_flight: usize,
    pub requests_per_second: Option<f64>,
    pub mode: ClientMode,
    pub cassette: Option<PathBuf>,
    pub mock_fixtures: Option<PathBuf>,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            endpoint: None,
            api_key: None,
            model: "gpt-4-turbo".into(),
            timeout: Duration::from_secs(30),
            max_retries: 2,
            max_in_flight: 4,
            requests_per_second: None,
            mode: ClientMode::Mock,
            cassette: None,
            mock_fixtures: None,
            temperature: 0.0,
            max_tokens: 1024,
        }
    }
}

impl ClientConfig {
    /// Fills endpoint, key and model from `LMX_LLM_URL`, `LMX_API_KEY`, `LMX_LLM_MODEL`.
    pub fn with_env(mut self) -> Self {
        if let Ok(url) = std::env::var(ENV_URL) {
            self.endpoint.get_or_insert(url);
        }
        if let Ok(key) = std::env::var(ENV_API_KEY) {
            self.api_key.get_or_insert(key);
        }
        if let Ok(model) = std::env::var(ENV_MODEL) {
            self.model = model;
        }
        self
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if self.timeout.is_zero() {
            return Err(LlmError::Config("timeout must be > 0".into()));
        }
        if self.mode == ClientMode::Live && self.endpoint.is_none() {
            return Err(LlmError::Config(format!("live mode requires {ENV_URL}")));
        }
        if self.mode == ClientMode::RecordReplay && self.cassette.is_none() {
            return Err(LlmError::Config("record-replay mode requires a cassette path".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CassetteEntry {
    pub request_hash: String,
    pub response_text: String,
}

/// JSON-lines store of recorded responses keyed by request hash.
#[derive(Debug, Default)]
pub struct Cassette {
    path: Option<PathBuf>,
    entries: BTreeMap<String, String>,
}

impl Cassette {
    pub fn open(path: &Path) -> Result<Self, LlmError> {
        let err = |message: String| LlmError::Cassette {
            path: path.display().to_string(),
            message,
        };
        let mut entries = BTreeMap::new();
        if path.exists() {
            let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let entry: CassetteEntry = serde_json::from_str(line)
                    .map_err(|e| err(format!("line {}: {e}", i + 1)))?;
                entries.insert(entry.request_hash, entry.response_text);
            }
        }
        Ok(Self {
            path: Some(path.to_path_buf()),
            entries,
        })
    }

    pub fn get(&self, hash: &str) -> Option<&str> {
        self.entries.get(hash).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn record(&mut self, hash: &str, text: &str) -> Result<(), LlmError> {
        self.entries.insert(hash.to_string(), text.to_string());
        if let Some(path) = &self.path {
            let line = serde_json::to_string(&CassetteEntry {
                request_hash: hash.to_string(),
                response_text: text.to_string(),
            })
            .expect("entry serializes");
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| LlmError::Cassette {
                    path: path.display().to_string(),
                    message: e.to_string(),
                })?;
            writeln!(f, "{line}").map_err(|e| LlmError::Cassette {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockFixture {
    pub prompt: String,
    pub response: String,
}

/// Canned responses keyed by prompt text.
#[derive(Debug, Clone, Default)]
pub struct MockResponder {
    fixtures: HashMap<String, String>,
}

impl MockResponder {
    pub fn new(fixtures: impl IntoIterator<Item = (String, String)>) -> Self {
        Self {
            fixtures: fixtures.into_iter().collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, LlmError> {
        let text = fs::read_to_string(path).map_err(|e| LlmError::Cassette {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let mut fixtures = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let f: MockFixture = serde_json::from_str(line).map_err(|e| LlmError::Cassette {
                path: path.display().to_string(),
                message: format!("line {}: {e}", i + 1),
            })?;
            fixtures.insert(f.prompt, f.response);
        }
        Ok(Self { fixtures })
    }

    /// Unknown prompts get a deterministic placeholder derived from the request hash.
    pub fn respond(&self, request: &ChatRequest) -> String {
        match self.fixtures.get(request.prompt()) {
            Some(text) => text.clone(),
            None => format!("[mock completion {}]", &request.hash()[..16]),
        }
    }
}

#[derive(Debug, Deserialize)]
struct ChatResponseBody {
    choices: Vec<ChatChoice>,
}

#[derive(Debug, Deserialize)]
struct ChatChoice {
    message: ChatChoiceMessage,
}

#[derive(Debug, Deserialize)]
struct ChatChoiceMessage {
    content: Option<String>,
}

pub fn parse_chat_response(body: &str) -> Result<String, LlmError> {
    let parsed: ChatResponseBody =
        serde_json::from_str(body).map_err(|e| LlmError::Protocol(e.to_string()))?;
    parsed
        .choices
        .into_iter()
        .next()
        .and_then(|c| c.message.content)
        .ok_or_else(|| LlmError::Protocol("response has no choices[0].message.content".into()))
}

pub struct ChatClient {
    config: ClientConfig,
    executor: Executor,
    mock: MockResponder,
    cassette: Option<Mutex<Cassette>>,
}

impl ChatClient {
    pub fn new(config: ClientConfig) -> Result<Self, LlmError> {
        let transport: Arc<dyn Transport> = Arc::new(ReqwestTransport::new()?);
        Self::with_parts(config, transport, Arc::new(SystemClock))
    }

    pub fn with_parts(
        config: ClientConfig,
        transport: Arc<dyn Transport>,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, LlmError> {
        config.validate()?;
        let mock = match &config.mock_fixtures {
            Some(p) => MockResponder::load(p)?,
            None => MockResponder::default(),
        };
        let cassette = match (&config.mode, &config.cassette) {
            (ClientMode::RecordReplay, Some(p)) => Some(Mutex::new(Cassette::open(p)?)),
            _ => None,
        };
        let policy = RetryPolicy {
            max_retries: config.max_retries,
            ..RetryPolicy::default()
        };
        let limiter = Limiter::new(config.max_in_flight, config.requests_per_second);
        Ok(Self {
            executor: Executor::new(transport, clock, policy, limiter, 0x5eed),
            config,
            mock,
            cassette,
        })
    }

    pub fn with_mock(mut self, mock: MockResponder) -> Self {
        self.mock = mock;
        self
    }

    pub fn config(&self) -> &ClientConfig {
        &self.config
    }

    fn live(&self, request: &ChatRequest) -> Result<Completion, LlmError> {
        let endpoint = self
            .config
            .endpoint
            .as_ref()
            .ok_or_else(|| LlmError::Config(format!("live call requires {ENV_URL}")))?;
        let mut headers = Vec::new();
        if let Some(key) = &self.config.api_key {
            headers.push(("authorization".to_string(), format!("Bearer {key}")));
        }
        let http = HttpRequest {
            url: endpoint.clone(),
            headers,
            body: serde_json::to_string(request).expect("request serializes"),
            timeout: self.config.timeout,
        };
        let (resp, attempts) = self.executor.execute(&http)?;
        Ok(Completion {
            text: parse_chat_response(&resp.body)?,
            attempts: attempts.len() as u32,
        })
    }
}

impl TextGenerator for ChatClient {
    fn complete(&self, request: &ChatRequest) -> Result<Completion, LlmError> {
        request.validate()?;
        match self.config.mode {
            ClientMode::Mock => Ok(Completion {
                text: self.mock.respond(request),
                attempts: 0,
            }),
            ClientMode::Live => self.live(request),
            ClientMode::RecordReplay => {
                let hash = request.hash();
                let cassette = self.cassette.as_ref().expect("validated");
                if let Some(text) = cassette.lock().unwrap().get(&hash) {
                    return Ok(Completion {
                        text: text.to_string(),
                        attempts: 0,
                    });
                }
                if self.config.endpoint.is_none() {
                    return Err(LlmError::ReplayMiss(hash));
                }
                let completion = self.live(request)?;
                cassette.lock().unwrap().record(&hash, &completion.text)?;
                Ok(completion)
            }
        }
    }

    fn model_name(&self) -> &str {
        &self.config.model
    }

    fn request(&self, prompt: &str) -> ChatRequest {
        ChatRequest {
            temperature: self.config.temperature,
            max_tokens: self.config.max_tokens,
            ..ChatRequest::user(&self.config.model, prompt)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nominal_backoff_doubles_from_one_second() {
        let p = RetryPolicy::default();
        assert_eq!(p.nominal_delay(0), Duration::from_secs(1));
        assert_eq!(p.nominal_delay(1), Duration::from_secs(2));
        assert_eq!(p.nominal_delay(3), Duration::from_secs(8));
    }

    #[test]
    fn retryable_statuses() {
        assert!(is_retryable_status(429));
        assert!(is_retryable_status(503));
        assert!(!is_retryable_status(400));
        assert!(!is_retryable_status(404));
    }

    #[test]
    fn request_hash_is_stable_and_content_sensitive() {
        let a = ChatRequest::user("m", "hello");
        let b = ChatRequest::user("m", "hello");
        let c = ChatRequest::user("m", "hello!");
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn empty_content_rejected() {
        let r = ChatRequest::user("m", "");
        assert!(matches!(r.validate(), Err(LlmError::Request(_))));
    }

    #[test]
    fn parse_response_shape() {
        let body = r#"{"choices":[{"message":{"role":"assistant","content":"hi"}}]}"#;
        assert_eq!(parse_chat_response(body).unwrap(), "hi");
        assert!(matches!(parse_chat_response("{}"), Err(LlmError::Protocol(_))));
        assert!(matches!(
            parse_chat_response(r#"{"choices":[]}"#),
            Err(LlmError::Protocol(_))
        ));
    }

    #[test]
    fn config_validation() {
        let live = ClientConfig {
            mode: ClientMode::Live,
            ..ClientConfig::default()
        };
        assert!(live.validate().is_err());
        let replay = ClientConfig {
            mode: ClientMode::RecordReplay,
            ..ClientConfig::default()
        };
        assert!(replay.validate().is_err());
        assert!(ClientConfig::default().validate().is_ok());
    }
}
