//! Provider-neutral chat-completion contract: request/response types, the
//! wire JSON shapes, deterministic mock clients, and a bounded-concurrency
//! batch submitter with retry and backoff.
//!
//! The HTTP transport lives in the CLI crate; this module owns the contract
//! so every prompt-producing module and the evaluator share one client trait.

use std::collections::VecDeque;
use std::fmt;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub content: String,
}

impl Turn {
    pub fn user(content: impl Into<String>) -> Self {
        Turn {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Turn {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
}

impl Default for SamplingParams {
    fn default() -> Self {
        SamplingParams {
            temperature: 0.7,
            top_p: 0.95,
            max_tokens: 256,
        }
    }
}

/// One chat-completion request: system message, alternating turns ending on
/// a user turn, sampling parameters, optional opaque image attachment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system: String,
    pub turns: Vec<Turn>,
    pub sampling: SamplingParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attachment: Option<String>,
}

impl ChatRequest {
    pub fn validate(&self) -> Result<(), ChatError> {
        let s = &self.sampling;
        if !(s.temperature > 0.0 && s.temperature <= 2.0) {
            return Err(ChatError::InvalidRequest(format!(
                "temperature {} outside (0, 2]",
                s.temperature
            )));
        }
        if !(s.top_p > 0.0 && s.top_p <= 1.0) {
            return Err(ChatError::InvalidRequest(format!(
                "top_p {} outside (0, 1]",
                s.top_p
            )));
        }
        if s.max_tokens == 0 {
            return Err(ChatError::InvalidRequest("max_tokens is zero".to_string()));
        }
        if self.turns.is_empty() {
            return Err(ChatError::InvalidRequest("no turns".to_string()));
        }
        for (idx, pair) in self.turns.windows(2).enumerate() {
            if pair[0].role == pair[1].role {
                return Err(ChatError::InvalidRequest(format!(
                    "turns {idx} and {} share role {:?}",
                    idx + 1,
                    pair[0].role
                )));
            }
        }
        if self.turns.last().map(|t| t.role) != Some(Role::User) {
            return Err(ChatError::InvalidRequest(
                "final turn must be a user turn".to_string(),
            ));
        }
        Ok(())
    }

    /// Stable content digest of the full request (hex SHA-256 of the wire
    /// body). Identical inputs always produce identical digests.
    pub fn digest(&self) -> String {
        let body = serde_json::to_vec(&WireRequest::from_request(self, "")).expect("serializable");
        hex_digest(&body)
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ChatError {
    /// Connection-level failure; retried by the batch submitter.
    Transport(String),
    /// Non-2xx response with the server's message; not retried.
    Service { status: u16, message: String },
    InvalidRequest(String),
    MissingCredential(String),
}

impl ChatError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, ChatError::Transport(_))
    }
}

impl fmt::Display for ChatError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChatError::Transport(msg) => write!(f, "transport error: {msg}"),
            ChatError::Service { status, message } => {
                write!(f, "service error {status}: {message}")
            }
            ChatError::InvalidRequest(msg) => write!(f, "invalid request: {msg}"),
            ChatError::MissingCredential(var) => {
                write!(f, "credential environment variable {var} is not set")
            }
        }
    }
}

impl std::error::Error for ChatError {}

/// Minimal chat-completion client. Implementations must be safe to share
/// across the batch submitter's worker threads.
pub trait ChatClient: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ChatError>;
    fn model_name(&self) -> &str;
}

/// Wire body sent to the HTTP endpoint.
#[derive(Debug, Serialize, Deserialize)]
pub struct WireRequest {
    pub model: String,
    pub messages: Vec<WireMessage>,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attachment: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct WireMessage {
    pub role: String,
    pub content: String,
}

impl WireRequest {
    pub fn from_request(req: &ChatRequest, model: &str) -> WireRequest {
        let mut messages = Vec::with_capacity(req.turns.len() + 1);
        if !req.system.is_empty() {
            messages.push(WireMessage {
                role: "system".to_string(),
                content: req.system.clone(),
            });
        }
        for t in &req.turns {
            messages.push(WireMessage {
                role: match t.role {
                    Role::User => "user".to_string(),
                    Role::Assistant => "assistant".to_string(),
                },
                content: t.content.clone(),
            });
        }
        WireRequest {
            model: model.to_string(),
            messages,
            temperature: req.sampling.temperature,
            top_p: req.sampling.top_p,
            max_tokens: req.sampling.max_tokens,
            attachment: req.attachment.clone(),
        }
    }
}

/// Successful response body: `{"text": "..."}`. Errors: `{"error": "..."}`.
#[derive(Debug, Serialize, Deserialize)]
pub struct WireResponse {
    pub text: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct WireError {
    pub error: String,
}

/// Deterministic offline client: replies with a fixed prefix plus the
/// request digest, so identical requests always get identical text.
#[derive(Debug, Clone)]
pub struct EchoClient {
    pub model: String,
}

impl Default for EchoClient {
    fn default() -> Self {
        EchoClient {
            model: "mock-echo".to_string(),
        }
    }
}

impl ChatClient for EchoClient {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ChatError> {
        request.validate()?;
        Ok(ChatResponse {
            text: format!("mock response {}", &request.digest()[..12]),
        })
    }

    fn model_name(&self) -> &str {
        &self.model
    }
}

/// Scripted client driven by a caller-supplied closure; used by tests and
/// the benchmark harness fixtures.
pub struct ScriptedClient<F> {
    pub model: String,
    script: F,
}

impl<F> ScriptedClient<F>
where
    F: Fn(&ChatRequest) -> Result<ChatResponse, ChatError> + Send + Sync,
{
    pub fn new(model: impl Into<String>, script: F) -> Self {
        ScriptedClient {
            model: model.into(),
            script,
        }
    }
}

impl<F> ChatClient for ScriptedClient<F>
where
    F: Fn(&ChatRequest) -> Result<ChatResponse, ChatError> + Send + Sync,
{
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ChatError> {
        (self.script)(request)
    }

    fn model_name(&self) -> &str {
        &self.model
    }
}

/// Batch submission policy: worker count, retry budget, backoff base.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BatchPolicy {
    pub concurrency: usize,
    pub retries: u32,
    pub backoff_base_ms: u64,
}

impl Default for BatchPolicy {
    fn default() -> Self {
        BatchPolicy {
            concurrency: 4,
            retries: 2,
            backoff_base_ms: 250,
        }
    }
}

impl BatchPolicy {
    fn backoff(&self, attempt: u32) -> Duration {
        let exp = attempt.min(16);
        Duration::from_millis(self.backoff_base_ms.saturating_mul(1u64 << exp))
    }
}

/// A completed request with its trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseTrace {
    pub text: String,
    pub request_digest: String,
    pub model: String,
    pub latency_ms: u64,
    pub attempts: u32,
}

/// A request that exhausted its retry budget or hit a terminal error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchFailure {
    pub request_digest: String,
    pub attempts: u32,
    pub error: String,
}

pub type BatchResult = Result<ResponseTrace, BatchFailure>;

/// Submit requests through a bounded worker pool. Output order always
/// matches input order, whatever the completion interleaving. Transport
/// errors are retried with exponential backoff up to `policy.retries` extra
/// attempts; terminal errors are recorded immediately.
pub fn submit_batch(
    client: &dyn ChatClient,
    requests: &[ChatRequest],
    policy: &BatchPolicy,
) -> Vec<BatchResult> {
    let n = requests.len();
    if n == 0 {
        return Vec::new();
    }
    let queue: Mutex<VecDeque<usize>> = Mutex::new((0..n).collect());
    let slots: Vec<Mutex<Option<BatchResult>>> = (0..n).map(|_| Mutex::new(None)).collect();
    let workers = policy.concurrency.max(1).min(n);

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let idx = match queue.lock().unwrap().pop_front() {
                    Some(i) => i,
                    None => break,
                };
                let result = run_one(client, &requests[idx], policy);
                *slots[idx].lock().unwrap() = Some(result);
            });
        }
    });

    slots
        .into_iter()
        .map(|slot| slot.into_inner().unwrap().expect("every slot filled"))
        .collect()
}

fn run_one(client: &dyn ChatClient, request: &ChatRequest, policy: &BatchPolicy) -> BatchResult {
    let digest = request.digest();
    let started = Instant::now();
    let mut attempts = 0;
    loop {
        attempts += 1;
        match client.complete(request) {
            Ok(resp) => {
                log::debug!("request {digest}: ok after {attempts} attempt(s)");
                return Ok(ResponseTrace {
                    text: resp.text,
                    request_digest: digest,
                    model: client.model_name().to_string(),
                    latency_ms: started.elapsed().as_millis() as u64,
                    attempts,
                });
            }
            Err(err) if err.is_retryable() && attempts <= policy.retries => {
                log::debug!("request {digest}: attempt {attempts} failed: {err}");
                std::thread::sleep(policy.backoff(attempts - 1));
            }
            Err(err) => {
                log::warn!("request {digest}: giving up after {attempts} attempt(s): {err}");
                return Err(BatchFailure {
                    request_digest: digest,
                    attempts,
                    error: err.to_string(),
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicU32, Ordering};

    fn request(text: &str) -> ChatRequest {
        ChatRequest {
            system: "sys".to_string(),
            turns: vec![Turn::user(text)],
            sampling: SamplingParams::default(),
            attachment: None,
        }
    }

    #[test]
    fn default_sampling_matches_reference_values() {
        let s = SamplingParams::default();
        assert_eq!(s.temperature, 0.7);
        assert_eq!(s.top_p, 0.95);
    }

    #[test]
    fn validation_rejects_bad_shapes() {
        let mut r = request("hi");
        r.sampling.temperature = 0.0;
        assert!(r.validate().is_err());

        let mut r = request("hi");
        r.sampling.top_p = 1.5;
        assert!(r.validate().is_err());

        let mut r = request("hi");
        r.turns.push(Turn::user("again"));
        assert!(r.validate().is_err(), "consecutive user turns");

        let mut r = request("hi");
        r.turns.push(Turn::assistant("reply"));
        assert!(r.validate().is_err(), "must end on user");
    }

    #[test]
    fn digest_is_pure() {
        let a = request("same");
        let b = request("same");
        assert_eq!(a.digest(), b.digest());
        assert_ne!(a.digest(), request("different").digest());
    }

    #[test]
    fn empty_system_omitted_from_wire() {
        let mut r = request("hi");
        r.system = String::new();
        let wire = WireRequest::from_request(&r, "m");
        assert_eq!(wire.messages.len(), 1);
        assert_eq!(wire.messages[0].role, "user");
    }

    #[test]
    fn batch_preserves_order_under_random_latency() {
        use rand::{Rng, SeedableRng};
        let jitter = Mutex::new(rand_chacha::ChaCha8Rng::seed_from_u64(3));
        let client = ScriptedClient::new("m", move |req: &ChatRequest| {
            let ms = jitter.lock().unwrap().gen_range(0..5);
            std::thread::sleep(Duration::from_millis(ms));
            Ok(ChatResponse {
                text: format!("echo {}", req.turns[0].content),
            })
        });
        let requests: Vec<ChatRequest> = (0..20).map(|i| request(&format!("{i}"))).collect();
        let results = submit_batch(&client, &requests, &BatchPolicy::default());
        for (i, r) in results.iter().enumerate() {
            assert_eq!(r.as_ref().unwrap().text, format!("echo {i}"));
        }
    }

    #[test]
    fn transient_failure_then_success() {
        let calls = AtomicU32::new(0);
        let client = ScriptedClient::new("m", move |_: &ChatRequest| {
            if calls.fetch_add(1, Ordering::SeqCst) == 0 {
                Err(ChatError::Transport("first attempt fails".to_string()))
            } else {
                Ok(ChatResponse {
                    text: "ok".to_string(),
                })
            }
        });
        let policy = BatchPolicy {
            concurrency: 1,
            retries: 2,
            backoff_base_ms: 1,
        };
        let results = submit_batch(&client, &[request("x")], &policy);
        let trace = results[0].as_ref().unwrap();
        assert_eq!(trace.attempts, 2);
    }

    #[test]
    fn exhausted_retries_record_attempts() {
        let client = ScriptedClient::new("m", |_: &ChatRequest| {
            Err(ChatError::Transport("down".to_string()))
        });
        let policy = BatchPolicy {
            concurrency: 1,
            retries: 2,
            backoff_base_ms: 1,
        };
        let results = submit_batch(&client, &[request("x")], &policy);
        let failure = results[0].as_ref().unwrap_err();
        assert_eq!(failure.attempts, 3);
    }

    #[test]
    fn service_errors_are_terminal() {
        let calls = AtomicU32::new(0);
        let client = ScriptedClient::new("m", move |_: &ChatRequest| {
            calls.fetch_add(1, Ordering::SeqCst);
            Err(ChatError::Service {
                status: 400,
                message: "bad prompt".to_string(),
            })
        });
        let policy = BatchPolicy {
            concurrency: 1,
            retries: 5,
            backoff_base_ms: 1,
        };
        let results = submit_batch(&client, &[request("x")], &policy);
        let failure = results[0].as_ref().unwrap_err();
        assert_eq!(failure.attempts, 1);
        assert!(failure.error.contains("bad prompt"));
    }

    #[test]
    fn echo_client_is_deterministic() {
        let client = EchoClient::default();
        let a = client.complete(&request("x")).unwrap();
        let b = client.complete(&request("x")).unwrap();
        assert_eq!(a, b);
    }
}
