//! Text-generation backends behind one interface: an external
//! chat-completion HTTP client with retry, rate limiting and audit logging,
//! plus deterministic mocks for hermetic runs.

use std::io::Write;
use std::path::PathBuf;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::retrieval::PromptBundle;

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error("api key environment variable `{0}` is not set")]
    MissingApiKey(String),
    #[error("transport failure after {attempts} attempts: {message}")]
    Transport { attempts: usize, message: String },
    #[error("malformed completion response: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

/// Decoding parameters. Defaults match the external teacher baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub model_id: String,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub top_p: f64,
    pub seed: Option<u64>,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            model_id: "gpt-4-0314".to_owned(),
            temperature: 1.0,
            max_new_tokens: 100,
            top_p: 1.0,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: usize,
    pub completion_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedResponse {
    pub text: String,
    pub finish_reason: FinishReason,
    pub usage: Usage,
}

/// Prompt accepted by every backend: a structured bundle or a bare string.
#[derive(Debug, Clone, Copy)]
pub enum PromptInput<'a> {
    Bundle(&'a PromptBundle),
    Text(&'a str),
}

impl PromptInput<'_> {
    pub fn flat_text(&self) -> String {
        match self {
            PromptInput::Bundle(b) => b.to_flat_string(),
            PromptInput::Text(t) => (*t).to_owned(),
        }
    }
}

/// One message of the chat-completion wire format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

/// Chat-message form of a prompt: the bundle's system text as the system
/// role, exemplars plus query as the user role.
pub fn chat_messages(prompt: &PromptInput) -> Vec<ChatMessage> {
    match prompt {
        PromptInput::Bundle(bundle) => vec![
            ChatMessage { role: "system".to_owned(), content: bundle.system_text.clone() },
            ChatMessage { role: "user".to_owned(), content: bundle.user_message() },
        ],
        PromptInput::Text(text) => {
            vec![ChatMessage { role: "user".to_owned(), content: (*text).to_owned() }]
        }
    }
}

/// Uniform generation interface. Local backends keep internal state, so
/// instances must not be shared across concurrent generation calls.
pub trait TextGenerator {
    fn generate(
        &mut self,
        prompt: PromptInput<'_>,
        params: &GenerationParams,
    ) -> Result<GeneratedResponse, GenerationError>;
}

/// Generate one response from the backend for an assembled prompt bundle.
pub fn generate_response<B: TextGenerator>(
    backend: &mut B,
    prompt: &PromptBundle,
    params: &GenerationParams,
) -> Result<GeneratedResponse, GenerationError> {
    backend.generate(PromptInput::Bundle(prompt), params)
}

fn whitespace_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Mock backend: echoes the last line of the query conversation.
#[derive(Debug, Clone, Copy, Default)]
pub struct EchoBackend;

impl TextGenerator for EchoBackend {
    fn generate(
        &mut self,
        prompt: PromptInput<'_>,
        _params: &GenerationParams,
    ) -> Result<GeneratedResponse, GenerationError> {
        let source = match prompt {
            PromptInput::Bundle(b) => b.query_conversation.clone(),
            PromptInput::Text(t) => t.to_owned(),
        };
        let text = source.lines().last().unwrap_or("").to_owned();
        Ok(GeneratedResponse {
            finish_reason: if text.is_empty() { FinishReason::Error } else { FinishReason::Stop },
            usage: Usage {
                prompt_tokens: whitespace_count(&source),
                completion_tokens: whitespace_count(&text),
            },
            text,
        })
    }
}

/// Mock backend replaying canned responses in order (cycling); output is
/// truncated to `max_new_tokens` whitespace tokens.
#[derive(Debug, Clone)]
pub struct CannedBackend {
    responses: Vec<String>,
    cursor: usize,
}

impl CannedBackend {
    pub fn new(responses: Vec<String>) -> Self {
        Self { responses, cursor: 0 }
    }
}

impl TextGenerator for CannedBackend {
    fn generate(
        &mut self,
        prompt: PromptInput<'_>,
        params: &GenerationParams,
    ) -> Result<GeneratedResponse, GenerationError> {
        let canned = if self.responses.is_empty() {
            String::new()
        } else {
            let r = self.responses[self.cursor % self.responses.len()].clone();
            self.cursor += 1;
            r
        };
        let tokens: Vec<&str> = canned.split_whitespace().collect();
        let (text, finish_reason) = if tokens.is_empty() {
            (String::new(), FinishReason::Error)
        } else if tokens.len() > params.max_new_tokens {
            (tokens[..params.max_new_tokens].join(" "), FinishReason::Length)
        } else {
            (canned.clone(), FinishReason::Stop)
        };
        Ok(GeneratedResponse {
            usage: Usage {
                prompt_tokens: whitespace_count(&prompt.flat_text()),
                completion_tokens: whitespace_count(&text),
            },
            text,
            finish_reason,
        })
    }
}

/// Transport outcome classification for retry decisions.
#[derive(Debug, Error)]
pub enum TransportError {
    /// Worth retrying: network failures, 429, 5xx.
    #[error("retryable: {0}")]
    Retryable(String),
    /// Not worth retrying: auth errors, bad requests.
    #[error("fatal: {0}")]
    Fatal(String),
}

/// Minimal HTTP POST-JSON surface, so the client is testable without a
/// network.
pub trait HttpTransport {
    fn post_json(
        &mut self,
        url: &str,
        api_key: &str,
        body: &serde_json::Value,
    ) -> Result<serde_json::Value, TransportError>;
}

/// Production transport over ureq.
#[derive(Debug, Default)]
pub struct UreqTransport;

impl HttpTransport for UreqTransport {
    fn post_json(
        &mut self,
        url: &str,
        api_key: &str,
        body: &serde_json::Value,
    ) -> Result<serde_json::Value, TransportError> {
        let response = ureq::post(url)
            .set("Authorization", &format!("Bearer {api_key}"))
            .set("Content-Type", "application/json")
            .send_json(body.clone());
        match response {
            Ok(resp) => resp
                .into_json::<serde_json::Value>()
                .map_err(|e| TransportError::Fatal(format!("invalid JSON body: {e}"))),
            Err(ureq::Error::Status(code, resp)) => {
                let text = resp.into_string().unwrap_or_default();
                let message = format!("HTTP {code}: {text}");
                if code == 429 || code >= 500 {
                    Err(TransportError::Retryable(message))
                } else {
                    Err(TransportError::Fatal(message))
                }
            }
            Err(e) => Err(TransportError::Retryable(e.to_string())),
        }
    }
}

/// Exponential backoff schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: usize,
    pub initial_backoff_ms: u64,
    pub backoff_factor: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_retries: 3, initial_backoff_ms: 500, backoff_factor: 2.0 }
    }
}

impl RetryPolicy {
    /// Delay before retry number `attempt` (0-based).
    pub fn delay(&self, attempt: usize) -> Duration {
        let ms = self.initial_backoff_ms as f64 * self.backoff_factor.powi(attempt as i32);
        Duration::from_millis(ms as u64)
    }
}

/// Token bucket limiting requests per minute.
#[derive(Debug)]
pub struct TokenBucket {
    capacity: f64,
    tokens: f64,
    refill_per_sec: f64,
    last: Instant,
}

impl TokenBucket {
    pub fn per_minute(requests: u32) -> Self {
        let capacity = requests as f64;
        Self { capacity, tokens: capacity, refill_per_sec: capacity / 60.0, last: Instant::now() }
    }

    fn refill(&mut self, now: Instant) {
        let elapsed = now.duration_since(self.last).as_secs_f64();
        self.tokens = (self.tokens + elapsed * self.refill_per_sec).min(self.capacity);
        self.last = now;
    }

    /// Time to wait before a token is available at `now`; takes the token.
    fn take_at(&mut self, now: Instant) -> Duration {
        self.refill(now);
        if self.tokens >= 1.0 {
            self.tokens -= 1.0;
            Duration::ZERO
        } else {
            let deficit = 1.0 - self.tokens;
            self.tokens = 0.0;
            Duration::from_secs_f64(deficit / self.refill_per_sec)
        }
    }

    /// Block until a request slot is available.
    pub fn acquire(&mut self) {
        let wait = self.take_at(Instant::now());
        if !wait.is_zero() {
            std::thread::sleep(wait);
        }
    }
}

/// One audit record per logical request, regardless of retries.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditRecord {
    pub started_at_ms: u128,
    pub finished_at_ms: u128,
    pub attempts: usize,
    pub request: serde_json::Value,
    pub outcome: String,
    pub response_text: Option<String>,
    pub error: Option<String>,
}

/// Append-only JSON-lines audit log.
#[derive(Debug, Clone)]
pub struct AuditLog {
    path: PathBuf,
}

impl AuditLog {
    pub fn new(path: PathBuf) -> Self {
        Self { path }
    }

    pub fn append(&self, record: &AuditRecord) -> Result<(), GenerationError> {
        let mut file =
            std::fs::OpenOptions::new().create(true).append(true).open(&self.path)?;
        writeln!(file, "{}", serde_json::to_string(record)?)?;
        Ok(())
    }
}

/// Settings for the external chat-completion client.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatClientConfig {
    pub endpoint: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub retry: RetryPolicy,
    pub requests_per_minute: Option<u32>,
}

impl Default for ChatClientConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1/chat/completions".to_owned(),
            api_key_env: "TEACHBENCH_API_KEY".to_owned(),
            retry: RetryPolicy::default(),
            requests_per_minute: Some(60),
        }
    }
}

/// Serialized chat-completion request body for a prompt and parameters.
pub fn build_request_body(prompt: &PromptInput, params: &GenerationParams) -> serde_json::Value {
    json!({
        "model": params.model_id,
        "messages": chat_messages(prompt),
        "temperature": params.temperature,
        "max_tokens": params.max_new_tokens,
        "top_p": params.top_p,
    })
}

/// External chat-completion client: token-bucket rate limiting, exponential
/// backoff on retryable failures and a single audit record per logical
/// request.
pub struct ChatCompletionClient<T: HttpTransport> {
    config: ChatClientConfig,
    transport: T,
    bucket: Option<TokenBucket>,
    audit: Option<AuditLog>,
    api_key: String,
}

impl<T: HttpTransport> ChatCompletionClient<T> {
    pub fn new(config: ChatClientConfig, transport: T) -> Result<Self, GenerationError> {
        let api_key = std::env::var(&config.api_key_env)
            .map_err(|_| GenerationError::MissingApiKey(config.api_key_env.clone()))?;
        Ok(Self::with_api_key(config, transport, api_key))
    }

    /// Construct with an explicit key; used by tests and mock transports.
    pub fn with_api_key(config: ChatClientConfig, transport: T, api_key: String) -> Self {
        let bucket = config.requests_per_minute.map(TokenBucket::per_minute);
        Self { config, transport, bucket, audit: None, api_key }
    }

    pub fn with_audit_log(mut self, log: AuditLog) -> Self {
        self.audit = Some(log);
        self
    }

    fn now_ms() -> u128 {
        SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
    }

    fn parse_response(value: &serde_json::Value) -> Result<GeneratedResponse, GenerationError> {
        let choice = value
            .get("choices")
            .and_then(|c| c.get(0))
            .ok_or_else(|| GenerationError::Malformed("no choices".to_owned()))?;
        let text = choice
            .pointer("/message/content")
            .and_then(|v| v.as_str())
            .unwrap_or_default()
            .to_owned();
        let finish_reason = match choice.get("finish_reason").and_then(|v| v.as_str()) {
            _ if text.is_empty() => FinishReason::Error,
            Some("length") => FinishReason::Length,
            Some("stop") | None => FinishReason::Stop,
            Some(_) => FinishReason::Error,
        };
        let usage = Usage {
            prompt_tokens: value
                .pointer("/usage/prompt_tokens")
                .and_then(|v| v.as_u64())
                .unwrap_or(0) as usize,
            completion_tokens: value
                .pointer("/usage/completion_tokens")
                .and_then(|v| v.as_u64())
                .unwrap_or(0) as usize,
        };
        Ok(GeneratedResponse { text, finish_reason, usage })
    }
}

impl<T: HttpTransport> TextGenerator for ChatCompletionClient<T> {
    fn generate(
        &mut self,
        prompt: PromptInput<'_>,
        params: &GenerationParams,
    ) -> Result<GeneratedResponse, GenerationError> {
        if let Some(bucket) = self.bucket.as_mut() {
            bucket.acquire();
        }
        let body = build_request_body(&prompt, params);
        let started_at_ms = Self::now_ms();
        let mut attempts = 0usize;
        let outcome = loop {
            attempts += 1;
            match self.transport.post_json(&self.config.endpoint, &self.api_key, &body) {
                Ok(value) => break Ok(value),
                Err(TransportError::Retryable(message)) => {
                    if attempts > self.config.retry.max_retries {
                        break Err(message);
                    }
                    let delay = self.config.retry.delay(attempts - 1);
                    tracing::warn!(attempts, ?delay, message, "retrying chat completion");
                    std::thread::sleep(delay);
                }
                Err(TransportError::Fatal(message)) => break Err(message),
            }
        };

        let result = match &outcome {
            Ok(value) => Self::parse_response(value),
            Err(message) => {
                Err(GenerationError::Transport { attempts, message: message.clone() })
            }
        };

        if let Some(audit) = &self.audit {
            let record = AuditRecord {
                started_at_ms,
                finished_at_ms: Self::now_ms(),
                attempts,
                request: body,
                outcome: if result.is_ok() { "ok".to_owned() } else { "error".to_owned() },
                response_text: result.as_ref().ok().map(|r| r.text.clone()),
                error: outcome.err(),
            };
            audit.append(&record)?;
        }
        result
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::{build_fewshot_prompt, SYSTEM_PROMPT};
    use crate::corpus::{DialogueSample, Utterance};

    fn query() -> DialogueSample {
        DialogueSample {
            id: "q".to_owned(),
            context: vec![
                Utterance::new("student", "first line here"),
                Utterance::new("student", "last line here"),
            ],
            response: None,
        }
    }

    #[test]
    fn echo_returns_last_query_line() {
        let bundle = build_fewshot_prompt(&query(), &[], SYSTEM_PROMPT);
        let mut backend = EchoBackend;
        let out = backend
            .generate(PromptInput::Bundle(&bundle), &GenerationParams::default())
            .unwrap();
        assert_eq!(out.text, "[student] last line here");
        assert_eq!(out.finish_reason, FinishReason::Stop);
    }

    #[test]
    fn canned_truncates_to_token_budget() {
        let long = (0..150).map(|i| format!("t{i}")).collect::<Vec<_>>().join(" ");
        let mut backend = CannedBackend::new(vec![long]);
        let params = GenerationParams { max_new_tokens: 100, ..GenerationParams::default() };
        let out = backend.generate(PromptInput::Text("prompt"), &params).unwrap();
        assert_eq!(out.finish_reason, FinishReason::Length);
        assert_eq!(out.text.split_whitespace().count(), 100);
        assert_eq!(out.usage.completion_tokens, 100);
    }

    #[test]
    fn empty_canned_output_is_an_error_finish() {
        let mut backend = CannedBackend::new(vec![String::new()]);
        let out = backend
            .generate(PromptInput::Text("prompt"), &GenerationParams::default())
            .unwrap();
        assert_eq!(out.finish_reason, FinishReason::Error);
    }

    #[test]
    fn request_body_carries_baseline_defaults() {
        let bundle = build_fewshot_prompt(&query(), &[], SYSTEM_PROMPT);
        let body =
            build_request_body(&PromptInput::Bundle(&bundle), &GenerationParams::default());
        assert_eq!(body["model"], "gpt-4-0314");
        assert_eq!(body["temperature"], 1.0);
        assert_eq!(body["max_tokens"], 100);
        assert_eq!(body["top_p"], 1.0);
        assert_eq!(body["messages"][0]["role"], "system");
        assert_eq!(body["messages"][0]["content"], SYSTEM_PROMPT);
        assert_eq!(body["messages"][1]["role"], "user");
    }

    struct FlakyTransport {
        failures_left: usize,
    }

    impl HttpTransport for FlakyTransport {
        fn post_json(
            &mut self,
            _url: &str,
            _api_key: &str,
            _body: &serde_json::Value,
        ) -> Result<serde_json::Value, TransportError> {
            if self.failures_left > 0 {
                self.failures_left -= 1;
                return Err(TransportError::Retryable("503".to_owned()));
            }
            Ok(serde_json::json!({
                "choices": [{"message": {"content": "fine, thanks"}, "finish_reason": "stop"}],
                "usage": {"prompt_tokens": 12, "completion_tokens": 2}
            }))
        }
    }

    fn fast_retry_config() -> ChatClientConfig {
        ChatClientConfig {
            retry: RetryPolicy { max_retries: 3, initial_backoff_ms: 1, backoff_factor: 2.0 },
            requests_per_minute: None,
            ..ChatClientConfig::default()
        }
    }

    #[test]
    fn retries_then_succeeds_with_single_audit_record() {
        let dir = tempfile::tempdir().unwrap();
        let audit_path = dir.path().join("audit.jsonl");
        let mut client = ChatCompletionClient::with_api_key(
            fast_retry_config(),
            FlakyTransport { failures_left: 2 },
            "test-key".to_owned(),
        )
        .with_audit_log(AuditLog::new(audit_path.clone()));
        let out = client
            .generate(PromptInput::Text("hello"), &GenerationParams::default())
            .unwrap();
        assert_eq!(out.text, "fine, thanks");
        let log = std::fs::read_to_string(audit_path).unwrap();
        assert_eq!(log.lines().count(), 1, "one logical request, one audit record");
        let record: AuditRecord = serde_json::from_str(log.lines().next().unwrap()).unwrap();
        assert_eq!(record.attempts, 3);
        assert_eq!(record.outcome, "ok");
    }

    #[test]
    fn exhausted_retries_surface_the_error() {
        let mut client = ChatCompletionClient::with_api_key(
            fast_retry_config(),
            FlakyTransport { failures_left: 10 },
            "test-key".to_owned(),
        );
        let err = client
            .generate(PromptInput::Text("hello"), &GenerationParams::default())
            .unwrap_err();
        match err {
            GenerationError::Transport { attempts, .. } => assert_eq!(attempts, 4),
            other => panic!("unexpected: {other}"),
        }
    }

    struct FatalTransport {
        calls: usize,
    }

    impl HttpTransport for FatalTransport {
        fn post_json(
            &mut self,
            _url: &str,
            _api_key: &str,
            _body: &serde_json::Value,
        ) -> Result<serde_json::Value, TransportError> {
            self.calls += 1;
            Err(TransportError::Fatal("401 unauthorized".to_owned()))
        }
    }

    #[test]
    fn fatal_errors_do_not_retry() {
        let mut client = ChatCompletionClient::with_api_key(
            fast_retry_config(),
            FatalTransport { calls: 0 },
            "bad-key".to_owned(),
        );
        let err = client
            .generate(PromptInput::Text("hello"), &GenerationParams::default())
            .unwrap_err();
        assert!(matches!(err, GenerationError::Transport { attempts: 1, .. }));
        assert_eq!(client.transport.calls, 1);
    }

    #[test]
    fn empty_completion_maps_to_error_finish() {
        let value = serde_json::json!({
            "choices": [{"message": {"content": ""}, "finish_reason": "stop"}]
        });
        let parsed =
            ChatCompletionClient::<FatalTransport>::parse_response(&value).unwrap();
        assert_eq!(parsed.finish_reason, FinishReason::Error);
    }

    #[test]
    fn backoff_delays_grow_exponentially() {
        let policy = RetryPolicy { max_retries: 4, initial_backoff_ms: 100, backoff_factor: 2.0 };
        assert_eq!(policy.delay(0), Duration::from_millis(100));
        assert_eq!(policy.delay(1), Duration::from_millis(200));
        assert_eq!(policy.delay(2), Duration::from_millis(400));
    }

    #[test]
    fn token_bucket_arithmetic() {
        let mut bucket = TokenBucket::per_minute(60); // one per second
        let t0 = Instant::now();
        for _ in 0..60 {
            assert_eq!(bucket.take_at(t0), Duration::ZERO);
        }
        // Bucket drained: the 61st request waits about a second.
        let wait = bucket.take_at(t0);
        assert!(wait > Duration::from_millis(900) && wait <= Duration::from_secs(1));
        // After a refill interval a token is free again.
        let t1 = t0 + Duration::from_secs(2);
        assert_eq!(bucket.take_at(t1), Duration::ZERO);
    }

    #[test]
    fn missing_api_key_is_reported() {
        let config = ChatClientConfig {
            api_key_env: "TEACHBENCH_TEST_KEY_THAT_DOES_NOT_EXIST".to_owned(),
            ..ChatClientConfig::default()
        };
        match ChatCompletionClient::new(config, UreqTransport) {
            Err(GenerationError::MissingApiKey(var)) => {
                assert_eq!(var, "TEACHBENCH_TEST_KEY_THAT_DOES_NOT_EXIST");
            }
            Err(other) => panic!("unexpected error: {other}"),
            Ok(_) => panic!("expected missing key error"),
        }
    }
}
