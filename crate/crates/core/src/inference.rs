//! Executes message scripts against a chat-completion backend.
//!
//! Two transports share one request path: an OpenAI-compatible HTTP
//! endpoint and the scripted [`MockScript`](crate::mock::MockScript)
//! backend. Requests are serialized once; the digest is taken over exactly
//! the bytes that go on the wire.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tokio::sync::Semaphore;

use crate::mock::MockScript;
use crate::model::{ChatMessage, Endpoint, ModelProfile};
use crate::prompt::TurnScript;
use crate::template::{Rendered, TemplateError, TemplateRegistry};

pub const DEFAULT_API_KEY_ENV: &str = "OPENAI_API_KEY";
pub const DEFAULT_MAX_INFLIGHT: usize = 4;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("request timed out")]
    Timeout,
    #[error("rate limited (HTTP 429)")]
    RateLimited,
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed response: {0}")]
    Protocol(String),
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted {
        attempts: u32,
        last: Box<InferenceError>,
    },
    #[error("reasoning truncated (finish_reason=length)")]
    ReasoningTruncated,
    #[error("no mock rule matched the request")]
    MockNoMatch,
    #[error("unknown mock script `{0}`")]
    UnknownMockScript(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("configuration: {0}")]
    Config(String),
}

impl InferenceError {
    /// Transport failures, timeouts and 429s are worth another attempt.
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            InferenceError::Transport(_) | InferenceError::Timeout | InferenceError::RateLimited
        )
    }

    /// Errors that will recur for every request of a cell (bad config,
    /// rejected requests), as opposed to per-request failures.
    pub fn is_fatal(&self) -> bool {
        match self {
            InferenceError::Http { status, .. } => (400..500).contains(status),
            InferenceError::UnknownMockScript(_)
            | InferenceError::Template(_)
            | InferenceError::Config(_) => true,
            InferenceError::RetriesExhausted { last, .. } => last.is_fatal(),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompletionResult {
    /// Assistant text exactly as returned.
    pub content: String,
    pub finish_reason: FinishReason,
    pub latency: Duration,
    pub request_digest: String,
    pub attempts: u32,
    /// Set when `finish_reason` is [`FinishReason::Error`].
    pub error: Option<String>,
}

impl CompletionResult {
    pub fn failed(request_digest: String, error: &InferenceError) -> Self {
        CompletionResult {
            content: String::new(),
            finish_reason: FinishReason::Error,
            latency: Duration::ZERO,
            request_digest,
            attempts: 0,
            error: Some(error.to_string()),
        }
    }

    pub fn is_error(&self) -> bool {
        self.finish_reason == FinishReason::Error
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChatRequestBody<'a> {
    pub model: &'a str,
    pub messages: &'a [ChatMessage],
    pub temperature: f64,
    pub seed: u64,
    pub max_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RawRequestBody<'a> {
    pub model: &'a str,
    pub prompt: &'a str,
    pub temperature: f64,
    pub seed: u64,
    pub max_tokens: u32,
}

/// A request ready to send: serialized body, its digest, and the text the
/// mock backend matches against.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreparedRequest {
    pub body: Vec<u8>,
    pub digest: String,
    pub match_text: String,
    pub seed: u64,
    pub structured: bool,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// `role: content` lines; the mock's view of a structured request.
pub fn transcript_text(messages: &[ChatMessage]) -> String {
    messages
        .iter()
        .map(|m| format!("{}: {}\n", m.role, m.content))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    /// Attempts after the first one.
    pub max_retries: u32,
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 3,
            initial_backoff: Duration::from_millis(500),
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (0-based): 500 ms, 1 s, 2 s, ...
    pub fn backoff(&self, retry: u32) -> Duration {
        self.initial_backoff
            .saturating_mul(2u32.saturating_pow(retry))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum SeedMode {
    /// Path `i` uses `seed + i`.
    #[default]
    Offset,
    /// Every path reuses the base seed.
    Identical,
}

impl SeedMode {
    pub fn path_seed(self, base: u64, path: u32) -> u64 {
        match self {
            SeedMode::Offset => base.wrapping_add(u64::from(path)),
            SeedMode::Identical => base,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TwoPhaseOutcome {
    pub reasoning: String,
    pub final_messages: Vec<ChatMessage>,
    pub phase_one: CompletionResult,
    pub result: CompletionResult,
    /// The model answered phase 1 with nothing; phase 2 still ran.
    pub empty_reasoning: bool,
}

/// One sampling path of a script.
#[derive(Debug)]
pub struct PathOutcome {
    pub seed: u64,
    pub result: CompletionResult,
    pub reasoning: Option<String>,
    pub empty_reasoning: bool,
    /// Digests of every request sent on this path, in order.
    pub request_digests: Vec<String>,
    /// Final message list the last request was rendered from.
    pub final_messages: Vec<ChatMessage>,
    pub error: Option<InferenceError>,
}

pub struct InferenceClientBuilder {
    templates: TemplateRegistry,
    mocks: HashMap<String, Arc<MockScript>>,
    max_inflight: usize,
    retry: RetryPolicy,
    api_key: Option<String>,
}

impl Default for InferenceClientBuilder {
    fn default() -> Self {
        InferenceClientBuilder {
            templates: TemplateRegistry::builtin(),
            mocks: HashMap::new(),
            max_inflight: DEFAULT_MAX_INFLIGHT,
            retry: RetryPolicy::default(),
            api_key: None,
        }
    }
}

impl InferenceClientBuilder {
    pub fn templates(mut self, templates: TemplateRegistry) -> Self {
        self.templates = templates;
        self
    }

    pub fn mock(mut self, id: impl Into<String>, script: MockScript) -> Self {
        self.mocks.insert(id.into(), Arc::new(script));
        self
    }

    pub fn max_inflight(mut self, n: usize) -> Self {
        self.max_inflight = n.max(1);
        self
    }

    pub fn retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn api_key(mut self, key: Option<String>) -> Self {
        self.api_key = key.filter(|k| !k.is_empty());
        self
    }

    /// Reads the bearer token from `var` if it is set.
    pub fn api_key_from_env(self, var: &str) -> Self {
        let key = std::env::var(var).ok();
        self.api_key(key)
    }

    pub fn build(self) -> Result<InferenceClient, InferenceError> {
        let http = reqwest::Client::builder()
            .build()
            .map_err(|e| InferenceError::Config(format!("http client: {e}")))?;
        Ok(InferenceClient {
            http,
            templates: Arc::new(self.templates),
            mocks: self.mocks,
            limiter: Arc::new(Semaphore::new(self.max_inflight)),
            max_inflight: self.max_inflight,
            retry: self.retry,
            api_key: self.api_key,
        })
    }
}

/// Shareable client; every request passes through one in-flight limiter.
#[derive(Clone)]
pub struct InferenceClient {
    http: reqwest::Client,
    templates: Arc<TemplateRegistry>,
    mocks: HashMap<String, Arc<MockScript>>,
    limiter: Arc<Semaphore>,
    max_inflight: usize,
    retry: RetryPolicy,
    api_key: Option<String>,
}

impl InferenceClient {
    pub fn builder() -> InferenceClientBuilder {
        InferenceClientBuilder::default()
    }

    pub fn templates(&self) -> &TemplateRegistry {
        &self.templates
    }

    pub fn max_inflight(&self) -> usize {
        self.max_inflight
    }

    /// Renders and serializes a request without sending it.
    pub fn prepare(
        &self,
        profile: &ModelProfile,
        messages: &[ChatMessage],
        seed: u64,
        max_tokens: u32,
    ) -> Result<PreparedRequest, InferenceError> {
        let temperature = profile.generation.temperature();
        let model = profile.model_name.as_str();
        let rendered = self.templates.render(&profile.template_id, messages)?;
        let (body, match_text, structured) = match &rendered {
            Rendered::Messages(msgs) => {
                let body = serde_json::to_vec(&ChatRequestBody {
                    model,
                    messages: msgs,
                    temperature,
                    seed,
                    max_tokens,
                })
                .map_err(|e| InferenceError::Config(e.to_string()))?;
                (body, transcript_text(msgs), true)
            }
            Rendered::Flat(prompt) => {
                let body = serde_json::to_vec(&RawRequestBody {
                    model,
                    prompt,
                    temperature,
                    seed,
                    max_tokens,
                })
                .map_err(|e| InferenceError::Config(e.to_string()))?;
                (body, prompt.clone(), false)
            }
        };
        Ok(PreparedRequest {
            digest: sha256_hex(&body),
            body,
            match_text,
            seed,
            structured,
        })
    }

    /// Single classification request with the profile's seed and token budget.
    pub async fn complete(
        &self,
        profile: &ModelProfile,
        messages: &[ChatMessage],
    ) -> Result<CompletionResult, InferenceError> {
        self.complete_with(
            profile,
            messages,
            profile.generation.seed(),
            profile.generation.max_tokens(),
        )
        .await
    }

    pub async fn complete_with(
        &self,
        profile: &ModelProfile,
        messages: &[ChatMessage],
        seed: u64,
        max_tokens: u32,
    ) -> Result<CompletionResult, InferenceError> {
        let request = self.prepare(profile, messages, seed, max_tokens)?;
        self.execute(profile, &request).await
    }

    /// Sends a prepared request, retrying retryable failures with
    /// exponential backoff.
    pub async fn execute(
        &self,
        profile: &ModelProfile,
        request: &PreparedRequest,
    ) -> Result<CompletionResult, InferenceError> {
        let mut retry = 0;
        loop {
            let outcome = {
                let _permit = self
                    .limiter
                    .acquire()
                    .await
                    .map_err(|e| InferenceError::Config(e.to_string()))?;
                self.send_once(profile, request).await
            };
            match outcome {
                Ok((content, finish_reason, latency)) => {
                    return Ok(CompletionResult {
                        content,
                        finish_reason,
                        latency,
                        request_digest: request.digest.clone(),
                        attempts: retry + 1,
                        error: None,
                    })
                }
                Err(e) if e.is_retryable() && retry < self.retry.max_retries => {
                    tracing::debug!(model = %profile.model_name, retry, "retrying: {e}");
                    tokio::time::sleep(self.retry.backoff(retry)).await;
                    retry += 1;
                }
                Err(e) if e.is_retryable() => {
                    return Err(InferenceError::RetriesExhausted {
                        attempts: retry + 1,
                        last: Box::new(e),
                    })
                }
                Err(e) => return Err(e),
            }
        }
    }

    async fn send_once(
        &self,
        profile: &ModelProfile,
        request: &PreparedRequest,
    ) -> Result<(String, FinishReason, Duration), InferenceError> {
        match &profile.endpoint {
            Endpoint::Mock(id) => {
                let script = self
                    .mocks
                    .get(id)
                    .ok_or_else(|| InferenceError::UnknownMockScript(id.clone()))?;
                let answer = script.answer(&request.match_text, request.seed)?;
                if !answer.latency.is_zero() {
                    tokio::time::sleep(answer.latency).await;
                }
                Ok((answer.content, answer.finish_reason, answer.latency))
            }
            Endpoint::Http(url) => self.send_http(url, profile, request).await,
        }
    }

    async fn send_http(
        &self,
        url: &url::Url,
        profile: &ModelProfile,
        request: &PreparedRequest,
    ) -> Result<(String, FinishReason, Duration), InferenceError> {
        let started = Instant::now();
        let mut builder = self
            .http
            .post(url.clone())
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .timeout(profile.generation.timeout())
            .body(request.body.clone());
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().await.map_err(classify_reqwest)?;
        let status = response.status();
        let text = response.text().await.map_err(classify_reqwest)?;
        let latency = started.elapsed();

        if status.as_u16() == 429 {
            return Err(InferenceError::RateLimited);
        }
        if !status.is_success() {
            return Err(InferenceError::Http {
                status: status.as_u16(),
                body: text,
            });
        }
        let (content, finish) = parse_completion(&text, request.structured)?;
        Ok((content, finish, latency))
    }

    /// Chain-of-thought protocol: phase 1 elicits reasoning, which is
    /// appended as an assistant turn before the phase-2 question.
    pub async fn run_two_phase(
        &self,
        profile: &ModelProfile,
        script: &TurnScript,
    ) -> Result<TwoPhaseOutcome, InferenceError> {
        self.run_two_phase_seeded(profile, script, profile.generation.seed())
            .await
    }

    pub async fn run_two_phase_seeded(
        &self,
        profile: &ModelProfile,
        script: &TurnScript,
        seed: u64,
    ) -> Result<TwoPhaseOutcome, InferenceError> {
        let follow_up = script
            .phase_two()
            .ok_or_else(|| InferenceError::Config("script has a single phase".into()))?;
        let phase_one = self
            .complete_with(
                profile,
                script.phase_one(),
                seed,
                profile.generation.reasoning_max_tokens(),
            )
            .await?;
        if phase_one.finish_reason == FinishReason::Length {
            return Err(InferenceError::ReasoningTruncated);
        }
        let reasoning = phase_one.content.clone();
        let mut final_messages = script.phase_one().to_vec();
        final_messages.push(ChatMessage::assistant(reasoning.as_str()));
        final_messages.push(follow_up.clone());
        let result = self
            .complete_with(profile, &final_messages, seed, profile.generation.max_tokens())
            .await?;
        Ok(TwoPhaseOutcome {
            empty_reasoning: reasoning.trim().is_empty(),
            reasoning,
            final_messages,
            phase_one,
            result,
        })
    }

    /// Runs one path of `script` at `seed`, never failing: errors become an
    /// error result carried in the outcome.
    pub async fn run_path(&self, profile: &ModelProfile, script: &TurnScript, seed: u64) -> PathOutcome {
        let max_tokens = if script.phases() == 2 {
            profile.generation.reasoning_max_tokens()
        } else {
            profile.generation.max_tokens()
        };
        let first = match self.prepare(profile, script.phase_one(), seed, max_tokens) {
            Ok(r) => r,
            Err(e) => return PathOutcome::failed(seed, String::new(), vec![], script.phase_one().to_vec(), e),
        };

        if script.phases() == 1 {
            return match self.execute(profile, &first).await {
                Ok(result) => PathOutcome {
                    seed,
                    request_digests: vec![result.request_digest.clone()],
                    result,
                    reasoning: None,
                    empty_reasoning: false,
                    final_messages: script.phase_one().to_vec(),
                    error: None,
                },
                Err(e) => PathOutcome::failed(
                    seed,
                    first.digest.clone(),
                    vec![first.digest],
                    script.phase_one().to_vec(),
                    e,
                ),
            };
        }

        match self.run_two_phase_seeded(profile, script, seed).await {
            Ok(two) => PathOutcome {
                seed,
                request_digests: vec![
                    two.phase_one.request_digest.clone(),
                    two.result.request_digest.clone(),
                ],
                reasoning: Some(two.reasoning),
                empty_reasoning: two.empty_reasoning,
                final_messages: two.final_messages,
                result: two.result,
                error: None,
            },
            Err(e) => PathOutcome::failed(
                seed,
                first.digest.clone(),
                vec![first.digest],
                script.phase_one().to_vec(),
                e,
            ),
        }
    }

    /// Executes `script` once per path, concurrently, returning outcomes in
    /// path order.
    pub async fn run_paths(
        &self,
        profile: &ModelProfile,
        script: &TurnScript,
        paths: u32,
        seeds: SeedMode,
    ) -> Vec<PathOutcome> {
        let base = profile.generation.seed();
        let runs = (0..paths.max(1)).map(|i| self.run_path(profile, script, seeds.path_seed(base, i)));
        futures::future::join_all(runs).await
    }
}

impl PathOutcome {
    fn failed(
        seed: u64,
        digest: String,
        request_digests: Vec<String>,
        final_messages: Vec<ChatMessage>,
        error: InferenceError,
    ) -> Self {
        PathOutcome {
            seed,
            result: CompletionResult::failed(digest, &error),
            reasoning: None,
            empty_reasoning: false,
            request_digests,
            final_messages,
            error: Some(error),
        }
    }
}

fn classify_reqwest(e: reqwest::Error) -> InferenceError {
    if e.is_timeout() {
        InferenceError::Timeout
    } else {
        InferenceError::Transport(e.to_string())
    }
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    #[serde(default)]
    message: Option<ResponseMessage>,
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct ResponseMessage {
    #[serde(default)]
    content: Option<String>,
}

/// Extracts the first choice's text: `message.content` for chat responses,
/// `text` for raw completions.
pub fn parse_completion(body: &str, structured: bool) -> Result<(String, FinishReason), InferenceError> {
    let parsed: CompletionResponse =
        serde_json::from_str(body).map_err(|e| InferenceError::Protocol(e.to_string()))?;
    let choice = parsed
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| InferenceError::Protocol("response has no choices".into()))?;
    let content = if structured {
        choice.message.and_then(|m| m.content).or(choice.text)
    } else {
        choice.text.or_else(|| choice.message.and_then(|m| m.content))
    }
    .ok_or_else(|| InferenceError::Protocol("first choice has no content".into()))?;
    let finish = match choice.finish_reason.as_deref() {
        Some("length") => FinishReason::Length,
        _ => FinishReason::Stop,
    };
    Ok((content, finish))
}
