//! Stochastic response generation against an OpenAI-compatible
//! `/chat/completions` endpoint, with record/replay fixtures.
//!
//! One request is issued per sample (`n = 1`) so every sample carries its
//! own seed. Requests for all questions and samples share one bounded worker
//! pool; results land at their `(question, sample_index)` slot regardless of
//! completion order.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::jsonl::{self, JsonlError};
use crate::types::{Question, ResponseSample};
use crate::util::{parallel_indexed, stable_hash64};

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("question {question_id} sample {sample_index}: endpoint unreachable after {attempts} attempts: {cause}")]
    EndpointUnreachable {
        question_id: String,
        sample_index: usize,
        attempts: usize,
        cause: String,
    },
    #[error("question {question_id} sample {sample_index}: empty completion after {attempts} attempts")]
    EmptyCompletion {
        question_id: String,
        sample_index: usize,
        attempts: usize,
    },
    #[error("question {question_id} sample {sample_index}: endpoint returned {status}: {body}")]
    Http {
        question_id: String,
        sample_index: usize,
        status: u16,
        body: String,
    },
    #[error("question {question_id} sample {sample_index}: no replay fixture")]
    FixtureMiss {
        question_id: String,
        sample_index: usize,
    },
    #[error("invalid sampling config: {0}")]
    InvalidConfig(String),
    #[error("writing fixture: {0}")]
    IoWriteFailed(#[from] JsonlError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    /// Responses per question.
    pub m: usize,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: usize,
    pub endpoint_url: String,
    pub model_name: String,
    pub request_timeout_secs: f64,
    pub max_parallel: usize,
    pub retry_limit: usize,
    /// First retry delay; doubles per attempt.
    pub retry_backoff_ms: u64,
    /// Send a per-request seed to the endpoint.
    pub send_seed: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            m: 30,
            temperature: 1.0,
            top_p: 1.0,
            max_tokens: 1024,
            endpoint_url: "http://localhost:8000/v1".into(),
            model_name: "microsoft/Phi-3-mini-4k-instruct".into(),
            request_timeout_secs: 120.0,
            max_parallel: 8,
            retry_limit: 3,
            retry_backoff_ms: 500,
            send_seed: true,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<(), SampleError> {
        self.validate_with_min_m(2)
    }

    fn validate_with_min_m(&self, min_m: usize) -> Result<(), SampleError> {
        let bad = |msg: String| Err(SampleError::InvalidConfig(msg));
        if self.m < min_m {
            return bad(format!("m must be at least {min_m}, got {}", self.m));
        }
        if self.max_parallel < 1 {
            return bad("max_parallel must be at least 1".into());
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return bad(format!("temperature must be non-negative, got {}", self.temperature));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return bad(format!("top_p must be in (0, 1], got {}", self.top_p));
        }
        if self.max_tokens == 0 {
            return bad("max_tokens must be positive".into());
        }
        Ok(())
    }
}

/// Per-request seed: a stable hash of run seed, question and sample,
/// limited to 63 bits so it fits a signed JSON integer.
pub fn derive_seed(run_seed: u64, question_id: &str, sample_index: usize) -> u64 {
    stable_hash64([
        run_seed.to_le_bytes().as_slice(),
        question_id.as_bytes(),
        (sample_index as u64).to_le_bytes().as_slice(),
    ]) & (i64::MAX as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChatMessage {
    pub role: &'static str,
    pub content: String,
}

/// Body of one `/chat/completions` request.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: usize,
    pub n: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl ChatRequest {
    pub fn for_question(question: &Question, cfg: &SamplingConfig, seed: u64) -> Self {
        ChatRequest {
            model: cfg.model_name.clone(),
            messages: vec![
                ChatMessage {
                    role: "system",
                    content: question.system_prompt.clone(),
                },
                ChatMessage {
                    role: "user",
                    content: question.prompt_text.clone(),
                },
            ],
            temperature: cfg.temperature,
            top_p: cfg.top_p,
            max_tokens: cfg.max_tokens,
            n: 1,
            seed: cfg.send_seed.then_some(seed),
        }
    }
}

/// Failure of a single attempt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AttemptError {
    Unreachable(String),
    Empty,
    Http { status: u16, body: String },
    FixtureMiss,
}

impl AttemptError {
    fn retryable(&self) -> bool {
        match self {
            AttemptError::Unreachable(_) | AttemptError::Empty => true,
            AttemptError::Http { status, .. } => *status == 429 || *status >= 500,
            AttemptError::FixtureMiss => false,
        }
    }
}

/// Produces one completion text.
pub trait ChatBackend: Sync {
    fn complete(
        &self,
        question: &Question,
        sample_index: usize,
        request: &ChatRequest,
    ) -> Result<String, AttemptError>;
}

/// Live HTTP backend.
pub struct HttpChatBackend {
    url: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatChoiceMessage,
}

#[derive(Deserialize)]
struct ChatChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

impl HttpChatBackend {
    pub fn new(cfg: &SamplingConfig, api_key: Option<String>) -> Result<Self, SampleError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(cfg.request_timeout_secs))
            .build()
            .map_err(|e| SampleError::InvalidConfig(e.to_string()))?;
        Ok(HttpChatBackend {
            url: format!("{}/chat/completions", cfg.endpoint_url.trim_end_matches('/')),
            api_key,
            client,
        })
    }
}

impl ChatBackend for HttpChatBackend {
    fn complete(
        &self,
        _question: &Question,
        _sample_index: usize,
        request: &ChatRequest,
    ) -> Result<String, AttemptError> {
        let mut req = self.client.post(&self.url).json(request);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .map_err(|e| AttemptError::Unreachable(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(AttemptError::Http {
                status: status.as_u16(),
                body: resp.text().unwrap_or_default(),
            });
        }
        let body: ChatResponse = resp
            .json()
            .map_err(|e| AttemptError::Unreachable(format!("malformed response: {e}")))?;
        let text = body
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .unwrap_or_default();
        if text.trim().is_empty() {
            Err(AttemptError::Empty)
        } else {
            Ok(text)
        }
    }
}

/// Fixture file for one question inside a replay directory.
pub fn fixture_path(dir: &Path, question_id: &str) -> PathBuf {
    let mut name = String::with_capacity(question_id.len() + 6);
    for b in question_id.bytes() {
        if b.is_ascii_alphanumeric() || b == b'-' || b == b'_' {
            name.push(b as char);
        } else {
            name.push_str(&format!("%{b:02X}"));
        }
    }
    name.push_str(".jsonl");
    dir.join(name)
}

/// Writes a replay fixture for one question; later replays return exactly
/// these texts.
pub fn record_fixture(
    question: &Question,
    samples: &[ResponseSample],
    dir: &Path,
) -> Result<PathBuf, SampleError> {
    if samples.is_empty() {
        return Err(SampleError::InvalidConfig(format!(
            "no samples to record for question {}",
            question.id
        )));
    }
    let path = fixture_path(dir, &question.id);
    jsonl::write(&path, samples)?;
    Ok(path)
}

/// Serves recorded responses keyed by `(question_id, sample_index)`.
pub struct ReplayBackend {
    dir: PathBuf,
    loaded: Mutex<HashMap<String, HashMap<usize, String>>>,
}

impl ReplayBackend {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        ReplayBackend {
            dir: dir.into(),
            loaded: Mutex::new(HashMap::new()),
        }
    }

    fn load(&self, question_id: &str) -> HashMap<usize, String> {
        let path = fixture_path(&self.dir, question_id);
        let records: Vec<ResponseSample> = if path.exists() {
            jsonl::read(&path).unwrap_or_else(|e| {
                log::warn!("unreadable fixture {}: {e}", path.display());
                Vec::new()
            })
        } else {
            Vec::new()
        };
        records
            .into_iter()
            .filter(|r| r.question_id == question_id)
            .map(|r| (r.sample_index, r.text))
            .collect()
    }
}

impl ChatBackend for ReplayBackend {
    fn complete(
        &self,
        question: &Question,
        sample_index: usize,
        _request: &ChatRequest,
    ) -> Result<String, AttemptError> {
        let mut loaded = self.loaded.lock().expect("replay cache poisoned");
        let texts = loaded
            .entry(question.id.clone())
            .or_insert_with(|| self.load(&question.id));
        texts
            .get(&sample_index)
            .cloned()
            .ok_or(AttemptError::FixtureMiss)
    }
}

fn sample_one<B: ChatBackend + ?Sized>(
    backend: &B,
    question: &Question,
    sample_index: usize,
    cfg: &SamplingConfig,
    run_seed: u64,
) -> Result<ResponseSample, SampleError> {
    let seed = derive_seed(run_seed, &question.id, sample_index);
    let request = ChatRequest::for_question(question, cfg, seed);
    let attempts = cfg.retry_limit + 1;
    let mut last = AttemptError::Empty;
    for attempt in 0..attempts {
        if attempt > 0 && cfg.retry_backoff_ms > 0 {
            let factor = 1u64 << (attempt - 1).min(6);
            std::thread::sleep(Duration::from_millis(cfg.retry_backoff_ms * factor));
        }
        match backend.complete(question, sample_index, &request) {
            Ok(text) if !text.trim().is_empty() => {
                return Ok(ResponseSample::new(
                    &question.id,
                    sample_index,
                    text,
                    cfg.temperature,
                    seed,
                ));
            }
            Ok(_) => last = AttemptError::Empty,
            Err(e) => last = e,
        }
        if !last.retryable() {
            break;
        }
    }
    let question_id = question.id.clone();
    Err(match last {
        AttemptError::Unreachable(cause) => SampleError::EndpointUnreachable {
            question_id,
            sample_index,
            attempts,
            cause,
        },
        AttemptError::Empty => SampleError::EmptyCompletion {
            question_id,
            sample_index,
            attempts,
        },
        AttemptError::Http { status, body } if status == 429 || status >= 500 => {
            SampleError::EndpointUnreachable {
                question_id,
                sample_index,
                attempts,
                cause: format!("HTTP {status}: {body}"),
            }
        }
        AttemptError::Http { status, body } => SampleError::Http {
            question_id,
            sample_index,
            status,
            body,
        },
        AttemptError::FixtureMiss => SampleError::FixtureMiss {
            question_id,
            sample_index,
        },
    })
}

/// Samples `cfg.m` responses for one question.
pub fn sample_responses<B: ChatBackend + ?Sized>(
    question: &Question,
    cfg: &SamplingConfig,
    backend: &B,
    run_seed: u64,
) -> Result<Vec<ResponseSample>, SampleError> {
    sample_batch(std::slice::from_ref(question), cfg, backend, run_seed)
        .pop()
        .expect("one result per question")
}

/// Samples every question; a question fails as a whole if any of its
/// samples fails, without affecting the others.
pub fn sample_batch<B: ChatBackend + ?Sized>(
    questions: &[Question],
    cfg: &SamplingConfig,
    backend: &B,
    run_seed: u64,
) -> Vec<Result<Vec<ResponseSample>, SampleError>> {
    sample_batch_min(questions, cfg, backend, run_seed, 2)
}

/// Like [`sample_responses`] but accepts `m = 1`, for best-of-m selection.
pub fn sample_for_selection<B: ChatBackend + ?Sized>(
    question: &Question,
    cfg: &SamplingConfig,
    backend: &B,
    run_seed: u64,
) -> Result<Vec<ResponseSample>, SampleError> {
    sample_batch_min(std::slice::from_ref(question), cfg, backend, run_seed, 1)
        .pop()
        .expect("one result per question")
}

fn sample_batch_min<B: ChatBackend + ?Sized>(
    questions: &[Question],
    cfg: &SamplingConfig,
    backend: &B,
    run_seed: u64,
    min_m: usize,
) -> Vec<Result<Vec<ResponseSample>, SampleError>> {
    if let Err(e) = cfg.validate_with_min_m(min_m) {
        let msg = e.to_string();
        return questions
            .iter()
            .map(|_| Err(SampleError::InvalidConfig(msg.clone())))
            .collect();
    }
    let m = cfg.m;
    let results = parallel_indexed(questions.len() * m, cfg.max_parallel, |job| {
        sample_one(backend, &questions[job / m], job % m, cfg, run_seed)
    });
    let mut out = Vec::with_capacity(questions.len());
    let mut it = results.into_iter();
    for _ in questions {
        let per_question: Result<Vec<ResponseSample>, SampleError> = it.by_ref().take(m).collect();
        out.push(per_question);
    }
    out
}

/// Reads a `{"id", "prompt"}` per line questions file.
pub fn read_questions(path: &Path) -> Result<Vec<Question>, JsonlError> {
    jsonl::read(path)
}

/// Loads a responses file, restoring cached lengths.
pub fn read_responses(path: &Path) -> Result<Vec<ResponseSample>, JsonlError> {
    let mut rs: Vec<ResponseSample> = jsonl::read(path)?;
    rs.iter_mut().for_each(ResponseSample::refresh_length);
    Ok(rs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct Flaky {
        calls: AtomicUsize,
        fail_first: usize,
        outcome: AttemptError,
    }

    impl ChatBackend for Flaky {
        fn complete(&self, q: &Question, i: usize, _: &ChatRequest) -> Result<String, AttemptError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.fail_first {
                Err(self.outcome.clone())
            } else {
                Ok(format!("{} answer {i}.", q.id))
            }
        }
    }

    fn cfg(m: usize, retry_limit: usize) -> SamplingConfig {
        SamplingConfig {
            m,
            retry_limit,
            retry_backoff_ms: 0,
            max_parallel: 1,
            ..Default::default()
        }
    }

    fn q() -> Question {
        Question::new("q/1", "Tell me about De Beers.").unwrap()
    }

    #[test]
    fn request_carries_system_prompt_and_seed() {
        let c = SamplingConfig::default();
        let body = serde_json::to_value(ChatRequest::for_question(&q(), &c, 42)).unwrap();
        assert_eq!(
            body["messages"][0]["content"],
            "You are an intelligent assistant who answers questions accurately."
        );
        assert_eq!(body["messages"][0]["role"], "system");
        assert_eq!(body["messages"][1]["content"], "Tell me about De Beers.");
        assert_eq!(body["n"], 1);
        assert_eq!(body["seed"], 42);
        let no_seed = SamplingConfig { send_seed: false, ..c };
        let body = serde_json::to_value(ChatRequest::for_question(&q(), &no_seed, 42)).unwrap();
        assert!(body.get("seed").is_none());
    }

    #[test]
    fn seeds_are_stable_and_distinct() {
        assert_eq!(derive_seed(1, "q", 0), derive_seed(1, "q", 0));
        assert_ne!(derive_seed(1, "q", 0), derive_seed(1, "q", 1));
        assert_ne!(derive_seed(1, "q", 0), derive_seed(2, "q", 0));
        assert!(derive_seed(9, "x", 3) <= i64::MAX as u64);
    }

    #[test]
    fn retries_then_succeeds() {
        let b = Flaky {
            calls: 0.into(),
            fail_first: 2,
            outcome: AttemptError::Unreachable("down".into()),
        };
        let out = sample_responses(&q(), &cfg(2, 2), &b, 0).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[1].sample_index, 1);
    }

    #[test]
    fn unreachable_after_retry_limit_plus_one_attempts() {
        let b = Flaky {
            calls: 0.into(),
            fail_first: usize::MAX,
            outcome: AttemptError::Unreachable("refused".into()),
        };
        let err = sample_responses(&q(), &cfg(3, 2), &b, 0).unwrap_err();
        assert!(matches!(err, SampleError::EndpointUnreachable { attempts: 3, .. }));
    }

    #[test]
    fn empty_completion_fails_question() {
        let b = Flaky {
            calls: 0.into(),
            fail_first: usize::MAX,
            outcome: AttemptError::Empty,
        };
        let err = sample_responses(&q(), &cfg(2, 1), &b, 0).unwrap_err();
        assert!(matches!(err, SampleError::EmptyCompletion { attempts: 2, .. }));
    }

    #[test]
    fn client_errors_are_not_retried() {
        let b = Flaky {
            calls: 0.into(),
            fail_first: usize::MAX,
            outcome: AttemptError::Http { status: 400, body: "bad".into() },
        };
        let err = sample_responses(&q(), &cfg(2, 5), &b, 0).unwrap_err();
        assert!(matches!(err, SampleError::Http { status: 400, .. }));
        assert_eq!(b.calls.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn m_below_two_is_rejected() {
        assert!(cfg(1, 0).validate().is_err());
        let zero_par = SamplingConfig { max_parallel: 0, ..cfg(2, 0) };
        assert!(zero_par.validate().is_err());
    }

    #[test]
    fn record_then_replay_is_identical() {
        let dir = tempfile::tempdir().unwrap();
        let samples = vec![
            ResponseSample::new("q/1", 0, "First answer text.", 1.0, 5),
            ResponseSample::new("q/1", 1, "Second answer text.", 1.0, 6),
        ];
        let path = record_fixture(&q(), &samples, dir.path()).unwrap();
        assert_eq!(path.file_name().unwrap(), "q%2F1.jsonl");
        let replay = ReplayBackend::new(dir.path());
        let a = sample_responses(&q(), &cfg(2, 0), &replay, 3).unwrap();
        let b = sample_responses(&q(), &cfg(2, 0), &ReplayBackend::new(dir.path()), 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].text, "First answer text.");
        assert_eq!(a[1].text, "Second answer text.");
        let miss = sample_responses(&q(), &cfg(3, 4), &replay, 3).unwrap_err();
        assert!(matches!(miss, SampleError::FixtureMiss { sample_index: 2, .. }));
    }

    #[test]
    fn record_requires_samples() {
        let dir = tempfile::tempdir().unwrap();
        assert!(record_fixture(&q(), &[], dir.path()).is_err());
    }
}
