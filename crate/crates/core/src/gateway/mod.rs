//! Uniform access to language models.
//!
//! A [`Gateway`] wraps a [`Backend`] (remote HTTP endpoint or in-process
//! mock) and adds boundary validation of scores, a content-hash score cache,
//! retries with exponential backoff, and a bound on in-flight calls.
//! Tokenization always belongs to the backend.

mod mock;
mod remote;
mod server;

pub use mock::{
    CallRecord, Distribution, LanguageModel, LocalBackend, MockModel, Outcome, PlannerMock, PlannerSensitivity,
    Vocabulary, EOS, UNK,
};
pub use remote::RemoteBackend;
pub use server::{MockServer, ServerOptions};

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::util::{content_hash, parallel_map, Semaphore};

/// Environment variable consulted for the endpoint URL when no flag is given.
pub const BACKEND_URL_ENV: &str = "PLANATTR_BACKEND_URL";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("backend refused the request (status {status}): {message}")]
    BackendRefused { status: u16, message: String },
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

impl GatewayError {
    fn retryable(&self) -> bool {
        matches!(self, GatewayError::Transport(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub prompt: String,
    pub target: String,
}

impl ScoreRequest {
    pub fn new(prompt: impl Into<String>, target: impl Into<String>) -> Self {
        Self { prompt: prompt.into(), target: target.into() }
    }

    fn cache_key(&self) -> [u8; 32] {
        content_hash(&[self.prompt.as_bytes(), self.target.as_bytes()])
    }
}

/// One scored target token; offsets are byte offsets into the target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenScore {
    pub text: String,
    pub logprob: f64,
    pub start: usize,
    pub end: usize,
}

impl TokenScore {
    pub fn prob(&self) -> f64 {
        self.logprob.exp()
    }
}

/// Teacher-forced per-token log-probabilities of a target continuation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenScores {
    pub tokens: Vec<TokenScore>,
}

impl TokenScores {
    /// Checks that the tokens tile `target` exactly and carry finite,
    /// non-positive log-probabilities.
    pub fn validate(&self, target: &str) -> Result<(), GatewayError> {
        let violation = |m: String| Err(GatewayError::ProtocolViolation(m));
        if self.tokens.is_empty() {
            return violation("no tokens returned".into());
        }
        let mut at = 0;
        for (i, tok) in self.tokens.iter().enumerate() {
            if tok.start != at {
                return violation(format!("token {i} starts at {} but expected {at}", tok.start));
            }
            if tok.end <= tok.start || tok.end > target.len() {
                return violation(format!(
                    "token {i} span {}..{} invalid for target of {} bytes",
                    tok.start,
                    tok.end,
                    target.len()
                ));
            }
            if !target.is_char_boundary(tok.start) || !target.is_char_boundary(tok.end) {
                return violation(format!("token {i} splits a UTF-8 character"));
            }
            if target[tok.start..tok.end] != tok.text {
                return violation(format!("token {i} text does not match the target bytes"));
            }
            if !tok.logprob.is_finite() || tok.logprob > 0.0 {
                return violation(format!("token {i} has logprob {}", tok.logprob));
            }
            at = tok.end;
        }
        if at != target.len() {
            return violation(format!("tokens cover {at} of {} target bytes", target.len()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// A model reachable for greedy generation and teacher-forced scoring.
pub trait Backend: Send + Sync {
    fn generate(&self, prompt: &str, max_tokens: usize) -> Result<String, GatewayError>;
    fn score(&self, prompt: &str, target: &str) -> Result<TokenScores, GatewayError>;
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn generate(&self, prompt: &str, max_tokens: usize) -> Result<String, GatewayError> {
        (**self).generate(prompt, max_tokens)
    }
    fn score(&self, prompt: &str, target: &str) -> Result<TokenScores, GatewayError> {
        (**self).score(prompt, target)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub initial_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { attempts: 3, initial_backoff_ms: 500 }
    }
}

/// Which built-in mock to run in-process.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockKind {
    /// Follows the solver's plan with prompt-dependent confidence.
    #[default]
    Planner,
    /// Seeded pseudo-distribution only.
    Seeded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendKind {
    Remote {
        url: String,
    },
    Mock {
        #[serde(default)]
        model: MockKind,
        #[serde(default)]
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    #[serde(flatten)]
    pub kind: BackendKind,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default = "default_true")]
    pub cache: bool,
    #[serde(default)]
    pub retry: RetryPolicy,
    /// Per-request timeout for remote backends.
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_parallelism() -> usize {
    4
}
fn default_true() -> bool {
    true
}
fn default_timeout() -> u64 {
    120
}

impl BackendDescriptor {
    pub fn mock(model: MockKind, seed: u64) -> Self {
        Self {
            kind: BackendKind::Mock { model, seed },
            parallelism: default_parallelism(),
            cache: true,
            retry: RetryPolicy::default(),
            timeout_secs: default_timeout(),
        }
    }

    pub fn remote(url: impl Into<String>) -> Self {
        Self { kind: BackendKind::Remote { url: url.into() }, ..Self::mock(MockKind::Planner, 0) }
    }

    /// Instantiates the backend and wraps it in a gateway.
    pub fn connect(&self) -> Result<Gateway, GatewayError> {
        if self.parallelism == 0 {
            return Err(GatewayError::InvalidRequest("parallelism must be at least 1".into()));
        }
        let backend: Arc<dyn Backend> = match &self.kind {
            BackendKind::Remote { url } => Arc::new(RemoteBackend::new(url, Duration::from_secs(self.timeout_secs))),
            BackendKind::Mock { model: MockKind::Planner, seed } => {
                Arc::new(LocalBackend::new(PlannerMock::new(*seed)))
            }
            BackendKind::Mock { model: MockKind::Seeded, seed } => {
                Arc::new(LocalBackend::new(MockModel::new(Vocabulary::plan_words(), *seed)))
            }
        };
        Ok(Gateway::new(backend, self.parallelism, self.cache, self.retry))
    }
}

/// Shareable front-end for a backend.
pub struct Gateway {
    backend: Arc<dyn Backend>,
    parallelism: usize,
    cache: Option<Mutex<HashMap<[u8; 32], TokenScores>>>,
    retry: RetryPolicy,
    permits: Semaphore,
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>, parallelism: usize, cache: bool, retry: RetryPolicy) -> Self {
        let parallelism = parallelism.max(1);
        Self {
            backend,
            parallelism,
            cache: cache.then(|| Mutex::new(HashMap::new())),
            retry,
            permits: Semaphore::new(parallelism),
        }
    }

    pub fn parallelism(&self) -> usize {
        self.parallelism
    }

    /// Highest number of concurrent backend calls observed so far.
    pub fn peak_in_flight(&self) -> usize {
        self.permits.peak()
    }

    fn with_retry<T>(&self, mut call: impl FnMut() -> Result<T, GatewayError>) -> Result<T, GatewayError> {
        let attempts = self.retry.attempts.max(1);
        let mut backoff = Duration::from_millis(self.retry.initial_backoff_ms);
        let mut attempt = 1;
        loop {
            let result = {
                let _permit = self.permits.acquire();
                call()
            };
            match result {
                Err(e) if e.retryable() && attempt < attempts => {
                    tracing::warn!(attempt, error = %e, "backend call failed, retrying");
                    std::thread::sleep(backoff);
                    backoff *= 2;
                    attempt += 1;
                }
                other => return other,
            }
        }
    }

    /// Greedy continuation of `prompt`.
    pub fn generate(&self, prompt: &str, max_tokens: usize) -> Result<String, GatewayError> {
        if max_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_tokens must be at least 1".into()));
        }
        self.with_retry(|| self.backend.generate(prompt, max_tokens))
    }

    /// Teacher-forced scores of `req.target` given `req.prompt`.
    pub fn score(&self, req: &ScoreRequest) -> Result<TokenScores, GatewayError> {
        if req.target.is_empty() {
            return Err(GatewayError::InvalidRequest("target must be non-empty".into()));
        }
        let key = req.cache_key();
        if let Some(cache) = &self.cache {
            if let Some(hit) = cache.lock().unwrap().get(&key) {
                return Ok(hit.clone());
            }
        }
        let scores = self.with_retry(|| self.backend.score(&req.prompt, &req.target))?;
        scores.validate(&req.target)?;
        if let Some(cache) = &self.cache {
            cache.lock().unwrap().insert(key, scores.clone());
        }
        Ok(scores)
    }

    /// Scores every request; results line up with `reqs` and failures stay
    /// in place.
    pub fn batch_score(&self, reqs: &[ScoreRequest]) -> Vec<Result<TokenScores, GatewayError>> {
        parallel_map(reqs, self.parallelism, |r| self.score(r))
    }

    pub fn batch_generate(&self, prompts: &[String], max_tokens: usize) -> Vec<Result<String, GatewayError>> {
        parallel_map(prompts, self.parallelism, |p| self.generate(p, max_tokens))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn tok(text: &str, logprob: f64, start: usize) -> TokenScore {
        TokenScore { text: text.into(), logprob, start, end: start + text.len() }
    }

    #[test]
    fn validation_catches_bad_offsets() {
        let good = TokenScores { tokens: vec![tok("ab", -0.1, 0), tok("c", -0.2, 2)] };
        assert!(good.validate("abc").is_ok());

        let mut beyond = good.clone();
        beyond.tokens[1].end = 4;
        assert!(matches!(beyond.validate("abc"), Err(GatewayError::ProtocolViolation(_))));

        let gap = TokenScores { tokens: vec![tok("a", -0.1, 0), tok("c", -0.2, 2)] };
        assert!(gap.validate("abc").is_err());

        let short = TokenScores { tokens: vec![tok("ab", -0.1, 0)] };
        assert!(short.validate("abc").is_err());

        let positive = TokenScores { tokens: vec![tok("abc", 0.5, 0)] };
        assert!(positive.validate("abc").is_err());

        let nan = TokenScores { tokens: vec![tok("abc", f64::NAN, 0)] };
        assert!(nan.validate("abc").is_err());

        assert!(TokenScores { tokens: vec![] }.validate("abc").is_err());

        let split = TokenScores { tokens: vec![TokenScore { text: "é".into(), logprob: -1.0, start: 0, end: 1 }] };
        assert!(split.validate("é").is_err());
    }

    struct Flaky {
        fails: AtomicUsize,
        calls: AtomicUsize,
    }

    impl Backend for Flaky {
        fn generate(&self, _: &str, _: usize) -> Result<String, GatewayError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            if self.fails.load(Ordering::SeqCst) > 0 {
                self.fails.fetch_sub(1, Ordering::SeqCst);
                return Err(GatewayError::Transport("reset".into()));
            }
            Ok("ok".into())
        }
        fn score(&self, _: &str, target: &str) -> Result<TokenScores, GatewayError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            Ok(TokenScores { tokens: vec![tok(target, -1.0, 0)] })
        }
    }

    fn fast_retry() -> RetryPolicy {
        RetryPolicy { attempts: 3, initial_backoff_ms: 1 }
    }

    #[test]
    fn retries_transport_errors() {
        let backend = Arc::new(Flaky { fails: AtomicUsize::new(2), calls: AtomicUsize::new(0) });
        let gw = Gateway::new(backend.clone(), 1, true, fast_retry());
        assert_eq!(gw.generate("p", 3).unwrap(), "ok");
        assert_eq!(backend.calls.load(Ordering::SeqCst), 3);

        backend.fails.store(5, Ordering::SeqCst);
        assert!(matches!(gw.generate("p", 3), Err(GatewayError::Transport(_))));
    }

    #[test]
    fn cache_serves_repeat_scores() {
        let backend = Arc::new(Flaky { fails: AtomicUsize::new(0), calls: AtomicUsize::new(0) });
        let gw = Gateway::new(backend.clone(), 2, true, fast_retry());
        let req = ScoreRequest::new("p", "t");
        let a = gw.score(&req).unwrap();
        let b = gw.score(&req).unwrap();
        assert_eq!(a, b);
        assert_eq!(backend.calls.load(Ordering::SeqCst), 1);

        let uncached = Gateway::new(backend.clone(), 2, false, fast_retry());
        assert_eq!(uncached.score(&req).unwrap(), a);
        assert_eq!(backend.calls.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn invalid_requests_fail_fast() {
        let backend = Arc::new(Flaky { fails: AtomicUsize::new(0), calls: AtomicUsize::new(0) });
        let gw = Gateway::new(backend, 1, true, fast_retry());
        assert!(matches!(gw.score(&ScoreRequest::new("p", "")), Err(GatewayError::InvalidRequest(_))));
        assert!(matches!(gw.generate("p", 0), Err(GatewayError::InvalidRequest(_))));
    }

    #[test]
    fn descriptor_json_shape() {
        let d: BackendDescriptor =
            serde_json::from_str(r#"{"kind":"remote","url":"http://localhost:1","parallelism":2}"#).unwrap();
        assert_eq!(d.kind, BackendKind::Remote { url: "http://localhost:1".into() });
        assert!(d.cache);
        assert_eq!(d.retry, RetryPolicy::default());
        let m: BackendDescriptor = serde_json::from_str(r#"{"kind":"mock"}"#).unwrap();
        assert_eq!(m.kind, BackendKind::Mock { model: MockKind::Planner, seed: 0 });
        let zero = BackendDescriptor { parallelism: 0, ..m };
        assert!(zero.connect().is_err());
    }
}
