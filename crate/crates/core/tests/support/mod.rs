//! Synthetic models shared by the integration tests.
#![allow(dead_code)]

use std::sync::Arc;

use planattr::attribution::MeaningfulMask;
use planattr::gateway::{
    Backend, Gateway, GatewayError, LanguageModel, LocalBackend, MockModel, RetryPolicy, TokenScores, EOS,
};

/// Pins P(token | prompt, preceding target) for every token of `target`
/// under the model's own tokenization; the remaining mass goes to EOS.
pub fn pin_target(model: &mut MockModel, prompt: &str, target: &str, p: impl Fn(usize, &str) -> f64) {
    let tokens = model.vocabulary().tokenize(target);
    for (i, (span, _)) in tokens.iter().enumerate() {
        let tok = &target[span.clone()];
        let q = p(i, tok);
        let entries: Vec<(&str, f64)> = if q >= 1.0 { vec![(tok, 1.0)] } else { vec![(tok, q), (EOS, 1.0 - q)] };
        model.set_override(prompt, &target[..span.start], &entries).unwrap();
    }
}

/// Mask that keeps every token and puts it in step 1.
pub fn keep_all(scores: &TokenScores) -> MeaningfulMask {
    let n = scores.tokens.len();
    MeaningfulMask {
        keep: vec![true; n],
        step_of: vec![Some(1); n],
        word_of: vec![None; n],
        words: Vec::new(),
        step_labels: vec!["step".into()],
        offsets: scores.tokens.iter().map(|t| t.start..t.end).collect(),
    }
}

pub fn fast_retry() -> RetryPolicy {
    RetryPolicy { attempts: 1, initial_backoff_ms: 1 }
}

pub fn gateway_over<M: LanguageModel + 'static>(model: M, cache: bool) -> (Gateway, Arc<LocalBackend<M>>) {
    let backend = Arc::new(LocalBackend::new(model));
    (Gateway::new(backend.clone(), 4, cache, fast_retry()), backend)
}

/// Text of a numbered BlocksWorld plan whose steps alternate between the
/// given lines.
pub fn plan_text(lines: &[&str], steps: usize) -> String {
    let mut out = String::from("[Plan]");
    for i in 0..steps {
        out.push_str(&format!("\n{}. {}", i + 1, lines[i % lines.len()]));
    }
    out
}

/// Backend whose every call fails at the transport layer.
pub struct Unreachable;

impl Backend for Unreachable {
    fn generate(&self, _: &str, _: usize) -> Result<String, GatewayError> {
        Err(GatewayError::Transport("connection refused".into()))
    }
    fn score(&self, _: &str, _: &str) -> Result<TokenScores, GatewayError> {
        Err(GatewayError::Transport("connection refused".into()))
    }
}
