//! Deterministic in-process language models.
//!
//! [`MockModel`] is table-driven: explicit next-token distributions keyed by
//! a hash of (prompt, generated prefix), with a seeded pseudo-distribution
//! for every other context. [`PlannerMock`] reads the BlocksWorld statement
//! out of the prompt and follows the solver's plan with a confidence that
//! depends on which prompt components are present.

use std::collections::HashMap;
use std::ops::Range;
use std::sync::{Arc, LazyLock, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{Backend, GatewayError, TokenScore, TokenScores};
use crate::blocksworld::{find_instance_in_prompt, render_plan, solve_bfs, COLOR_PALETTE};
use crate::prompt::{ACTION_DEFS, CONSTRAINTS};
use crate::util::content_hash;

/// Override key for the unknown-character outcome.
pub const UNK: &str = "<unk>";
/// Override key for end of sequence.
pub const EOS: &str = "<eos>";

/// Index into a [`Distribution`]: vocabulary tokens first, then unknown,
/// then end of sequence.
pub type Outcome = usize;

const SUM_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    max_len: usize,
}

impl Vocabulary {
    pub fn new<S: Into<String>>(tokens: impl IntoIterator<Item = S>) -> Result<Self, GatewayError> {
        let mut out = Self { tokens: Vec::new(), index: HashMap::new(), max_len: 0 };
        for t in tokens {
            let t = t.into();
            if t.is_empty() || t == UNK || t == EOS || out.index.contains_key(&t) {
                return Err(GatewayError::InvalidRequest(format!("bad vocabulary entry {t:?}")));
            }
            out.max_len = out.max_len.max(t.len());
            out.index.insert(t.clone(), out.tokens.len());
            out.tokens.push(t);
        }
        Ok(out)
    }

    /// Words, numbers and punctuation of BlocksWorld plans, plus single
    /// ASCII characters so that most English text tokenizes.
    pub fn plan_words() -> Self {
        let mut tokens: Vec<String> = Vec::new();
        for marker in ["[Plan]", "[PLAN]", "[Chosen Insights]"] {
            tokens.push(marker.into());
        }
        for w in ["pick", "up", "put", "down", "stack", "unstack", "the", "block", "on", "top", "of", "from"]
            .iter()
            .chain(COLOR_PALETTE.iter())
        {
            tokens.push(format!(" {w}"));
            tokens.push((*w).to_string());
        }
        for c in (b' '..=b'~').map(char::from).chain(['\n']) {
            let s = c.to_string();
            if !tokens.contains(&s) {
                tokens.push(s);
            }
        }
        Self::new(tokens).expect("built-in vocabulary is well formed")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of outcomes of a distribution over this vocabulary.
    pub fn outcomes(&self) -> usize {
        self.tokens.len() + 2
    }

    pub fn unk(&self) -> Outcome {
        self.tokens.len()
    }

    pub fn eos(&self) -> Outcome {
        self.tokens.len() + 1
    }

    pub fn outcome(&self, key: &str) -> Option<Outcome> {
        match key {
            UNK => Some(self.unk()),
            EOS => Some(self.eos()),
            _ => self.index.get(key).copied(),
        }
    }

    pub fn token(&self, outcome: Outcome) -> Option<&str> {
        self.tokens.get(outcome).map(String::as_str)
    }

    /// Greedy longest match; characters no entry covers become one
    /// unknown token each.
    pub fn tokenize(&self, text: &str) -> Vec<(Range<usize>, Outcome)> {
        let mut out = Vec::new();
        let mut i = 0;
        while i < text.len() {
            let mut hit = None;
            let longest = self.max_len.min(text.len() - i);
            for len in (1..=longest).rev() {
                if !text.is_char_boundary(i + len) {
                    continue;
                }
                if let Some(&id) = self.index.get(&text[i..i + len]) {
                    hit = Some((len, id));
                    break;
                }
            }
            let (len, id) = hit.unwrap_or_else(|| {
                let ch = text[i..].chars().next().expect("i is inside text");
                (ch.len_utf8(), self.unk())
            });
            out.push((i..i + len, id));
            i += len;
        }
        out
    }
}

/// Next-token distribution over the outcomes of a vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    probs: Vec<f64>,
}

impl Distribution {
    pub fn new(probs: Vec<f64>) -> Result<Self, GatewayError> {
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(GatewayError::InvalidRequest("probabilities must be finite and >= 0".into()));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(GatewayError::InvalidRequest(format!("probabilities sum to {sum}, expected 1")));
        }
        Ok(Self { probs })
    }

    fn from_weights(weights: Vec<f64>) -> Self {
        let total: f64 = weights.iter().sum();
        Self { probs: weights.into_iter().map(|w| w / total).collect() }
    }

    pub fn prob(&self, outcome: Outcome) -> f64 {
        self.probs.get(outcome).copied().unwrap_or(0.0)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Most likely outcome; ties go to the lowest index.
    pub fn argmax(&self) -> Outcome {
        let mut best = 0;
        for (i, p) in self.probs.iter().enumerate() {
            if *p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

fn context_key(prompt: &str, prefix: &str) -> [u8; 32] {
    content_hash(&[prompt.as_bytes(), prefix.as_bytes()])
}

fn seeded_weights(seed: u64, prompt: &str, prefix: &str, n: usize) -> Vec<f64> {
    let key = content_hash(&[&seed.to_le_bytes(), prompt.as_bytes(), prefix.as_bytes()]);
    let mut rng = ChaCha8Rng::from_seed(key);
    (0..n).map(|_| 0.05 + rng.random::<f64>()).collect()
}

/// A model: a vocabulary plus a next-token distribution for every context.
pub trait LanguageModel: Send + Sync {
    fn vocabulary(&self) -> &Vocabulary;
    fn distribution(&self, prompt: &str, prefix: &str) -> Distribution;
}

/// Table-driven mock with a seeded fallback.
#[derive(Debug, Clone)]
pub struct MockModel {
    vocab: Vocabulary,
    overrides: HashMap<[u8; 32], Distribution>,
    seed: u64,
}

impl MockModel {
    pub fn new(vocab: Vocabulary, seed: u64) -> Self {
        Self { vocab, overrides: HashMap::new(), seed }
    }

    /// Pins the distribution after `prefix` under `prompt`. Unlisted
    /// outcomes get probability zero; keys are tokens, [`UNK`] or [`EOS`].
    pub fn set_override(&mut self, prompt: &str, prefix: &str, entries: &[(&str, f64)]) -> Result<(), GatewayError> {
        let mut probs = vec![0.0; self.vocab.outcomes()];
        for (key, p) in entries {
            let id = self
                .vocab
                .outcome(key)
                .ok_or_else(|| GatewayError::InvalidRequest(format!("unknown token {key:?}")))?;
            probs[id] += p;
        }
        self.overrides.insert(context_key(prompt, prefix), Distribution::new(probs)?);
        Ok(())
    }

    pub fn override_count(&self) -> usize {
        self.overrides.len()
    }

    pub fn fallback(&self, prompt: &str, prefix: &str) -> Distribution {
        Distribution::from_weights(seeded_weights(self.seed, prompt, prefix, self.vocab.outcomes()))
    }
}

impl LanguageModel for MockModel {
    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn distribution(&self, prompt: &str, prefix: &str) -> Distribution {
        match self.overrides.get(&context_key(prompt, prefix)) {
            Some(d) => d.clone(),
            None => self.fallback(prompt, prefix),
        }
    }
}

/// How strongly each prompt component raises the planner's confidence in
/// the solver's next token.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlannerSensitivity {
    pub base: f64,
    pub action_defs: f64,
    pub constraints: f64,
    pub memory: f64,
}

impl Default for PlannerSensitivity {
    fn default() -> Self {
        Self { base: 0.55, action_defs: 0.12, constraints: 0.08, memory: 0.1 }
    }
}

struct Gold {
    text: String,
    /// token start offset -> outcome
    starts: HashMap<usize, Outcome>,
}

struct PromptView {
    confidence: f64,
    gold: Option<Gold>,
}

static INSIGHT_LINE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?m)\b\d+\. [^\n]+ \[-?\d+\]$").unwrap());

fn sentences(text: &str) -> Vec<String> {
    text.split(['\n'])
        .flat_map(|line| line.split_inclusive(". "))
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

/// Mock that answers BlocksWorld prompts with the optimal plan.
///
/// Without a parseable statement in the prompt it falls back to the seeded
/// pseudo-distribution, so removing the question moves probability mass
/// away from every plan token.
pub struct PlannerMock {
    base: MockModel,
    sensitivity: PlannerSensitivity,
    action_lines: Vec<String>,
    constraint_sentences: Vec<String>,
    views: Mutex<HashMap<[u8; 32], Arc<PromptView>>>,
}

impl PlannerMock {
    pub fn new(seed: u64) -> Self {
        Self::with_sensitivity(seed, PlannerSensitivity::default())
    }

    pub fn with_sensitivity(seed: u64, sensitivity: PlannerSensitivity) -> Self {
        Self {
            base: MockModel::new(Vocabulary::plan_words(), seed),
            sensitivity,
            action_lines: sentences(ACTION_DEFS),
            constraint_sentences: sentences(CONSTRAINTS),
            views: Mutex::new(HashMap::new()),
        }
    }

    fn fraction_present(prompt: &str, parts: &[String]) -> f64 {
        if parts.is_empty() {
            return 0.0;
        }
        parts.iter().filter(|s| prompt.contains(s.as_str())).count() as f64 / parts.len() as f64
    }

    fn view(&self, prompt: &str) -> Arc<PromptView> {
        let key = content_hash(&[prompt.as_bytes()]);
        if let Some(v) = self.views.lock().unwrap().get(&key) {
            return v.clone();
        }
        let s = &self.sensitivity;
        let insights = INSIGHT_LINE.find_iter(prompt).count().min(7) as f64 / 7.0;
        let confidence = (s.base
            + s.action_defs * Self::fraction_present(prompt, &self.action_lines)
            + s.constraints * Self::fraction_present(prompt, &self.constraint_sentences)
            + s.memory * insights)
            .min(0.99);
        let gold = find_instance_in_prompt(prompt).and_then(|inst| solve_bfs(&inst, 64)).map(|plan| {
            let text = render_plan(&plan);
            let starts = self.base.vocab.tokenize(&text).into_iter().map(|(r, id)| (r.start, id)).collect();
            Gold { text, starts }
        });
        let view = Arc::new(PromptView { confidence, gold });
        self.views.lock().unwrap().insert(key, view.clone());
        view
    }
}

impl LanguageModel for PlannerMock {
    fn vocabulary(&self) -> &Vocabulary {
        &self.base.vocab
    }

    fn distribution(&self, prompt: &str, prefix: &str) -> Distribution {
        let view = self.view(prompt);
        let expected = view.gold.as_ref().and_then(|g| {
            if !g.text.starts_with(prefix) {
                None
            } else if prefix.len() == g.text.len() {
                Some(self.base.vocab.eos())
            } else {
                g.starts.get(&prefix.len()).copied()
            }
        });
        let Some(expected) = expected else {
            return self.base.fallback(prompt, prefix);
        };
        let mut weights = seeded_weights(self.base.seed, prompt, prefix, self.base.vocab.outcomes());
        weights[expected] = 0.0;
        let rest: f64 = weights.iter().sum();
        let p = view.confidence;
        let probs =
            weights.iter().enumerate().map(|(i, w)| if i == expected { p } else { (1.0 - p) * w / rest }).collect();
        Distribution { probs }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallRecord {
    pub op: String,
    pub prompt: String,
    pub target: Option<String>,
}

/// Runs a [`LanguageModel`] in-process and logs every call.
pub struct LocalBackend<M> {
    model: M,
    log: Mutex<Vec<CallRecord>>,
}

impl<M: LanguageModel> LocalBackend<M> {
    pub fn new(model: M) -> Self {
        Self { model, log: Mutex::new(Vec::new()) }
    }

    pub fn model(&self) -> &M {
        &self.model
    }

    pub fn calls(&self) -> Vec<CallRecord> {
        self.log.lock().unwrap().clone()
    }

    pub fn score_calls(&self) -> usize {
        self.log.lock().unwrap().iter().filter(|c| c.op == "score").count()
    }

    pub fn clear_log(&self) {
        self.log.lock().unwrap().clear();
    }

    fn record(&self, op: &str, prompt: &str, target: Option<&str>) {
        self.log.lock().unwrap().push(CallRecord {
            op: op.into(),
            prompt: prompt.into(),
            target: target.map(Into::into),
        });
    }
}

impl<M: LanguageModel> Backend for LocalBackend<M> {
    fn generate(&self, prompt: &str, max_tokens: usize) -> Result<String, GatewayError> {
        self.record("generate", prompt, None);
        if max_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_tokens must be at least 1".into()));
        }
        let vocab = self.model.vocabulary();
        let mut out = String::new();
        for _ in 0..max_tokens {
            let next = self.model.distribution(prompt, &out).argmax();
            match vocab.token(next) {
                Some(tok) => out.push_str(tok),
                None => break,
            }
        }
        Ok(out)
    }

    fn score(&self, prompt: &str, target: &str) -> Result<TokenScores, GatewayError> {
        self.record("score", prompt, Some(target));
        if target.is_empty() {
            return Err(GatewayError::InvalidRequest("target must be non-empty".into()));
        }
        let mut tokens = Vec::new();
        for (span, id) in self.model.vocabulary().tokenize(target) {
            let p = self.model.distribution(prompt, &target[..span.start]).prob(id);
            if p <= 0.0 {
                return Err(GatewayError::BackendRefused {
                    status: 422,
                    message: format!("token {:?} has zero probability", &target[span.clone()]),
                });
            }
            tokens.push(TokenScore {
                text: target[span.clone()].to_string(),
                logprob: p.ln().min(0.0),
                start: span.start,
                end: span.end,
            });
        }
        Ok(TokenScores { tokens })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocksworld::{generate_instance, parse_plan_text, render_instance, validate_plan};
    use crate::prompt::{assemble, PlanningParts};

    fn six() -> Vocabulary {
        Vocabulary::new(["a", "b", "c", "d", "e", "f"]).unwrap()
    }

    #[test]
    fn tokenize_longest_match_and_unknown() {
        let v = Vocabulary::new(["a", "ab", "abc", " x"]).unwrap();
        let toks = v.tokenize("abca x!");
        let spans: Vec<_> = toks.iter().map(|(r, _)| r.clone()).collect();
        assert_eq!(spans, vec![0..3, 3..4, 4..6, 6..7]);
        assert_eq!(toks[3].1, v.unk());
        let uni = v.tokenize("aé");
        assert_eq!(uni[1].0, 1..3);
    }

    #[test]
    fn vocabulary_rejects_specials_and_duplicates() {
        assert!(Vocabulary::new(["a", "a"]).is_err());
        assert!(Vocabulary::new([EOS]).is_err());
        assert!(Vocabulary::new([""]).is_err());
    }

    #[test]
    fn fallback_sums_to_one_and_is_deterministic() {
        let m = MockModel::new(six(), 42);
        for prefix in ["", "a", "ab"] {
            let d = m.distribution("prompt", prefix);
            let sum: f64 = d.probs().iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12);
            assert_eq!(d, MockModel::new(six(), 42).distribution("prompt", prefix));
        }
        assert_ne!(m.distribution("p", ""), MockModel::new(six(), 43).distribution("p", ""));
    }

    #[test]
    fn override_lookup_gives_exact_logprob() {
        let mut m = MockModel::new(six(), 0);
        m.set_override("ab", "", &[("c", 0.5), ("d", 0.5)]).unwrap();
        let backend = LocalBackend::new(m);
        let scores = backend.score("ab", "c").unwrap();
        assert_eq!(scores.tokens.len(), 1);
        assert_eq!(scores.tokens[0].logprob, 0.5f64.ln());
        scores.validate("c").unwrap();
    }

    #[test]
    fn override_must_be_a_distribution() {
        let mut m = MockModel::new(six(), 0);
        assert!(m.set_override("p", "", &[("a", 0.5)]).is_err());
        assert!(m.set_override("p", "", &[("zz", 1.0)]).is_err());
        assert!(m.set_override("p", "", &[("a", 1.5), ("b", -0.5)]).is_err());
    }

    #[test]
    fn greedy_generation_follows_override() {
        let v = Vocabulary::new(["pick", " up", "x"]).unwrap();
        let mut m = MockModel::new(v, 0);
        m.set_override("P", "", &[("pick", 0.9), ("x", 0.1)]).unwrap();
        m.set_override("P", "pick", &[(" up", 0.8), (EOS, 0.2)]).unwrap();
        m.set_override("P", "pick up", &[(EOS, 1.0)]).unwrap();
        let backend = LocalBackend::new(m);
        let out = backend.generate("P", 10).unwrap();
        assert_eq!(out, "pick up");
        assert_eq!(backend.generate("P", 10).unwrap(), out);
        assert_eq!(backend.generate("P", 1).unwrap(), "pick");
    }

    #[test]
    fn zero_probability_target_is_refused() {
        let mut m = MockModel::new(six(), 0);
        m.set_override("p", "", &[("a", 1.0)]).unwrap();
        let backend = LocalBackend::new(m);
        assert!(matches!(backend.score("p", "b"), Err(GatewayError::BackendRefused { .. })));
    }

    fn planner_prompt(inst: &crate::blocksworld::Instance, constraints: &str) -> String {
        let q = render_instance(inst).question;
        assemble(&PlanningParts { action_defs: ACTION_DEFS, constraints, question: &q, insights: None }, false)
            .unwrap()
            .rendered()
            .to_string()
    }

    #[test]
    fn planner_mock_emits_gold_plan() {
        let backend = LocalBackend::new(PlannerMock::new(3));
        for seed in 0..5 {
            let inst = generate_instance(4, seed, 2).unwrap();
            let text = backend.generate(&planner_prompt(&inst, CONSTRAINTS), 400).unwrap();
            let parsed = parse_plan_text(&text).unwrap();
            assert!(validate_plan(&inst, &parsed.plan).ok);
            assert_eq!(parsed.plan, solve_bfs(&inst, 64).unwrap());
        }
    }

    #[test]
    fn planner_mock_confidence_tracks_components() {
        let backend = LocalBackend::new(PlannerMock::new(3));
        let inst = generate_instance(3, 1, 2).unwrap();
        let full = planner_prompt(&inst, CONSTRAINTS);
        let target = backend.generate(&full, 400).unwrap();
        let with = backend.score(&full, &target).unwrap();
        let without = backend.score(&planner_prompt(&inst, ""), &target).unwrap();
        let s = PlannerSensitivity::default();
        let p_full = s.base + s.action_defs + s.constraints;
        assert!((with.tokens[0].prob() - p_full).abs() < 1e-12);
        assert!((without.tokens[0].prob() - (p_full - s.constraints)).abs() < 1e-12);
        for t in &with.tokens {
            let sum: f64 = PlannerMock::new(3).distribution(&full, &target[..t.start]).probs().iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }
}
