use std::ops::Range;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::AttributionError;
use crate::blocksworld::ParsedPlan;
use crate::gateway::TokenScores;

/// Which target tokens count, and the plan step each belongs to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeaningfulMask {
    pub keep: Vec<bool>,
    /// 1-based step per token; `None` for tokens outside every step.
    pub step_of: Vec<Option<usize>>,
    /// Index into `words` of the first meaningful word a token overlaps.
    pub word_of: Vec<Option<usize>>,
    /// Byte spans of the meaningful words in the target.
    pub words: Vec<Range<usize>>,
    /// Label of each step (action kind, or "day" for JSON plans); index is
    /// step - 1.
    pub step_labels: Vec<String>,
    /// Token boundaries the mask was built over.
    pub offsets: Vec<Range<usize>>,
}

impl MeaningfulMask {
    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|k| **k).count()
    }

    pub fn n_steps(&self) -> usize {
        self.step_labels.len()
    }

    pub(crate) fn check_against(&self, scores: &TokenScores) -> Result<(), AttributionError> {
        let same = scores.tokens.len() == self.offsets.len()
            && scores.tokens.iter().zip(&self.offsets).all(|(t, r)| t.start == r.start && t.end == r.end);
        if same {
            Ok(())
        } else {
            Err(AttributionError::MaskMismatch("token boundaries differ from the ones the mask was built over".into()))
        }
    }
}

pub enum PlanDomain<'a> {
    /// Numbered BlocksWorld plan; keeps action verbs, "block" and block
    /// names.
    BlocksWorld(&'a ParsedPlan),
    /// JSON plan; keeps tokens inside value positions, one step per
    /// top-level array element.
    JsonPlan,
}

const ACTION_WORDS: [&str; 7] = ["pick", "up", "put", "down", "stack", "unstack", "block"];

static WORD: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"[A-Za-z0-9_]+").unwrap());

fn intersects(a: &Range<usize>, b: &Range<usize>) -> bool {
    a.start < b.end && b.start < a.end
}

/// Builds the mask over the backend's tokenization of `plan_text`.
pub fn build_mask(
    scores: &TokenScores,
    plan_text: &str,
    domain: PlanDomain<'_>,
) -> Result<MeaningfulMask, AttributionError> {
    scores.validate(plan_text).map_err(|e| AttributionError::MaskMismatch(e.to_string()))?;
    // (word span, step)
    let (words, steps, step_labels): (Vec<Range<usize>>, Vec<Range<usize>>, Vec<String>) = match domain {
        PlanDomain::BlocksWorld(parsed) => {
            let mut words = Vec::new();
            for (span, action) in parsed.step_spans.iter().zip(&parsed.plan.steps) {
                if span.end > plan_text.len() {
                    return Err(AttributionError::MaskMismatch(format!("step span {span:?} exceeds the plan text")));
                }
                let names: Vec<&str> = action.blocks().iter().map(|b| b.as_str()).collect();
                for m in WORD.find_iter(&plan_text[span.clone()]) {
                    let w = m.as_str().to_ascii_lowercase();
                    if ACTION_WORDS.contains(&w.as_str()) || names.contains(&w.as_str()) {
                        words.push(span.start + m.start()..span.start + m.end());
                    }
                }
            }
            let labels = parsed.plan.steps.iter().map(|a| a.kind().label().to_string()).collect();
            (words, parsed.step_spans.clone(), labels)
        }
        PlanDomain::JsonPlan => {
            let values = json_value_spans(plan_text).map_err(AttributionError::MaskMismatch)?;
            let n_steps = values.iter().map(|(_, s)| *s).max().unwrap_or(0);
            let mut hull: Vec<Option<Range<usize>>> = vec![None; n_steps];
            for (r, s) in &values {
                let h = hull[s - 1].get_or_insert(r.clone());
                h.start = h.start.min(r.start);
                h.end = h.end.max(r.end);
            }
            // every step index in 1..=n_steps comes from some value
            let steps: Vec<Range<usize>> = hull.into_iter().map(|h| h.unwrap_or(0..0)).collect();
            let words = values.into_iter().map(|(r, _)| r).collect();
            (words, steps, vec!["day".to_string(); n_steps])
        }
    };

    let n = scores.tokens.len();
    let mut mask = MeaningfulMask {
        keep: vec![false; n],
        step_of: vec![None; n],
        word_of: vec![None; n],
        words,
        step_labels,
        offsets: scores.tokens.iter().map(|t| t.start..t.end).collect(),
    };
    for (i, tok) in scores.tokens.iter().enumerate() {
        let span = tok.start..tok.end;
        let step = steps
            .iter()
            .position(|s| s.contains(&tok.start))
            .or_else(|| steps.iter().position(|s| intersects(s, &span)));
        mask.step_of[i] = step.map(|s| s + 1);
        let word = mask.words.iter().position(|w| intersects(w, &span));
        if let (Some(_), Some(w)) = (step, word) {
            mask.keep[i] = true;
            mask.word_of[i] = Some(w);
        }
    }
    Ok(mask)
}

#[derive(Clone, Copy)]
enum Ctx {
    Object { expect_key: bool },
    Array,
}

/// Byte spans of every scalar value in the first JSON object or array of
/// `text`, with the 1-based index of the top-level array element holding
/// it (always 1 when the top level is an object). String spans exclude
/// the quotes.
pub fn json_value_spans(text: &str) -> Result<Vec<(Range<usize>, usize)>, String> {
    let bytes = text.as_bytes();
    let Some(begin) = bytes.iter().position(|b| *b == b'[' || *b == b'{') else {
        return Err("no JSON object or array found".into());
    };
    let top_is_array = bytes[begin] == b'[';
    let mut stack: Vec<Ctx> = Vec::new();
    let mut element = 1;
    let mut out = Vec::new();
    let mut i = begin;
    while i < bytes.len() {
        let c = bytes[i];
        match c {
            b'{' => stack.push(Ctx::Object { expect_key: true }),
            b'[' => stack.push(Ctx::Array),
            b'}' | b']' => {
                stack.pop();
                if stack.is_empty() {
                    return Ok(out);
                }
            }
            b':' => {
                if let Some(Ctx::Object { expect_key }) = stack.last_mut() {
                    *expect_key = false;
                }
            }
            b',' => {
                if let Some(Ctx::Object { expect_key }) = stack.last_mut() {
                    *expect_key = true;
                }
                if stack.len() == 1 && top_is_array {
                    element += 1;
                }
            }
            b'"' => {
                let start = i + 1;
                let mut j = start;
                while j < bytes.len() && bytes[j] != b'"' {
                    j += if bytes[j] == b'\\' { 2 } else { 1 };
                }
                if j >= bytes.len() {
                    return Err(format!("unterminated string at byte {i}"));
                }
                let is_key = matches!(stack.last(), Some(Ctx::Object { expect_key: true }));
                if !is_key && j > start {
                    out.push((start..j, element));
                }
                i = j;
            }
            c if c.is_ascii_whitespace() => {}
            _ => {
                let start = i;
                while i < bytes.len() && !b",]}:".contains(&bytes[i]) && !bytes[i].is_ascii_whitespace() {
                    i += 1;
                }
                out.push((start..i, element));
                continue;
            }
        }
        i += 1;
    }
    Err("unterminated JSON value".into())
}
