//! Permutation feature importance of prompt segments on plan tokens.
//!
//! For prompt X with segments 1..n and the model's own plan Y, entry
//! S[i][j] is P(y_j | X, Y<j) minus the same probability after deleting
//! segment i from X. Rows are segments, columns are the meaningful plan
//! tokens selected by a [`MeaningfulMask`].

mod dump;
mod mask;

pub use dump::{write_matrix_csv, NORM_SUFFIX};
pub use mask::{build_mask, json_value_spans, MeaningfulMask, PlanDomain};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{Gateway, GatewayError, ScoreRequest, TokenScores};
use crate::prompt::{PermutationSpec, PromptError, SegmentId, SegmentedPrompt};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttributionError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("mask does not match the scored tokens: {0}")]
    MaskMismatch(String),
    #[error("segment {0} is not in the matrix")]
    UnknownSegment(String),
    #[error("pairwise matrices need a fine-grained segmentation")]
    NotFineGrained,
    #[error("i/o error: {0}")]
    Io(String),
}

/// Whether S is computed on probabilities or on raw log-probabilities.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    #[default]
    Probability,
    Logprob,
}

impl fmt::Display for Space {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Space::Probability => "probability",
            Space::Logprob => "logprob",
        })
    }
}

impl FromStr for Space {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "prob" | "probability" => Ok(Space::Probability),
            "logprob" => Ok(Space::Logprob),
            _ => Err(format!("unknown space {s:?}; expected prob or logprob")),
        }
    }
}

/// The dimension normalization divides by.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormDimension {
    #[default]
    Whole,
    PerRow,
}

impl fmt::Display for NormDimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormDimension::Whole => "whole",
            NormDimension::PerRow => "per_row",
        })
    }
}

impl FromStr for NormDimension {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "whole" => Ok(NormDimension::Whole),
            "per-row" | "per_row" => Ok(NormDimension::PerRow),
            _ => Err(format!("unknown normalization {s:?}; expected whole or per-row")),
        }
    }
}

/// A kept target token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenMeta {
    pub text: String,
    pub start: usize,
    pub end: usize,
    pub step: usize,
    pub word: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionMatrix {
    pub segment_ids: Vec<SegmentId>,
    pub tokens: Vec<TokenMeta>,
    /// values[i][j]: segment i, kept token j.
    pub values: Vec<Vec<f64>>,
    pub space: Space,
    pub step_labels: Vec<String>,
}

impl AttributionMatrix {
    pub fn row(&self, id: &SegmentId) -> Result<&[f64], AttributionError> {
        self.segment_ids
            .iter()
            .position(|s| s == id)
            .map(|i| self.values[i].as_slice())
            .ok_or_else(|| AttributionError::UnknownSegment(id.to_string()))
    }

    pub fn is_fine_grained(&self) -> bool {
        self.segment_ids.iter().any(SegmentId::is_fine_grained)
    }

    /// Restricts the matrix to the kept tokens for which `keep` is true.
    pub fn restrict(&self, keep: impl Fn(usize, &TokenMeta) -> bool) -> Self {
        let cols: Vec<usize> = (0..self.tokens.len()).filter(|j| keep(*j, &self.tokens[*j])).collect();
        Self {
            segment_ids: self.segment_ids.clone(),
            tokens: cols.iter().map(|j| self.tokens[*j].clone()).collect(),
            values: self.values.iter().map(|row| cols.iter().map(|j| row[*j]).collect()).collect(),
            space: self.space,
            step_labels: self.step_labels.clone(),
        }
    }
}

fn token_value(lp: f64, space: Space) -> f64 {
    match space {
        Space::Probability => lp.exp(),
        Space::Logprob => lp,
    }
}

/// Evaluates S from already-obtained scores: `baseline` under the intact
/// prompt and `permuted[i]` under the prompt without segment i.
pub fn matrix_from_scores(
    segment_ids: &[SegmentId],
    baseline: &TokenScores,
    permuted: &[TokenScores],
    mask: &MeaningfulMask,
    space: Space,
) -> Result<AttributionMatrix, AttributionError> {
    if permuted.len() != segment_ids.len() {
        return Err(AttributionError::MaskMismatch(format!(
            "{} permuted scorings for {} segments",
            permuted.len(),
            segment_ids.len()
        )));
    }
    mask.check_against(baseline)?;
    for p in permuted {
        mask.check_against(p)?;
    }
    let cols: Vec<usize> = (0..mask.len()).filter(|j| mask.keep[*j]).collect();
    let tokens = cols
        .iter()
        .map(|&j| {
            let t = &baseline.tokens[j];
            TokenMeta {
                text: t.text.clone(),
                start: t.start,
                end: t.end,
                step: mask.step_of[j].expect("kept tokens carry a step"),
                word: mask.word_of[j],
            }
        })
        .collect();
    let values = permuted
        .iter()
        .map(|p| {
            cols.iter()
                .map(|&j| token_value(baseline.tokens[j].logprob, space) - token_value(p.tokens[j].logprob, space))
                .collect()
        })
        .collect();
    Ok(AttributionMatrix {
        segment_ids: segment_ids.to_vec(),
        tokens,
        values,
        space,
        step_labels: mask.step_labels.clone(),
    })
}

/// Scores `plan_text` under the intact prompt and under each single-segment
/// deletion: one request per segment plus the shared baseline.
pub fn attribution_matrix(
    gateway: &Gateway,
    prompt: &SegmentedPrompt,
    plan_text: &str,
    mask: &MeaningfulMask,
    space: Space,
) -> Result<AttributionMatrix, AttributionError> {
    let ids = prompt.segment_ids();
    let mut reqs = vec![ScoreRequest::new(prompt.rendered(), plan_text)];
    for id in &ids {
        let permuted = prompt.permute(&PermutationSpec::segment(*id))?;
        reqs.push(ScoreRequest::new(permuted.rendered(), plan_text));
    }
    let mut results = gateway.batch_score(&reqs).into_iter();
    let baseline = results.next().expect("baseline request is first")?;
    let permuted = results.collect::<Result<Vec<_>, _>>()?;
    matrix_from_scores(&ids, &baseline, &permuted, mask, space)
}

/// Matrix values scaled into [-1, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedView {
    pub values: Vec<Vec<f64>>,
    pub dimension: NormDimension,
}

fn max_abs<'a>(xs: impl IntoIterator<Item = &'a f64>) -> f64 {
    xs.into_iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Divides by the largest absolute value over the whole matrix or each row;
/// all-zero divisors leave values unchanged.
pub fn normalize(values: &[Vec<f64>], dimension: NormDimension) -> NormalizedView {
    let scale = |row: &[f64], d: f64| -> Vec<f64> {
        if d == 0.0 {
            row.to_vec()
        } else {
            row.iter().map(|x| x / d).collect()
        }
    };
    let values = match dimension {
        NormDimension::Whole => {
            let d = max_abs(values.iter().flatten());
            values.iter().map(|r| scale(r, d)).collect()
        }
        NormDimension::PerRow => values.iter().map(|r| scale(r, max_abs(r))).collect(),
    };
    NormalizedView { values, dimension }
}

fn mean(xs: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// 100 times the mean whole-normalized value of each segment's row.
pub fn component_scores(m: &AttributionMatrix) -> Vec<(SegmentId, f64)> {
    let norm = normalize(&m.values, NormDimension::Whole);
    m.segment_ids
        .iter()
        .zip(&norm.values)
        .map(|(id, row)| (*id, 100.0 * mean(row.iter().copied()).unwrap_or(0.0)))
        .collect()
}

/// Mean raw attribution of `segment` per plan step; steps without kept
/// tokens are absent.
pub fn horizon_curve(m: &AttributionMatrix, segment: &SegmentId) -> Result<BTreeMap<usize, f64>, AttributionError> {
    let row = m.row(segment)?;
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for (tok, v) in m.tokens.iter().zip(row) {
        let e = acc.entry(tok.step).or_insert((0.0, 0));
        e.0 += v;
        e.1 += 1;
    }
    Ok(acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect())
}

/// Column of a pairwise matrix: one action occurrence in the plan.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ActionOccurrence {
    pub step: usize,
    pub kind: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseMatrix {
    pub rows: Vec<SegmentId>,
    pub cols: Vec<ActionOccurrence>,
    /// Mean raw S per cell; 0 where the occurrence has no kept tokens.
    pub values: Vec<Vec<f64>>,
}

/// Fine-grained segment × action occurrence means.
pub fn pairwise_matrix(m: &AttributionMatrix) -> Result<PairwiseMatrix, AttributionError> {
    if !m.is_fine_grained() {
        return Err(AttributionError::NotFineGrained);
    }
    let cols: Vec<ActionOccurrence> = m
        .step_labels
        .iter()
        .enumerate()
        .map(|(i, kind)| ActionOccurrence { step: i + 1, kind: kind.clone() })
        .collect();
    let mut rows = Vec::new();
    let mut values = Vec::new();
    for (id, row) in m.segment_ids.iter().zip(&m.values) {
        if !id.is_fine_grained() {
            continue;
        }
        rows.push(*id);
        values.push(
            cols.iter()
                .map(|c| {
                    mean(m.tokens.iter().zip(row).filter(|(t, _)| t.step == c.step).map(|(_, v)| *v)).unwrap_or(0.0)
                })
                .collect(),
        );
    }
    Ok(PairwiseMatrix { rows, cols, values })
}

/// Word-level rollup of one row: mean over the tokens of each word, in
/// word order.
pub fn word_scores(
    m: &AttributionMatrix,
    segment: &SegmentId,
    plan_text: &str,
    mask: &MeaningfulMask,
) -> Result<Vec<(String, usize, f64)>, AttributionError> {
    let row = m.row(segment)?;
    let mut acc: BTreeMap<usize, (usize, f64, usize)> = BTreeMap::new();
    for (tok, v) in m.tokens.iter().zip(row) {
        if let Some(w) = tok.word {
            let e = acc.entry(w).or_insert((tok.step, 0.0, 0));
            e.1 += v;
            e.2 += 1;
        }
    }
    acc.into_iter()
        .map(|(w, (step, sum, n))| {
            let span = mask
                .words
                .get(w)
                .filter(|r| r.end <= plan_text.len())
                .ok_or_else(|| AttributionError::MaskMismatch(format!("word {w} out of range")))?;
            Ok((plan_text[span.clone()].to_string(), step, sum / n as f64))
        })
        .collect()
}
