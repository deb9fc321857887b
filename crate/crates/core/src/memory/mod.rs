//! Episodic memory: a voted insight store, the grammar models use to
//! propose changes to it, and the loops that learn insights from failed
//! plans.

mod learn;

pub use learn::{
    learn_loop, render_trajectory, LearnConfig, LearnTranscript, MemoryMode, TranscriptEntry,
    BEHAVIORAL_CLONING_TEMPLATE, ORACLE_FEEDBACK_TEMPLATE,
};

use std::collections::BTreeMap;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blocksworld::{parse_plan_text, DomainError, ParsedPlan};
use crate::gateway::GatewayError;
use crate::prompt::PromptError;

/// Human-written BlocksWorld insights, one numbered line each.
pub const BLOCKSWORLD_INSIGHTS: &str = include_str!("../../data/blocksworld_insights.txt");
/// Human-written TravelPlanner insights; shipped as text only.
pub const TRAVELPLANNER_INSIGHTS: &str = include_str!("../../data/travelplanner_insights.txt");

pub const DEFAULT_THRESHOLD: i64 = 5;
/// Votes given to reference insights so they clear the default threshold.
pub const REFERENCE_VOTES: i64 = DEFAULT_THRESHOLD + 1;

pub const CHOSEN_MARKER: &str = "[Chosen Insights]";
pub const ACTIONS_HEADER: &str = "Action on Current Insight Set:";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MemoryError {
    #[error("no insight with id {0}")]
    UnknownInsight(u64),
    #[error("insight content must be non-empty")]
    EmptyContent,
    #[error("malformed insight store: {0}")]
    Malformed(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("invalid learning configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Insight {
    pub id: u64,
    pub content: String,
    pub votes: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum InsightAction {
    Add(String),
    Edit(u64, String),
    Support(u64),
    Oppose(u64),
}

#[derive(Serialize, Deserialize)]
struct StoreFile {
    next_id: u64,
    insights: Vec<Insight>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InsightSet {
    insights: BTreeMap<u64, Insight>,
    next_id: u64,
}

impl Default for InsightSet {
    fn default() -> Self {
        Self { insights: BTreeMap::new(), next_id: 1 }
    }
}

impl InsightSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// The shipped BlocksWorld insights, each at [`REFERENCE_VOTES`].
    pub fn reference() -> Self {
        let mut set = Self::new();
        for line in BLOCKSWORLD_INSIGHTS.lines().filter(|l| !l.trim().is_empty()) {
            let content = line.split_once(". ").map_or(line, |(_, rest)| rest).trim();
            let id = set.insert(content).expect("shipped insights are non-empty");
            set.insights.get_mut(&id).expect("just inserted").votes = REFERENCE_VOTES;
        }
        set
    }

    pub fn len(&self) -> usize {
        self.insights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.insights.is_empty()
    }

    pub fn next_id(&self) -> u64 {
        self.next_id
    }

    pub fn get(&self, id: u64) -> Option<&Insight> {
        self.insights.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Insight> {
        self.insights.values()
    }

    fn insert(&mut self, content: &str) -> Result<u64, MemoryError> {
        let content = content.trim();
        if content.is_empty() {
            return Err(MemoryError::EmptyContent);
        }
        let id = self.next_id;
        self.insights.insert(id, Insight { id, content: content.into(), votes: 1 });
        self.next_id += 1;
        Ok(id)
    }

    /// Applies one action in place.
    pub fn apply(&mut self, action: &InsightAction) -> Result<(), MemoryError> {
        match action {
            InsightAction::Add(content) => {
                self.insert(content)?;
            }
            InsightAction::Edit(id, content) => {
                let content = content.trim();
                if content.is_empty() {
                    return Err(MemoryError::EmptyContent);
                }
                self.insights.get_mut(id).ok_or(MemoryError::UnknownInsight(*id))?.content = content.into();
            }
            InsightAction::Support(id) => {
                self.insights.get_mut(id).ok_or(MemoryError::UnknownInsight(*id))?.votes += 1;
            }
            InsightAction::Oppose(id) => {
                self.insights.get_mut(id).ok_or(MemoryError::UnknownInsight(*id))?.votes -= 1;
            }
        }
        Ok(())
    }

    /// Insights with votes strictly above `threshold`, in id order.
    pub fn visible(&self, threshold: i64) -> Vec<&Insight> {
        self.insights.values().filter(|i| i.votes > threshold).collect()
    }

    /// Prompt lines "id. content [votes]" for the visible insights.
    pub fn format_visible(&self, threshold: i64) -> Vec<String> {
        self.visible(threshold).into_iter().map(format_insight).collect()
    }

    pub fn format_all(&self) -> Vec<String> {
        self.insights.values().map(format_insight).collect()
    }

    pub fn to_json(&self) -> String {
        let file = StoreFile { next_id: self.next_id, insights: self.insights.values().cloned().collect() };
        let mut out = serde_json::to_string_pretty(&file).expect("store serializes");
        out.push('\n');
        out
    }

    pub fn from_json(text: &str) -> Result<Self, MemoryError> {
        let file: StoreFile = serde_json::from_str(text).map_err(|e| MemoryError::Malformed(e.to_string()))?;
        let mut insights = BTreeMap::new();
        let mut last = 0;
        for ins in file.insights {
            if ins.id <= last || ins.id >= file.next_id {
                return Err(MemoryError::Malformed(format!(
                    "insight id {} out of order or not below next_id {}",
                    ins.id, file.next_id
                )));
            }
            if ins.content.trim().is_empty() {
                return Err(MemoryError::EmptyContent);
            }
            last = ins.id;
            insights.insert(ins.id, ins);
        }
        Ok(Self { insights, next_id: file.next_id.max(1) })
    }
}

fn format_insight(i: &Insight) -> String {
    format!("{}. {} [{}]", i.id, i.content, i.votes)
}

/// Functional form of [`InsightSet::apply`].
pub fn apply_action(set: &InsightSet, action: &InsightAction) -> Result<InsightSet, MemoryError> {
    let mut next = set.clone();
    next.apply(action)?;
    Ok(next)
}

static ACTION_LINE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)^\s*(?:[-*]\s*)?\[(add|edit|support|oppose)\]\s*(?:\[insight\s*(\d*)\])?\s*(?::\s*(.*?))?\s*$")
        .unwrap()
});

/// Extracts insight actions from a reflection response.
///
/// Reads after the last action header when present and stops at
/// `[Finished]`. Returns the actions in order and the number of non-blank
/// lines that were not valid actions.
pub fn parse_insight_actions(text: &str) -> (Vec<InsightAction>, usize) {
    let region = text.rfind(ACTIONS_HEADER).map_or(text, |i| &text[i + ACTIONS_HEADER.len()..]);
    let mut actions = Vec::new();
    let mut skipped = 0;
    for line in region.lines() {
        if line.trim().is_empty() {
            continue;
        }
        if line.trim().eq_ignore_ascii_case("[finished]") {
            break;
        }
        let Some(c) = ACTION_LINE.captures(line) else {
            skipped += 1;
            continue;
        };
        let id = c.get(2).and_then(|m| m.as_str().parse::<u64>().ok());
        let content = c.get(3).map(|m| m.as_str().trim()).unwrap_or("");
        let action = match (c[1].to_ascii_lowercase().as_str(), id) {
            ("add", _) if !content.is_empty() => Some(InsightAction::Add(content.into())),
            ("edit", Some(id)) if !content.is_empty() => Some(InsightAction::Edit(id, content.into())),
            ("support", Some(id)) => Some(InsightAction::Support(id)),
            ("oppose", Some(id)) => Some(InsightAction::Oppose(id)),
            _ => None,
        };
        match action {
            Some(a) => actions.push(a),
            None => skipped += 1,
        }
    }
    (actions, skipped)
}

/// A planning answer split into chosen insights and the plan.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InferenceResponse {
    pub chosen: Vec<u64>,
    pub plan: ParsedPlan,
}

static NUMBER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\d+").unwrap());

/// Splits a memory-augmented planning answer. Plan step spans refer to
/// `text`.
pub fn parse_inference_response(text: &str) -> Result<InferenceResponse, DomainError> {
    let lower = text.to_ascii_lowercase();
    let chosen_at = lower.find(&CHOSEN_MARKER.to_ascii_lowercase());
    let plan_at = lower.rfind("[plan]");
    let (chosen, plan_region) = match (chosen_at, plan_at) {
        (Some(c), Some(p)) if c < p => {
            let section = &text[c + CHOSEN_MARKER.len()..p];
            let mut ids: Vec<u64> = Vec::new();
            for m in NUMBER.find_iter(section) {
                if let Ok(id) = m.as_str().parse() {
                    if !ids.contains(&id) {
                        ids.push(id);
                    }
                }
            }
            (ids, text)
        }
        (Some(c), Some(_)) => {
            tracing::warn!("chosen insights follow the plan; ignoring them");
            (Vec::new(), &text[..c])
        }
        _ => (Vec::new(), text),
    };
    Ok(InferenceResponse { chosen, plan: parse_plan_text(plan_region)? })
}
