use std::collections::BTreeSet;
use std::ops::Range;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::state::{Action, BlockId, GoalAtom, Instance, Plan, WorldState};
use super::DomainError;

/// Marker that opens the plan section of a model response.
pub const PLAN_MARKER: &str = "[Plan]";

const STATEMENT_HEAD: &str = "[STATEMENT]\nAs initial conditions I have that, ";
const GOAL_HEAD: &str = ".\nMy goal is to have that ";

/// Textual rendering of an instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceText {
    /// The full statement; this is the prompt's question segment.
    pub question: String,
    /// Comma-joined facts of the initial state.
    pub state_description: String,
}

fn join_facts(facts: &[String]) -> String {
    match facts {
        [] => String::new(),
        [only] => only.clone(),
        [init @ .., last] => format!("{} and {last}", init.join(", ")),
    }
}

/// Every derivable fact: clear blocks, hand status, stacking, table.
pub fn describe_state(state: &WorldState) -> String {
    let mut facts = Vec::new();
    for b in state.blocks() {
        if state.is_clear(b) {
            facts.push(format!("the {b} block is clear"));
        }
    }
    match &state.holding {
        None => facts.push("the hand is empty".to_string()),
        Some(h) => facts.push(format!("the hand is holding the {h} block")),
    }
    for (a, b) in &state.on {
        facts.push(format!("the {a} block is on top of the {b} block"));
    }
    for a in &state.on_table {
        facts.push(format!("the {a} block is on the table"));
    }
    join_facts(&facts)
}

fn describe_goal(goal: &BTreeSet<GoalAtom>) -> String {
    let facts: Vec<String> = goal
        .iter()
        .map(|atom| match atom {
            GoalAtom::On { a, b } => format!("the {a} block is on top of the {b} block"),
            GoalAtom::OnTable { a } => format!("the {a} block is on the table"),
        })
        .collect();
    join_facts(&facts)
}

pub fn render_instance(instance: &Instance) -> InstanceText {
    let state_description = describe_state(&instance.initial);
    let question = format!("{STATEMENT_HEAD}{state_description}{GOAL_HEAD}{}.", describe_goal(&instance.goal));
    InstanceText { question, state_description }
}

static FACT_SPLIT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r", | and ").unwrap());
static FACT: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"^(?:the ([a-z][a-z0-9_]*) block is (clear|on the table|on top of the ([a-z][a-z0-9_]*) block)|the hand is (empty|holding the ([a-z][a-z0-9_]*) block))$",
    )
    .unwrap()
});

enum Fact {
    Clear(BlockId),
    OnTable(BlockId),
    On(BlockId, BlockId),
    HandEmpty,
    Holding(BlockId),
}

fn parse_facts(text: &str) -> Result<Vec<Fact>, DomainError> {
    FACT_SPLIT
        .split(text)
        .map(|raw| {
            let caps =
                FACT.captures(raw).ok_or_else(|| DomainError::StatementParse(format!("unrecognized fact {raw:?}")))?;
            let id = |i: usize| BlockId::new(&caps[i]);
            Ok(if let Some(kind) = caps.get(2) {
                match kind.as_str() {
                    "clear" => Fact::Clear(id(1)?),
                    "on the table" => Fact::OnTable(id(1)?),
                    _ => Fact::On(id(1)?, id(3)?),
                }
            } else if &caps[4] == "empty" {
                Fact::HandEmpty
            } else {
                Fact::Holding(id(5)?)
            })
        })
        .collect()
}

/// Parses a statement produced by [`render_instance`] back into an instance.
pub fn parse_instance_text(id: &str, question: &str) -> Result<Instance, DomainError> {
    let body = question
        .strip_prefix(STATEMENT_HEAD)
        .ok_or_else(|| DomainError::StatementParse("missing statement header".into()))?;
    let (state_text, goal_text) =
        body.split_once(GOAL_HEAD).ok_or_else(|| DomainError::StatementParse("missing goal sentence".into()))?;
    let goal_text = goal_text
        .strip_suffix('.')
        .ok_or_else(|| DomainError::StatementParse("goal sentence not terminated".into()))?;

    let mut state = WorldState::default();
    let mut clear = BTreeSet::new();
    for fact in parse_facts(state_text)? {
        match fact {
            Fact::Clear(b) => {
                clear.insert(b);
            }
            Fact::OnTable(b) => {
                state.on_table.insert(b);
            }
            Fact::On(a, b) => {
                state.on.insert(a, b);
            }
            Fact::HandEmpty => {}
            Fact::Holding(b) => state.holding = Some(b),
        }
    }
    state.check()?;
    let derived: BTreeSet<BlockId> = state.blocks().into_iter().filter(|b| state.is_clear(b)).cloned().collect();
    if derived != clear {
        return Err(DomainError::StatementParse("clear facts disagree with stacking".into()));
    }

    let mut goal = BTreeSet::new();
    for fact in parse_facts(goal_text)? {
        match fact {
            Fact::On(a, b) => goal.insert(GoalAtom::On { a, b }),
            Fact::OnTable(a) => goal.insert(GoalAtom::OnTable { a }),
            _ => return Err(DomainError::StatementParse("unsupported goal fact".into())),
        };
    }
    Instance::new(id, state, goal)
}

/// Locates a rendered statement anywhere inside a larger prompt.
pub fn find_instance_in_prompt(prompt: &str) -> Option<Instance> {
    let start = prompt.find(STATEMENT_HEAD)?;
    let rest = &prompt[start..];
    let goal_at = rest.find(GOAL_HEAD)?;
    let after_goal = goal_at + GOAL_HEAD.len();
    let end = after_goal + rest[after_goal..].find('.')? + 1;
    parse_instance_text("prompt", &rest[..end]).ok()
}

pub fn render_action(action: &Action) -> String {
    match action {
        Action::PickUp(b) => format!("pick up the {b} block"),
        Action::PutDown(b) => format!("put down the {b} block"),
        Action::Stack(a, b) => format!("stack the {a} block on top of the {b} block"),
        Action::Unstack(a, b) => format!("unstack the {a} block from on top of the {b} block"),
    }
}

/// Canonical plan text: the marker followed by numbered steps.
pub fn render_plan(plan: &Plan) -> String {
    let mut out = String::from(PLAN_MARKER);
    for (i, step) in plan.steps.iter().enumerate() {
        out.push_str(&format!("\n{}. {}", i + 1, render_action(step)));
    }
    out
}

/// A plan recovered from free text, with the byte span of each step's line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedPlan {
    pub plan: Plan,
    pub step_spans: Vec<Range<usize>>,
    pub skipped: usize,
}

static NUMBERING: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^(?:(?:step\s*)?\d+\s*[.):]\s*|[-*•]\s*)").unwrap());
static STEP: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"^(pick up|put down|stack|unstack)\s+the\s+([a-z][a-z0-9_]*)\s+block(?:\s+(from on top of|on top of|from|onto|on)\s+the\s+([a-z][a-z0-9_]*)\s+block)?$",
    )
    .unwrap()
});

fn parse_step(line: &str) -> Option<Action> {
    let lower = line.to_lowercase();
    let mut s = NUMBERING.replace(lower.trim(), "").into_owned();
    s = s.trim().trim_start_matches('(').to_string();
    let s = s.trim_end_matches(|c: char| ".;,)".contains(c) || c.is_whitespace());
    let caps = STEP.captures(s)?;
    let first = BlockId::new(&caps[2]).ok()?;
    let second = caps.get(4).and_then(|m| BlockId::new(m.as_str()).ok());
    let link = caps.get(3).map(|m| m.as_str());
    match (&caps[1], link, second) {
        ("pick up", None, None) => Some(Action::PickUp(first)),
        ("put down", None, None) => Some(Action::PutDown(first)),
        ("stack", Some("on top of" | "onto" | "on"), Some(b)) => Some(Action::Stack(first, b)),
        ("unstack", Some("from on top of" | "from"), Some(b)) => Some(Action::Unstack(first, b)),
        _ => None,
    }
}

/// Extracts a plan from model output.
///
/// Only the text after the last `[Plan]` marker is read (the whole text if
/// the marker is absent). Lines that do not match the step grammar are
/// skipped and counted.
pub fn parse_plan_text(text: &str) -> Result<ParsedPlan, DomainError> {
    let lower = text.to_ascii_lowercase();
    let marker = PLAN_MARKER.to_ascii_lowercase();
    let region_start = lower.rfind(&marker).map(|i| i + marker.len()).unwrap_or(0);

    let mut steps = Vec::new();
    let mut step_spans = Vec::new();
    let mut skipped = 0;
    let mut offset = region_start;
    for line in text[region_start..].split_inclusive('\n') {
        let line_start = offset;
        offset += line.len();
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        match parse_step(trimmed) {
            Some(action) => {
                let lead = line.len() - line.trim_start().len();
                let start = line_start + lead;
                steps.push(action);
                step_spans.push(start..start + trimmed.len());
            }
            None => skipped += 1,
        }
    }
    if steps.is_empty() {
        return Err(DomainError::EmptyPlan { skipped });
    }
    Ok(ParsedPlan { plan: Plan::new(steps), step_spans, skipped })
}
