use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{
    parse_inference_response, parse_insight_actions, InsightAction, InsightSet, MemoryError, DEFAULT_THRESHOLD,
};
use crate::blocksworld::{
    apply_action, describe_state, render_action, render_instance, render_plan, solve_bfs, validate_plan, Instance, Plan,
};
use crate::gateway::Gateway;
use crate::prompt::blocksworld_prompt;

pub const BEHAVIORAL_CLONING_TEMPLATE: &str = include_str!("../../templates/behavioral_cloning.txt");
pub const ORACLE_FEEDBACK_TEMPLATE: &str = include_str!("../../templates/oracle_feedback.txt");

const SOLVER_DEPTH: usize = 64;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryMode {
    /// No episodic memory in the prompt.
    #[default]
    None,
    /// Learn from failed plans next to the gold plan.
    BehavioralCloning,
    /// Learn from failed plans next to validator feedback.
    OracleFeedback,
    /// Fixed human-written insights.
    Reference,
}

impl fmt::Display for MemoryMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MemoryMode::None => "none",
            MemoryMode::BehavioralCloning => "behavioral_cloning",
            MemoryMode::OracleFeedback => "oracle_feedback",
            MemoryMode::Reference => "reference",
        })
    }
}

impl FromStr for MemoryMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(MemoryMode::None),
            "bc" | "behavioral_cloning" | "behavioral-cloning" => Ok(MemoryMode::BehavioralCloning),
            "of" | "oracle_feedback" | "oracle-feedback" => Ok(MemoryMode::OracleFeedback),
            "reference" => Ok(MemoryMode::Reference),
            _ => Err(format!("unknown memory mode {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnConfig {
    pub mode: MemoryMode,
    pub rounds: usize,
    pub threshold: i64,
    pub max_tokens: usize,
}

impl Default for LearnConfig {
    fn default() -> Self {
        Self { mode: MemoryMode::BehavioralCloning, rounds: 3, threshold: DEFAULT_THRESHOLD, max_tokens: 512 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub round: usize,
    pub instance_id: String,
    pub plan_valid: bool,
    pub actions: Vec<InsightAction>,
    /// Reflection lines that were not valid actions.
    pub skipped_lines: usize,
    /// Actions naming an insight that did not exist.
    pub rejected_actions: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LearnTranscript {
    pub entries: Vec<TranscriptEntry>,
}

/// Step-by-step execution of `plan`, ending at the first illegal action.
pub fn render_trajectory(instance: &Instance, plan: &Plan) -> String {
    let mut out = format!("Initial state: {}.\n", describe_state(&instance.initial));
    let mut state = instance.initial.clone();
    for (i, action) in plan.steps.iter().enumerate() {
        out.push_str(&format!("Step {}: {}\n", i + 1, render_action(action)));
        match apply_action(&state, action) {
            Ok(next) => {
                state = next;
                out.push_str(&format!("State: {}.\n", describe_state(&state)));
            }
            Err(e) => {
                out.push_str(&format!("Error: {e}\n"));
                return out;
            }
        }
    }
    if !instance.goal_satisfied(&state) {
        out.push_str("Error: the goal is not satisfied after the last step.\n");
    }
    out
}

struct Attempt {
    text: String,
    feedback: String,
    trajectory: String,
}

fn fill(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (k, v) in values {
        out = out.replace(&format!("{{{k}}}"), v);
    }
    out
}

fn numbered(attempts: &[Attempt], field: impl Fn(&Attempt) -> &str) -> String {
    attempts
        .iter()
        .enumerate()
        .map(|(i, a)| format!("Plan {}:\n{}", i + 1, field(a).trim_end()))
        .collect::<Vec<_>>()
        .join("\n\n")
}

fn attempt(instance: &Instance, text: &str) -> (bool, Attempt) {
    match parse_inference_response(text) {
        Ok(parsed) => {
            let report = validate_plan(instance, &parsed.plan.plan);
            let ok = report.ok && report.goal_satisfied;
            let trajectory = render_trajectory(instance, &parsed.plan.plan);
            (ok, Attempt { text: text.into(), feedback: report.summary(&parsed.plan.plan), trajectory })
        }
        Err(e) => (false, Attempt { text: text.into(), feedback: e.to_string(), trajectory: format!("Error: {e}\n") }),
    }
}

/// Learns insights from the agent's failures on `train`.
///
/// Each round plans every instance against the round's starting set,
/// asks for a reflection on each failure, then applies the proposed
/// actions in instance order. Per-instance failures are recorded in the
/// transcript and never abort the round.
pub fn learn_loop(
    gateway: &Gateway,
    train: &[Instance],
    config: &LearnConfig,
    mut set: InsightSet,
) -> Result<(InsightSet, LearnTranscript), MemoryError> {
    let mut transcript = LearnTranscript::default();
    let template = match config.mode {
        MemoryMode::None => return Ok((set, transcript)),
        MemoryMode::Reference => return Ok((InsightSet::reference(), transcript)),
        MemoryMode::BehavioralCloning => BEHAVIORAL_CLONING_TEMPLATE,
        MemoryMode::OracleFeedback => ORACLE_FEEDBACK_TEMPLATE,
    };
    if config.rounds == 0 {
        return Err(MemoryError::Config("rounds must be at least 1".into()));
    }
    let gold: Vec<Option<Plan>> = train.iter().map(|i| solve_bfs(i, SOLVER_DEPTH)).collect();
    let mut history: HashMap<&str, Vec<Attempt>> = HashMap::new();

    for round in 1..=config.rounds {
        let visible = set.format_visible(config.threshold);
        let prompts = train
            .iter()
            .map(|inst| blocksworld_prompt(inst, true, Some(&visible), false).map(|p| p.rendered().to_string()))
            .collect::<Result<Vec<_>, _>>()?;
        let plans = gateway.batch_generate(&prompts, config.max_tokens);

        let insight_block = set.format_all().join("\n");
        let mut reflections: Vec<(usize, Option<String>)> = Vec::new();
        let mut entries: Vec<TranscriptEntry> = Vec::new();
        for (idx, (inst, plan)) in train.iter().zip(plans).enumerate() {
            let mut entry = TranscriptEntry {
                round,
                instance_id: inst.id.clone(),
                plan_valid: false,
                actions: Vec::new(),
                skipped_lines: 0,
                rejected_actions: 0,
                error: None,
            };
            let text = match plan {
                Ok(t) => t,
                Err(e) => {
                    tracing::warn!(instance = %inst.id, error = %e, "planning call failed");
                    entry.error = Some(e.to_string());
                    entries.push(entry);
                    continue;
                }
            };
            let (ok, att) = attempt(inst, &text);
            entry.plan_valid = ok;
            entries.push(entry);
            if ok {
                continue;
            }
            let Some(gold_plan) = &gold[idx] else {
                entries.last_mut().expect("pushed above").error = Some("no ground-truth plan".into());
                continue;
            };
            let past = history.entry(inst.id.as_str()).or_default();
            past.push(att);
            let last = past.last().expect("just pushed");
            let task = render_instance(inst).question;
            let prompt = fill(
                template,
                &[
                    ("insight_set", &insight_block),
                    ("task", &task),
                    ("successful_plan", &render_plan(gold_plan)),
                    ("failed_plan", &numbered(past, |a| &a.text)),
                    ("eval_results", &numbered(past, |a| &a.feedback)),
                    ("trajectory", last.trajectory.trim_end()),
                ],
            );
            reflections.push((entries.len() - 1, Some(prompt)));
        }

        let reflection_prompts: Vec<String> = reflections.iter().filter_map(|(_, p)| p.clone()).collect();
        let responses = gateway.batch_generate(&reflection_prompts, config.max_tokens);
        for ((entry_idx, _), response) in reflections.iter().zip(responses) {
            let entry = &mut entries[*entry_idx];
            match response {
                Ok(text) => {
                    let (actions, skipped) = parse_insight_actions(&text);
                    entry.skipped_lines = skipped;
                    for a in &actions {
                        if let Err(e) = set.apply(a) {
                            tracing::warn!(instance = %entry.instance_id, error = %e, "insight action rejected");
                            entry.rejected_actions += 1;
                        }
                    }
                    entry.actions = actions;
                }
                Err(e) => {
                    tracing::warn!(instance = %entry.instance_id, error = %e, "reflection call failed");
                    entry.error = Some(e.to_string());
                }
            }
        }
        transcript.entries.extend(entries);
    }
    Ok((set, transcript))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocksworld::state::tests::sussman;
    use crate::blocksworld::{Action, BlockId};

    #[test]
    fn trajectory_stops_at_violation() {
        let inst = sussman();
        let b = |s: &str| BlockId::new(s).unwrap();
        let plan = Plan::new(vec![Action::PickUp(b("b")), Action::PickUp(b("a"))]);
        let t = render_trajectory(&inst, &plan);
        assert!(t.contains("Step 1: pick up the b block"));
        assert!(t.contains("Step 2"));
        assert!(t.trim_end().lines().last().unwrap().starts_with("Error:"));
    }

    #[test]
    fn fill_replaces_all_placeholders() {
        let out = fill(
            BEHAVIORAL_CLONING_TEMPLATE,
            &[("insight_set", "I"), ("task", "T"), ("successful_plan", "S"), ("failed_plan", "F"), ("trajectory", "R")],
        );
        assert!(!out.contains("{insight_set}") && !out.contains("{trajectory}"));
        let of = fill(ORACLE_FEEDBACK_TEMPLATE, &[("eval_results", "E")]);
        assert!(of.contains("Evaluation Results:\nE"));
    }

    #[test]
    fn modes_parse() {
        assert_eq!("bc".parse::<MemoryMode>(), Ok(MemoryMode::BehavioralCloning));
        assert_eq!("reference".parse::<MemoryMode>(), Ok(MemoryMode::Reference));
        assert!("x".parse::<MemoryMode>().is_err());
    }
}
