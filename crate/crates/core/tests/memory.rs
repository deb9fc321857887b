use std::sync::{Arc, Mutex};

use planattr::blocksworld::generate_instance;
use planattr::gateway::{Backend, Gateway, GatewayError, RetryPolicy, TokenScores};
use planattr::memory::{
    apply_action, learn_loop, parse_insight_actions, InsightAction, InsightSet, LearnConfig, MemoryMode,
};
use proptest::prelude::*;

/// Fails every plan and answers reflections with a fixed text.
struct Scripted {
    reflection: String,
    prompts: Mutex<Vec<String>>,
}

impl Backend for Scripted {
    fn generate(&self, prompt: &str, _: usize) -> Result<String, GatewayError> {
        self.prompts.lock().unwrap().push(prompt.to_string());
        if prompt.contains("Legal Action on Current Insight Set") {
            Ok(self.reflection.clone())
        } else {
            Ok("[Chosen Insights] 1\n[Plan]\n1. put down the red block".into())
        }
    }
    fn score(&self, _: &str, _: &str) -> Result<TokenScores, GatewayError> {
        Err(GatewayError::InvalidRequest("unused".into()))
    }
}

fn run(mode: MemoryMode, reflection: &str, rounds: usize, start: InsightSet) -> (InsightSet, Vec<String>) {
    let backend = Arc::new(Scripted { reflection: reflection.into(), prompts: Mutex::new(Vec::new()) });
    let gw = Gateway::new(backend.clone(), 2, false, RetryPolicy { attempts: 1, initial_backoff_ms: 1 });
    let train = vec![generate_instance(3, 4, 2).unwrap()];
    let cfg = LearnConfig { mode, rounds, ..LearnConfig::default() };
    let (set, transcript) = learn_loop(&gw, &train, &cfg, start).unwrap();
    assert!(transcript.entries.iter().all(|e| !e.plan_valid));
    let prompts = backend.prompts.lock().unwrap().clone();
    (set, prompts)
}

fn one_insight() -> InsightSet {
    apply_action(&InsightSet::new(), &InsightAction::Add("check the hand".into())).unwrap()
}

#[test]
fn repeated_oppose_goes_negative() {
    let (set, _) = run(
        MemoryMode::BehavioralCloning,
        "Action on Current Insight Set:\n[Oppose] [Insight 1]\n[Finished]",
        3,
        one_insight(),
    );
    assert_eq!(set.get(1).unwrap().votes, -2);
}

#[test]
fn no_actions_leave_set_unchanged() {
    let start = one_insight();
    let (set, _) = run(MemoryMode::OracleFeedback, "I have nothing to add.", 2, start.clone());
    assert_eq!(set, start);
}

#[test]
fn reflection_prompts_carry_history() {
    let (_, prompts) = run(MemoryMode::BehavioralCloning, "[Add] [Insight 7]: stack last", 3, InsightSet::new());
    let reflections: Vec<&String> = prompts.iter().filter(|p| p.contains("Successful Plan:")).collect();
    assert_eq!(reflections.len(), 3);
    assert!(reflections[2].contains("Plan 3:") && reflections[2].contains("Plan 1:"));
    assert!(reflections[2].contains("1. stack last [1]") && reflections[2].contains("2. stack last [1]"));
    let (_, of) = run(MemoryMode::OracleFeedback, "", 1, InsightSet::new());
    assert!(of.iter().any(|p| p.contains("Evaluation Results:\nPlan 1:")));
    assert!(!of.iter().any(|p| p.contains("Successful Plan:")));
}

#[test]
fn reference_mode_loads_shipped_set() {
    let (set, prompts) = run(MemoryMode::Reference, "", 1, InsightSet::new());
    assert_eq!(set, InsightSet::reference());
    assert!(set.iter().all(|i| i.votes == 6));
    assert!(prompts.is_empty());
}

fn action_strategy() -> impl Strategy<Value = (u8, u64, String)> {
    (0u8..4, 1u64..12, "[a-z]{1,8}")
}

fn build(ops: &[(u8, u64, String)]) -> (InsightSet, Vec<InsightAction>) {
    let mut set = InsightSet::new();
    let mut applied = Vec::new();
    for (kind, id, text) in ops {
        let action = match kind {
            0 => InsightAction::Add(text.clone()),
            1 => InsightAction::Edit(*id, text.clone()),
            2 => InsightAction::Support(*id),
            _ => InsightAction::Oppose(*id),
        };
        if set.apply(&action).is_ok() {
            applied.push(action);
        }
    }
    (set, applied)
}

proptest! {
    #[test]
    fn votes_follow_supports_minus_opposes(ops in prop::collection::vec(action_strategy(), 1..200)) {
        let (set, applied) = build(&ops);
        for ins in set.iter() {
            let sup = applied.iter().filter(|a| **a == InsightAction::Support(ins.id)).count() as i64;
            let opp = applied.iter().filter(|a| **a == InsightAction::Oppose(ins.id)).count() as i64;
            prop_assert_eq!(ins.votes, 1 + sup - opp);
        }
    }

    #[test]
    fn actions_leave_other_insights_alone(ops in prop::collection::vec(action_strategy(), 1..60), target in 1u64..12, kind in 1u8..4) {
        let (set, _) = build(&ops);
        let action = match kind {
            1 => InsightAction::Edit(target, "changed".into()),
            2 => InsightAction::Support(target),
            _ => InsightAction::Oppose(target),
        };
        if let Ok(next) = apply_action(&set, &action) {
            for ins in set.iter().filter(|i| i.id != target) {
                prop_assert_eq!(next.get(ins.id), Some(ins));
            }
        }
    }

    #[test]
    fn support_never_hides(ops in prop::collection::vec(action_strategy(), 1..60), target in 1u64..12, threshold in -3i64..8) {
        let (set, _) = build(&ops);
        if let Ok(next) = apply_action(&set, &InsightAction::Support(target)) {
            let before: Vec<u64> = set.visible(threshold).iter().map(|i| i.id).collect();
            let after: Vec<u64> = next.visible(threshold).iter().map(|i| i.id).collect();
            prop_assert!(before.iter().all(|id| after.contains(id)));
        }
    }

    #[test]
    fn store_round_trips(ops in prop::collection::vec(action_strategy(), 0..60)) {
        let (set, _) = build(&ops);
        let text = set.to_json();
        let back = InsightSet::from_json(&text).unwrap();
        prop_assert_eq!(back.to_json(), text);
        prop_assert_eq!(back, set);
    }

    #[test]
    fn action_parser_never_panics(text in "\\PC{0,200}") {
        let (_, skipped) = parse_insight_actions(&text);
        prop_assert!(skipped <= text.lines().count());
    }
}
