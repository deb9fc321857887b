//! Acceptance checks. Prints one PASS/FAIL/SKIP line per criterion and
//! exits non-zero if any criterion fails.

mod support;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use planattr::attribution::{
    attribution_matrix, build_mask, horizon_curve, normalize, NormDimension, PlanDomain, Space,
};
use planattr::blocksworld::{
    generate_dataset, generate_instance, parse_plan_text, solve_bfs, validate_plan, Action, BlockId, GoalAtom,
    Instance, Plan, Violation, WorldState,
};
use planattr::conformance::run_conformance;
use planattr::gateway::{
    BackendDescriptor, Gateway, LanguageModel, MockKind, MockModel, PlannerMock, ScoreRequest, Vocabulary,
    BACKEND_URL_ENV, EOS,
};
use planattr::harness::{
    emit_report, run_attribution_study, run_planning_eval, save_dataset, ExperimentConfig, ReportInputs,
};
use planattr::memory::{InsightAction, InsightSet, DEFAULT_THRESHOLD};
use planattr::prompt::{assemble, blocksworld_prompt, PermutationSpec, PlanningParts, SegmentId, SegmentKind};

use support::{gateway_over, keep_all, pin_target, plan_text};

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

const EXACT_TOL: f64 = 1e-9;

fn six_vocab() -> Vocabulary {
    Vocabulary::new(["a", "b", "c", "d", "e", "f"]).unwrap()
}

fn small_prompt(k: usize) -> planattr::prompt::SegmentedPrompt {
    let (ad, c, q) = (format!("Rule {k}."), format!("Limit {k}."), format!("Task {k}."));
    assemble(&PlanningParts { action_defs: &ad, constraints: &c, question: &q, insights: None }, false).unwrap()
}

fn attribution_exactness() -> Check {
    // hand-built single case: P(y1|X) = 0.9, P(y1|X without constraints) = 0.4
    let prompt = small_prompt(0);
    let without = prompt.permute(&PermutationSpec::segment(SegmentId::whole(SegmentKind::Constraints))).unwrap();
    let mut model = MockModel::new(six_vocab(), 0);
    model.set_override(prompt.rendered(), "", &[("c", 0.9), ("d", 0.1)]).unwrap();
    model.set_override(without.rendered(), "", &[("c", 0.4), ("d", 0.6)]).unwrap();
    let (gw, _) = gateway_over(model, true);
    let baseline = gw.score(&ScoreRequest::new(prompt.rendered(), "c")).unwrap();
    let m = attribution_matrix(&gw, &prompt, "c", &keep_all(&baseline), Space::Probability).unwrap();
    let s = m.row(&SegmentId::whole(SegmentKind::Constraints)).unwrap()[0];
    ensure((s - 0.5).abs() <= EXACT_TOL, format!("hand-built entry {s}, expected 0.5"))?;

    // 200 random tables, compared with direct evaluation of the table
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    let mut entries = 0usize;
    let mut model = MockModel::new(six_vocab(), 1);
    let mut table: HashMap<(String, String), HashMap<String, f64>> = HashMap::new();
    let mut cases = Vec::new();
    for k in 0..200 {
        let prompt = small_prompt(k + 1);
        let len = rng.random_range(4..=12);
        let target: String = (0..len).map(|_| ["a", "b", "c", "d", "e", "f"][rng.random_range(0..6)]).collect();
        let mut contexts = vec![prompt.rendered().to_string()];
        for id in prompt.segment_ids() {
            contexts.push(prompt.permute(&PermutationSpec::segment(id)).unwrap().rendered().to_string());
        }
        for ctx in &contexts {
            for j in 0..target.len() {
                let weights: Vec<f64> = (0..7).map(|_| rng.random_range(0.01..1.0)).collect();
                let total: f64 = weights.iter().sum();
                let names = ["a", "b", "c", "d", "e", "f", EOS];
                let dist: Vec<(&str, f64)> = names.iter().zip(&weights).map(|(n, w)| (*n, w / total)).collect();
                model.set_override(ctx, &target[..j], &dist).unwrap();
                table.insert(
                    (ctx.clone(), target[..j].to_string()),
                    dist.iter().map(|(n, p)| (n.to_string(), *p)).collect(),
                );
            }
        }
        cases.push((prompt, target, contexts));
    }
    let (gw, _) = gateway_over(model, true);
    for (prompt, target, contexts) in &cases {
        let baseline = gw.score(&ScoreRequest::new(prompt.rendered(), target.as_str())).unwrap();
        let mask = keep_all(&baseline);
        for space in [Space::Probability, Space::Logprob] {
            let m = attribution_matrix(&gw, prompt, target, &mask, space).unwrap();
            for (i, row) in m.values.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    let y = &target[j..j + 1];
                    let p_base = table[&(contexts[0].clone(), target[..j].to_string())][y];
                    let p_perm = table[&(contexts[i + 1].clone(), target[..j].to_string())][y];
                    let expected = match space {
                        Space::Probability => p_base - p_perm,
                        Space::Logprob => p_base.ln() - p_perm.ln(),
                    };
                    worst = worst.max((v - expected).abs());
                    entries += 1;
                }
            }
        }
    }
    let elapsed = started.elapsed();
    ensure(worst <= EXACT_TOL, format!("max abs error {worst:e} over {entries} entries"))?;
    ensure(elapsed < Duration::from_secs(60), format!("200-example study took {elapsed:?}"))?;
    Ok(format!(
        "max abs error {worst:.1e} over {entries} entries (tol {EXACT_TOL:e}); 200 examples in {:.2}s",
        elapsed.as_secs_f64()
    ))
}

fn zero_delta() -> Check {
    let mut rows = 0;
    for seed in 0..100u64 {
        let inst = generate_instance(2 + (seed as usize % 5), seed, 1).unwrap();
        let memory: Vec<String> = Vec::new();
        let (insights, empty_kind) = if seed % 2 == 0 {
            (None, SegmentKind::Constraints)
        } else {
            (Some(memory.as_slice()), SegmentKind::EpisodicMemory)
        };
        let with_constraints = empty_kind != SegmentKind::Constraints;
        let prompt = blocksworld_prompt(&inst, with_constraints, insights, false).unwrap();
        let target = plan_text(&["pick up the red block", "put down the red block"], 1 + seed as usize % 4);
        // no cache: both calls reach the model
        let (gw, _) = gateway_over(MockModel::new(Vocabulary::plan_words(), seed), false);
        let baseline = gw.score(&ScoreRequest::new(prompt.rendered(), target.as_str())).unwrap();
        let m = attribution_matrix(&gw, &prompt, &target, &keep_all(&baseline), Space::Probability).unwrap();
        let row = m.row(&SegmentId::whole(empty_kind)).map_err(|e| e.to_string())?;
        ensure(row.iter().all(|v| *v == 0.0), format!("seed {seed}: nonzero entry in {row:?}"))?;
        let others_nonzero = m.values.iter().flatten().any(|v| *v != 0.0);
        ensure(others_nonzero, format!("seed {seed}: whole matrix is zero, model ignores the prompt"))?;
        rows += 1;
    }
    Ok(format!("{rows} empty-segment rows exactly zero"))
}

fn normalization_contract() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    let mut zero_cases = 0;
    for k in 0..1000 {
        let rows = rng.random_range(1..8);
        let cols = rng.random_range(1..20);
        let zero = k % 50 == 0;
        let scale = 10f64.powi(rng.random_range(-6..4));
        let m: Vec<Vec<f64>> = (0..rows)
            .map(|_| (0..cols).map(|_| if zero { 0.0 } else { scale * rng.random_range(-1.0..1.0) }).collect())
            .collect();
        for dim in [NormDimension::Whole, NormDimension::PerRow] {
            let n = normalize(&m, dim);
            ensure(
                n.values.iter().flatten().all(|v| (-1.0..=1.0).contains(v)),
                format!("matrix {k}: entry outside [-1, 1]"),
            )?;
            if zero {
                ensure(n.values == m, format!("matrix {k}: all-zero matrix changed"))?;
                zero_cases += 1;
            } else {
                let groups: Vec<Vec<f64>> = match dim {
                    NormDimension::Whole => vec![n.values.iter().flatten().copied().collect()],
                    NormDimension::PerRow => n.values.clone(),
                };
                for (g, orig) in groups.iter().zip(m.iter().map(Some).chain(std::iter::repeat(None))) {
                    let nonzero = orig.is_none_or(|r| r.iter().any(|v| *v != 0.0));
                    if nonzero {
                        let max = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
                        worst = worst.max((max - 1.0).abs());
                    }
                }
            }
            for alpha in [0.5, 3.0] {
                let scaled: Vec<Vec<f64>> = m.iter().map(|r| r.iter().map(|v| v * alpha).collect()).collect();
                let ns = normalize(&scaled, dim);
                for (a, b) in ns.values.iter().flatten().zip(n.values.iter().flatten()) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
    }
    ensure(worst <= 1e-12, format!("max deviation {worst:e}"))?;
    Ok(format!(
        "1000 matrices x 2 dimensions, max deviation {worst:.1e} (tol 1e-12), {zero_cases} all-zero passthroughs"
    ))
}

/// Independent model for the oracle: each block's support (None = table)
/// plus the held block, indices into a sorted name list.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
struct OState {
    support: Vec<Option<usize>>,
    held: Option<usize>,
}

fn oracle_state(names: &[String], w: &WorldState) -> OState {
    let idx = |b: &BlockId| names.iter().position(|n| n == b.as_str()).unwrap();
    let mut support = vec![None; names.len()];
    for (a, b) in &w.on {
        support[idx(a)] = Some(idx(b));
    }
    OState { support, held: w.holding.as_ref().map(idx) }
}

fn oracle_successors(s: &OState) -> Vec<OState> {
    let n = s.support.len();
    let clear = |b: usize| s.held != Some(b) && !(0..n).any(|x| s.held != Some(x) && s.support[x] == Some(b));
    let mut out = Vec::new();
    match s.held {
        None => {
            // pick up from the table or unstack from the support
            for b in (0..n).filter(|b| clear(*b)) {
                let mut t = s.clone();
                t.held = Some(b);
                t.support[b] = None;
                out.push(t);
            }
        }
        Some(h) => {
            let mut down = s.clone();
            down.held = None;
            down.support[h] = None;
            out.push(down);
            for b in 0..n {
                if b != h && clear(b) {
                    let mut t = s.clone();
                    t.held = None;
                    t.support[h] = Some(b);
                    out.push(t);
                }
            }
        }
    }
    out
}

fn oracle_goal(names: &[String], goal: &BTreeSet<GoalAtom>, s: &OState) -> bool {
    let idx = |b: &BlockId| names.iter().position(|n| n == b.as_str()).unwrap();
    goal.iter().all(|g| match g {
        GoalAtom::On { a, b } => s.held != Some(idx(a)) && s.support[idx(a)] == Some(idx(b)),
        GoalAtom::OnTable { a } => s.held != Some(idx(a)) && s.support[idx(a)].is_none(),
    })
}

/// Optimal plan length by value iteration over the full reachable state
/// space.
fn oracle_optimal(inst: &Instance) -> Option<usize> {
    let names: Vec<String> = inst.blocks.iter().map(|b| b.as_str().to_string()).collect();
    let start = oracle_state(&names, &inst.initial);
    let mut states = vec![start.clone()];
    let mut seen: HashSet<OState> = HashSet::from([start]);
    let mut queue: VecDeque<usize> = VecDeque::from([0]);
    while let Some(i) = queue.pop_front() {
        for t in oracle_successors(&states[i]) {
            if seen.insert(t.clone()) {
                states.push(t);
                queue.push_back(states.len() - 1);
            }
        }
    }
    let index: HashMap<&OState, usize> = states.iter().enumerate().map(|(i, s)| (s, i)).collect();
    let succ: Vec<Vec<usize>> =
        states.iter().map(|s| oracle_successors(s).iter().map(|t| index[t]).collect()).collect();
    let mut value: Vec<usize> =
        states.iter().map(|s| if oracle_goal(&names, &inst.goal, s) { 0 } else { usize::MAX }).collect();
    loop {
        let mut changed = false;
        for i in 0..states.len() {
            let best = succ[i].iter().map(|j| value[*j]).min().unwrap_or(usize::MAX).saturating_add(1);
            if best < value[i] {
                value[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    (value[0] != usize::MAX).then_some(value[0])
}

fn solver_oracle() -> Check {
    let started = Instant::now();
    let mut count = 0;
    let mut by_len: BTreeMap<usize, usize> = BTreeMap::new();
    for n in 2..=5 {
        for seed in 0..80 {
            let inst = generate_instance(n, seed, 1).map_err(|e| e.to_string())?;
            let plan = solve_bfs(&inst, 64).ok_or(format!("{} unsolved", inst.id))?;
            let report = validate_plan(&inst, &plan);
            ensure(report.ok, format!("{}: solver plan invalid", inst.id))?;
            let optimum = oracle_optimal(&inst).ok_or(format!("{}: oracle finds no plan", inst.id))?;
            ensure(plan.len() == optimum, format!("{}: solver {} vs oracle {optimum}", inst.id, plan.len()))?;
            *by_len.entry(optimum).or_default() += 1;
            count += 1;
        }
    }
    let elapsed = started.elapsed();
    ensure(elapsed < Duration::from_secs(120), format!("took {elapsed:?}"))?;
    Ok(format!("{count} instances (2-5 blocks) optimal, lengths {by_len:?}, {:.2}s", elapsed.as_secs_f64()))
}

fn validator_coverage() -> Check {
    let b = |s: &str| BlockId::new(s).unwrap();
    let inst = |on: &[(&str, &str)], table: &[&str], holding: Option<&str>| {
        let mut w = WorldState::default();
        for (x, y) in on {
            w.on.insert(b(x), b(y));
        }
        for t in table {
            w.on_table.insert(b(t));
        }
        w.holding = holding.map(b);
        let goal = [GoalAtom::OnTable { a: b("a") }].into_iter().collect();
        Instance::new("fixture", w, goal).unwrap()
    };
    let stacked = inst(&[("a", "b")], &["b", "c"], None);
    let holding_a = inst(&[], &["b", "c"], Some("a"));
    let fixtures: Vec<(Violation, Instance, Vec<Action>, usize)> = vec![
        (
            Violation::HandNotEmpty,
            holding_a.clone(),
            vec![Action::PutDown(b("a")), Action::PickUp(b("b")), Action::PickUp(b("c"))],
            3,
        ),
        (Violation::NotClear, stacked.clone(), vec![Action::PickUp(b("b"))], 1),
        (
            Violation::NotOnTable,
            stacked.clone(),
            vec![Action::PickUp(b("c")), Action::PutDown(b("c")), Action::PickUp(b("a"))],
            3,
        ),
        (Violation::NotOnTop, stacked.clone(), vec![Action::Unstack(b("a"), b("c"))], 1),
        (Violation::NotHolding, stacked.clone(), vec![Action::PutDown(b("a"))], 1),
        (Violation::TargetNotClear, stacked.clone(), vec![Action::PickUp(b("c")), Action::Stack(b("c"), b("b"))], 2),
        (Violation::UnknownBlock, stacked, vec![Action::Unstack(b("a"), b("b")), Action::Stack(b("a"), b("zed"))], 2),
    ];
    let mut seen = BTreeSet::new();
    for (expected, instance, steps, index) in fixtures {
        let report = validate_plan(&instance, &Plan::new(steps));
        ensure(!report.ok, format!("{expected:?}: plan accepted"))?;
        ensure(report.violation == Some(expected), format!("{expected:?}: got {:?}", report.violation))?;
        ensure(
            report.failure_index == Some(index),
            format!("{expected:?}: index {:?} != {index}", report.failure_index),
        )?;
        seen.insert(format!("{expected:?}"));
    }
    ensure(seen.len() == Violation::ALL.len(), "not every label covered")?;
    Ok(format!("{} violation labels rejected at the expected step", seen.len()))
}

fn voting_protocol() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut set = InsightSet::new();
    let mut support: HashMap<u64, i64> = HashMap::new();
    let mut oppose: HashMap<u64, i64> = HashMap::new();
    let mut applied = 0;
    for k in 0..1000 {
        let top = set.next_id();
        let id = rng.random_range(1..top.max(2));
        let action = match rng.random_range(0..10) {
            0 | 1 => InsightAction::Add(format!("insight {k}")),
            2 => InsightAction::Edit(id, format!("edited {k}")),
            3..=6 => InsightAction::Support(id),
            _ => InsightAction::Oppose(id),
        };
        if set.apply(&action).is_ok() {
            applied += 1;
            match action {
                InsightAction::Support(i) => *support.entry(i).or_default() += 1,
                InsightAction::Oppose(i) => *oppose.entry(i).or_default() += 1,
                _ => {}
            }
        }
    }
    for ins in set.iter() {
        let expected = 1 + support.get(&ins.id).unwrap_or(&0) - oppose.get(&ins.id).unwrap_or(&0);
        ensure(ins.votes == expected, format!("insight {}: {} votes, expected {expected}", ins.id, ins.votes))?;
    }
    let mut t = InsightSet::new();
    t.apply(&InsightAction::Add("five".into())).unwrap();
    t.apply(&InsightAction::Add("six".into())).unwrap();
    for _ in 0..4 {
        t.apply(&InsightAction::Support(1)).unwrap();
    }
    for _ in 0..5 {
        t.apply(&InsightAction::Support(2)).unwrap();
    }
    let visible: Vec<u64> = t.visible(DEFAULT_THRESHOLD).iter().map(|i| i.id).collect();
    ensure(t.get(1).unwrap().votes == 5 && t.get(2).unwrap().votes == 6, "fixture votes")?;
    ensure(visible == vec![2], format!("visible {visible:?}"))?;
    let text = set.to_json();
    let again = InsightSet::from_json(&text).map_err(|e| e.to_string())?.to_json();
    ensure(again == text, "store bytes changed on round trip")?;
    Ok(format!(
        "{applied} applied actions over {} insights consistent; votes 5 hidden, 6 shown; round trip byte-identical",
        set.len()
    ))
}

const DECAY: f64 = 0.7;
const DECAY_SCALE: f64 = 0.6;
const FLOOR: f64 = 0.2;

fn horizon_decay() -> Check {
    let inst = generate_instance(3, 1, 1).unwrap();
    let prompt = blocksworld_prompt(&inst, true, None, false).unwrap();
    let no_question = prompt.permute(&PermutationSpec::segment(SegmentId::whole(SegmentKind::Question))).unwrap();
    let target = plan_text(&["pick up the red block", "stack the red block on top of the blue block"], 12);
    let parsed = parse_plan_text(&target).map_err(|e| e.to_string())?;
    let step_at = |offset: usize| parsed.step_spans.iter().position(|s| s.contains(&offset)).map(|i| i + 1);
    let mut model = MockModel::new(Vocabulary::plan_words(), 5);
    let starts: Vec<usize> = model.vocabulary().tokenize(&target).iter().map(|(r, _)| r.start).collect();
    pin_target(&mut model, prompt.rendered(), &target, |i, _| match step_at(starts[i]) {
        Some(k) => FLOOR + DECAY_SCALE * DECAY.powi(k as i32),
        None => 0.5,
    });
    pin_target(&mut model, no_question.rendered(), &target, |i, _| match step_at(starts[i]) {
        Some(_) => FLOOR,
        None => 0.5,
    });
    let (gw, _) = gateway_over(model, true);
    let baseline = gw.score(&ScoreRequest::new(prompt.rendered(), target.as_str())).unwrap();
    let mask = build_mask(&baseline, &target, PlanDomain::BlocksWorld(&parsed)).map_err(|e| e.to_string())?;
    let m = attribution_matrix(&gw, &prompt, &target, &mask, Space::Probability).map_err(|e| e.to_string())?;
    let curve = horizon_curve(&m, &SegmentId::whole(SegmentKind::Question)).map_err(|e| e.to_string())?;
    ensure(curve.keys().copied().eq(1..=12), format!("steps {:?}", curve.keys().collect::<Vec<_>>()))?;
    let mut worst: f64 = 0.0;
    for (k, v) in &curve {
        worst = worst.max((v - DECAY_SCALE * DECAY.powi(*k as i32)).abs());
    }
    let values: Vec<f64> = curve.values().copied().collect();
    ensure(values.windows(2).all(|w| w[1] < w[0]), "curve not strictly decreasing")?;
    ensure(worst <= 1e-9, format!("max deviation from closed form {worst:e}"))?;
    Ok(format!("12 steps strictly decreasing, max deviation from {DECAY_SCALE}*{DECAY}^k is {worst:.1e} (tol 1e-9)"))
}

fn call_count() -> Check {
    let mut details = Vec::new();
    for fine in [false, true] {
        let inst = generate_instance(4, 3, 2).unwrap();
        let insights = InsightSet::reference().format_visible(DEFAULT_THRESHOLD);
        let prompt = blocksworld_prompt(&inst, true, Some(&insights), fine).unwrap();
        let (gw, backend) = gateway_over(PlannerMock::new(2), true);
        let plan = gw.generate(prompt.rendered(), 400).unwrap();
        let parsed = parse_plan_text(&plan).map_err(|e| e.to_string())?;
        let baseline = gw.score(&ScoreRequest::new(prompt.rendered(), plan.as_str())).unwrap();
        let mask = build_mask(&baseline, &plan, PlanDomain::BlocksWorld(&parsed)).map_err(|e| e.to_string())?;
        backend.clear_log();
        // the baseline above is already cached, so start from a cold gateway
        let (gw, backend) = gateway_over(PlannerMock::new(2), true);
        let n = prompt.segment_ids().len();
        attribution_matrix(&gw, &prompt, &plan, &mask, Space::Probability).map_err(|e| e.to_string())?;
        let calls = backend.calls();
        let score_calls = backend.score_calls();
        let distinct: HashSet<(String, Option<String>)> =
            calls.iter().filter(|c| c.op == "score").map(|c| (c.prompt.clone(), c.target.clone())).collect();
        ensure(score_calls == n + 1, format!("{n} segments, {score_calls} score calls"))?;
        ensure(distinct.len() == n + 1, format!("{n} segments, {} distinct requests", distinct.len()))?;
        details.push(format!("{n} segments -> {score_calls} calls"));
    }
    Ok(details.join("; "))
}

fn report_bytes(dir: &Path) -> Bundle {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().to_string(), fs::read(&p).unwrap())
        })
        .collect()
}

type Bundle = BTreeMap<String, Vec<u8>>;

fn run_study(root: &Path, data_dir: &Path) -> Result<(Bundle, usize, f64), String> {
    let data = generate_dataset(600, 2, 6, 11, 1).map_err(|e| e.to_string())?;
    let path = data_dir.join("blocksworld.jsonl");
    save_dataset(&path, &data).map_err(|e| e.to_string())?;
    let mut cfg = ExperimentConfig::new(&path, BackendDescriptor::mock(MockKind::Planner, 3), root.join("out"));
    cfg.fine_grained = true;
    cfg.seed = 17;
    let gw: Gateway = cfg.backend.connect().map_err(|e| e.to_string())?;
    let eval = run_planning_eval(&cfg, &gw).map_err(|e| e.to_string())?;
    let study = run_attribution_study(&cfg, &gw).map_err(|e| e.to_string())?;
    let inputs = ReportInputs {
        config_hash: cfg.hash().map_err(|e| e.to_string())?,
        space: cfg.space,
        norm: cfg.norm,
        study: Some(&study),
        eval: Some(&eval),
        ablation: None,
        timestamps: None,
    };
    let bundle = emit_report(&cfg.out.join("report"), &inputs).map_err(|e| e.to_string())?;
    ensure(eval.total == 500, format!("validation size {}", eval.total))?;
    ensure(study.records.len() == 200, format!("sampled {}", study.records.len()))?;
    ensure(study.records.iter().all(|r| r.error.is_none()), "an instance failed attribution")?;
    Ok((report_bytes(&bundle.dir), study.records.len(), eval.accuracy))
}

fn end_to_end() -> Check {
    let started = Instant::now();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (first, n, acc) = run_study(a.path(), a.path())?;
    let (second, _, _) = run_study(b.path(), b.path())?;
    ensure(first.keys().eq(second.keys()), "different file sets")?;
    for (name, bytes) in &first {
        ensure(second[name] == *bytes, format!("{name} differs between runs"))?;
    }
    Ok(format!(
        "600 generated, 100/500 split, accuracy {acc:.3}, {n} attributed, {} report files byte-identical across runs, {:.1}s",
        first.len(),
        started.elapsed().as_secs_f64()
    ))
}

fn real_model_smoke() -> Option<Check> {
    let url = std::env::var(BACKEND_URL_ENV).ok().filter(|u| !u.is_empty())?;
    Some((|| {
        let report = run_conformance(&url, Duration::from_secs(120));
        ensure(report.passed(), format!("conformance failures: {:?}", report.failures()))?;
        let dir = tempfile::tempdir().unwrap();
        let data = generate_dataset(10, 2, 4, 21, 1).map_err(|e| e.to_string())?;
        let path = dir.path().join("d.jsonl");
        save_dataset(&path, &data).map_err(|e| e.to_string())?;
        let mut cfg = ExperimentConfig::new(&path, BackendDescriptor::remote(&url), dir.path().join("out"));
        cfg.train_size = 0;
        cfg.validation_size = 10;
        cfg.sample_cap = 10;
        let gw = cfg.backend.connect().map_err(|e| e.to_string())?;
        let study = run_attribution_study(&cfg, &gw).map_err(|e| e.to_string())?;
        let attributed = study.records.iter().filter(|r| r.error.is_none()).count();
        ensure(study.records.len() == 10, "study did not cover 10 instances")?;
        for r in &study.records {
            ensure(
                r.component_scores.iter().all(|(_, s)| s.abs() <= 100.0 + 1e-9),
                format!("{}: score out of range", r.id),
            )?;
        }
        Ok(format!("conformance passed; {attributed}/10 instances attributed"))
    })())
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("attribution-exactness", attribution_exactness),
        ("zero-delta", zero_delta),
        ("normalization-contract", normalization_contract),
        ("solver-oracle", solver_oracle),
        ("validator-coverage", validator_coverage),
        ("voting-protocol", voting_protocol),
        ("synthetic-horizon-decay", horizon_decay),
        ("call-count-economy", call_count),
        ("end-to-end-mock-study", end_to_end),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    match catch_unwind(AssertUnwindSafe(real_model_smoke)).unwrap_or_else(|_| Some(Err("panicked".into()))) {
        None => println!("SKIP real-model-smoke (optional): {BACKEND_URL_ENV} not set"),
        Some(Ok(detail)) => println!("PASS real-model-smoke (optional): {detail}"),
        Some(Err(detail)) => {
            failed += 1;
            println!("FAIL real-model-smoke (optional): {detail}");
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
