use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{load_dataset, split_dataset, write_atomic, ExperimentConfig, HarnessError};
use crate::blocksworld::{parse_plan_text, solve_bfs, validate_plan, DomainError, Instance, ParsedPlan};
use crate::gateway::{Gateway, GatewayError};
use crate::memory::parse_inference_response;
use crate::prompt::blocksworld_prompt;
use crate::util::{content_hash, parallel_map};

/// Upper edges of the optimal-length bins.
pub const STEP_BINS: [usize; 6] = [2, 4, 6, 8, 10, 12];

/// Bin of an optimal plan length: rounded up to even, clamped to 2..=12.
pub fn accuracy_bin(optimal_length: usize) -> usize {
    (optimal_length + optimal_length % 2).clamp(2, 12)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub id: String,
    pub optimal_length: Option<usize>,
    pub bin: usize,
    pub output: Option<String>,
    pub plan_steps: usize,
    pub correct: bool,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinStat {
    pub bin: usize,
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub records: Vec<InstanceRecord>,
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub bins: Vec<BinStat>,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

impl EvalResult {
    pub fn from_records(mut records: Vec<InstanceRecord>) -> Self {
        records.sort_by(|a, b| a.id.cmp(&b.id));
        let total = records.len();
        let correct = records.iter().filter(|r| r.correct).count();
        let bins = STEP_BINS
            .iter()
            .map(|&bin| {
                let in_bin: Vec<_> = records.iter().filter(|r| r.bin == bin).collect();
                let c = in_bin.iter().filter(|r| r.correct).count();
                BinStat { bin, total: in_bin.len(), correct: c, accuracy: ratio(c, in_bin.len()) }
            })
            .collect();
        Self { records, total, correct, accuracy: ratio(correct, total), bins }
    }
}

pub(crate) fn parse_output(text: &str, with_memory: bool) -> Result<ParsedPlan, DomainError> {
    if with_memory {
        parse_inference_response(text).map(|r| r.plan)
    } else {
        parse_plan_text(text)
    }
}

pub(crate) fn failure_label(e: &GatewayError) -> String {
    let kind = match e {
        GatewayError::Transport(_) => "TransportError",
        GatewayError::BackendRefused { .. } => "BackendRefused",
        GatewayError::ProtocolViolation(_) => "ProtocolViolation",
        GatewayError::InvalidRequest(_) => "InvalidRequest",
    };
    format!("{kind}: {e}")
}

pub(crate) fn record_key(id: &str) -> String {
    hex::encode(&content_hash(&[id.as_bytes()])[..12])
}

fn evaluate_instance(
    gateway: &Gateway,
    config: &ExperimentConfig,
    insights: Option<&[String]>,
    inst: &Instance,
) -> Result<(InstanceRecord, bool), HarnessError> {
    let optimal_length = solve_bfs(inst, 64).map(|p| p.len());
    let mut record = InstanceRecord {
        id: inst.id.clone(),
        optimal_length,
        // unsolvable instances land in the last bin so bins still partition
        bin: optimal_length.map_or(12, accuracy_bin),
        output: None,
        plan_steps: 0,
        correct: false,
        failure: None,
    };
    let prompt = blocksworld_prompt(inst, config.with_constraints, insights, false)?;
    let text = match gateway.generate(prompt.rendered(), config.max_tokens) {
        Ok(t) => t,
        Err(e) => {
            record.failure = Some(failure_label(&e));
            return Ok((record, false));
        }
    };
    match parse_output(&text, insights.is_some()) {
        Ok(parsed) => {
            let report = validate_plan(inst, &parsed.plan);
            record.plan_steps = parsed.plan.len();
            record.correct = report.ok && report.goal_satisfied;
            if !record.correct {
                record.failure = Some(report.summary(&parsed.plan));
            }
        }
        Err(e @ DomainError::EmptyPlan { .. }) => record.failure = Some(format!("EmptyPlan: {e}")),
        Err(e) => record.failure = Some(e.to_string()),
    }
    record.output = Some(text);
    Ok((record, true))
}

/// Plans, parses and validates every validation instance. Finished
/// instances are stored under the output directory and reused on rerun.
pub fn run_planning_eval(config: &ExperimentConfig, gateway: &Gateway) -> Result<EvalResult, HarnessError> {
    config.check()?;
    let data = load_dataset(&config.dataset)?;
    let (_, validation) = split_dataset(&data, config.seed, config.train_size, config.validation_size)?;
    let insights = config.insight_lines()?;
    let cache = config.cache_dir("eval")?;
    let records = parallel_map(&validation, gateway.parallelism(), |inst| {
        let path = cache.join(format!("{}.json", record_key(&inst.id)));
        if let Some(rec) = read_cached::<InstanceRecord>(&path) {
            if rec.id == inst.id {
                return Ok(rec);
            }
        }
        let (rec, cacheable) = evaluate_instance(gateway, config, insights.as_deref(), inst)?;
        if cacheable {
            write_atomic(&path, serde_json::to_string(&rec).expect("record serializes").as_bytes())?;
        }
        Ok(rec)
    })
    .into_iter()
    .collect::<Result<Vec<_>, HarnessError>>()?;
    Ok(EvalResult::from_records(records))
}

pub(crate) fn read_cached<T: for<'de> Deserialize<'de>>(path: &Path) -> Option<T> {
    let text = fs::read_to_string(path).ok()?;
    serde_json::from_str(&text).ok()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub condition: String,
    pub accuracy: f64,
}

/// Accuracy with and without the constraint descriptions.
pub fn run_ablation(config: &ExperimentConfig, gateway: &Gateway) -> Result<Vec<AblationRow>, HarnessError> {
    let mut rows = Vec::new();
    for (condition, with) in [("with_constraints", true), ("without_constraints", false)] {
        let cfg = ExperimentConfig { with_constraints: with, ..config.clone() };
        rows.push(AblationRow { condition: condition.into(), accuracy: run_planning_eval(&cfg, gateway)?.accuracy });
    }
    Ok(rows)
}

/// One table row: model name, then accuracy in percent with and without
/// constraints.
pub fn format_ablation_row(model: &str, with_pct: f64, without_pct: f64) -> String {
    format!("{model} {with_pct:.1} / {without_pct:.1}")
}
