use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::eval::{failure_label, parse_output, read_cached, record_key};
use super::{load_dataset, sample_instances, split_dataset, write_atomic, ExperimentConfig, HarnessError};
use crate::attribution::{
    attribution_matrix, build_mask, component_scores, horizon_curve, normalize, pairwise_matrix, write_matrix_csv,
    AttributionError, NormDimension, PlanDomain, Space,
};
use crate::blocksworld::Instance;
use crate::gateway::{Gateway, ScoreRequest};
use crate::prompt::{blocksworld_prompt, SegmentId, SegmentKind};
use crate::util::parallel_map;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonPoint {
    pub step: usize,
    pub mean_attr: f64,
    pub n_tokens: usize,
    pub n_instances: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseCell {
    pub row: SegmentId,
    pub action: String,
    pub step: usize,
    pub value: f64,
}

/// Per-instance outcome of an attribution study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRecord {
    pub id: String,
    pub plan_text: Option<String>,
    pub error: Option<String>,
    pub kept_tokens: usize,
    pub component_scores: Vec<(SegmentId, f64)>,
    /// Question attribution per step, one point per instance.
    pub horizon: Vec<HorizonPoint>,
    /// Normalized pairwise cells; empty unless fine-grained.
    pub pairwise: Vec<PairwiseCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub records: Vec<StudyRecord>,
    pub component_scores: Vec<(SegmentId, f64)>,
    pub horizon: Vec<HorizonPoint>,
    pub pairwise: Vec<PairwiseCell>,
    pub space: Space,
    pub norm: NormDimension,
}

fn sanitize(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

fn study_instance(
    gateway: &Gateway,
    config: &ExperimentConfig,
    insights: Option<&[String]>,
    inst: &Instance,
) -> Result<(StudyRecord, bool), HarnessError> {
    let mut record = StudyRecord {
        id: inst.id.clone(),
        plan_text: None,
        error: None,
        kept_tokens: 0,
        component_scores: Vec::new(),
        horizon: Vec::new(),
        pairwise: Vec::new(),
    };
    let prompt = blocksworld_prompt(inst, config.with_constraints, insights, config.fine_grained)?;
    let text = match gateway.generate(prompt.rendered(), config.max_tokens) {
        Ok(t) => t,
        Err(e) => {
            record.error = Some(failure_label(&e));
            return Ok((record, false));
        }
    };
    record.plan_text = Some(text.clone());
    if text.is_empty() {
        record.error = Some("EmptyPlan: the model produced no text".into());
        return Ok((record, true));
    }
    let parsed = match parse_output(&text, insights.is_some()) {
        Ok(p) => p,
        Err(e) => {
            record.error = Some(format!("EmptyPlan: {e}"));
            return Ok((record, true));
        }
    };
    let scored = (|| -> Result<_, AttributionError> {
        let baseline = gateway.score(&ScoreRequest::new(prompt.rendered(), text.as_str()))?;
        let mask = build_mask(&baseline, &text, PlanDomain::BlocksWorld(&parsed))?;
        attribution_matrix(gateway, &prompt, &text, &mask, config.space)
    })();
    let m = match scored {
        Ok(m) => m,
        Err(AttributionError::Gateway(e)) => {
            record.error = Some(failure_label(&e));
            return Ok((record, false));
        }
        Err(e) => {
            record.error = Some(e.to_string());
            return Ok((record, true));
        }
    };
    write_matrix_csv(&m, &config.out.join("matrices").join(format!("{}.csv", sanitize(&inst.id))), config.norm)?;

    record.kept_tokens = m.tokens.len();
    record.component_scores = component_scores(&m);
    let question = SegmentId::whole(SegmentKind::Question);
    if let Ok(curve) = horizon_curve(&m, &question) {
        record.horizon = curve
            .into_iter()
            .map(|(step, mean_attr)| HorizonPoint {
                step,
                mean_attr,
                n_tokens: m.tokens.iter().filter(|t| t.step == step).count(),
                n_instances: 1,
            })
            .collect();
    }
    if config.fine_grained {
        let p = pairwise_matrix(&m)?;
        let norm = normalize(&p.values, config.norm);
        for (row, values) in p.rows.iter().zip(&norm.values) {
            for (col, value) in p.cols.iter().zip(values) {
                record.pairwise.push(PairwiseCell {
                    row: *row,
                    action: col.kind.clone(),
                    step: col.step,
                    value: *value,
                });
            }
        }
    }
    Ok((record, true))
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Folds per-instance records in id order into the study aggregates.
pub fn aggregate(mut records: Vec<StudyRecord>, space: Space, norm: NormDimension) -> StudyResult {
    records.sort_by(|a, b| a.id.cmp(&b.id));
    let ok: Vec<&StudyRecord> = records.iter().filter(|r| r.error.is_none()).collect();

    let mut scores: BTreeMap<SegmentId, Vec<f64>> = BTreeMap::new();
    let mut horizon: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    let mut pairs: BTreeMap<(SegmentId, usize, String), Vec<f64>> = BTreeMap::new();
    for r in &ok {
        for (id, s) in &r.component_scores {
            scores.entry(*id).or_default().push(*s);
        }
        for p in &r.horizon {
            let e = horizon.entry(p.step).or_default();
            e.0.push(p.mean_attr);
            e.1 += p.n_tokens;
        }
        for c in &r.pairwise {
            pairs.entry((c.row, c.step, c.action.clone())).or_default().push(c.value);
        }
    }
    StudyResult {
        component_scores: scores.into_iter().map(|(id, v)| (id, mean(&v))).collect(),
        horizon: horizon
            .into_iter()
            .map(|(step, (v, n_tokens))| HorizonPoint { step, mean_attr: mean(&v), n_tokens, n_instances: v.len() })
            .collect(),
        pairwise: pairs
            .into_iter()
            .map(|((row, step, action), v)| PairwiseCell { row, action, step, value: mean(&v) })
            .collect(),
        records,
        space,
        norm,
    }
}

/// Attributes the model's own plans on a seeded sample of the validation
/// split. Per-instance results are stored and reused on rerun.
pub fn run_attribution_study(config: &ExperimentConfig, gateway: &Gateway) -> Result<StudyResult, HarnessError> {
    config.check()?;
    let data = load_dataset(&config.dataset)?;
    let (_, validation) = split_dataset(&data, config.seed, config.train_size, config.validation_size)?;
    let sample = sample_instances(&validation, config.sample_cap, config.seed);
    let insights = config.insight_lines()?;
    let cache = config.cache_dir("attribution")?;
    let records = parallel_map(&sample, gateway.parallelism(), |inst| {
        let path = cache.join(format!("{}.json", record_key(&inst.id)));
        if let Some(rec) = read_cached::<StudyRecord>(&path) {
            if rec.id == inst.id {
                return Ok(rec);
            }
        }
        let (rec, cacheable) = study_instance(gateway, config, insights.as_deref(), inst)?;
        if cacheable {
            write_atomic(&path, serde_json::to_string(&rec).expect("record serializes").as_bytes())?;
        } else {
            tracing::warn!(instance = %inst.id, error = ?rec.error, "instance not attributed");
        }
        Ok(rec)
    })
    .into_iter()
    .collect::<Result<Vec<_>, HarnessError>>()?;
    Ok(aggregate(records, config.space, config.norm))
}
