//! Experiment orchestration: dataset splits, planning accuracy, constraint
//! ablation, attribution studies, SFT export and report emission.

mod eval;
mod report;
mod study;

pub use eval::{
    accuracy_bin, format_ablation_row, run_ablation, run_planning_eval, AblationRow, BinStat, EvalResult,
    InstanceRecord, STEP_BINS,
};
pub use report::{emit_report, ReportBundle, ReportInputs};
pub use study::{run_attribution_study, HorizonPoint, PairwiseCell, StudyRecord, StudyResult};

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribution::{AttributionError, NormDimension, Space};
use crate::blocksworld::{render_plan, solve_bfs, DomainError, Instance};
use crate::gateway::{BackendDescriptor, GatewayError};
use crate::memory::{InsightSet, MemoryError, MemoryMode};
use crate::prompt::{blocksworld_prompt, PromptError};
use crate::util::content_hash;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HarnessError {
    #[error("need {needed} instances but only {available} are available")]
    InsufficientData { needed: usize, available: usize },
    #[error("solver found no plan for instance {0}")]
    SolverFailure(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Attribution(#[from] AttributionError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

pub(crate) fn io_err(path: &Path, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Io(format!("{}: {e}", path.display()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// JSON-lines instance file.
    pub dataset: PathBuf,
    pub backend: BackendDescriptor,
    #[serde(default)]
    pub memory: MemoryMode,
    /// Insight store used by the learned memory modes.
    #[serde(default)]
    pub insights: Option<PathBuf>,
    #[serde(default)]
    pub fine_grained: bool,
    #[serde(default = "default_cap")]
    pub sample_cap: usize,
    #[serde(default)]
    pub seed: u64,
    pub out: PathBuf,
    #[serde(default = "default_true")]
    pub with_constraints: bool,
    #[serde(default)]
    pub space: Space,
    /// Normalization of pairwise matrices before aggregation.
    #[serde(default)]
    pub norm: NormDimension,
    #[serde(default = "default_threshold")]
    pub threshold: i64,
    #[serde(default = "default_train")]
    pub train_size: usize,
    #[serde(default = "default_validation")]
    pub validation_size: usize,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: usize,
    /// Adds wall-clock times to the manifest, which makes reports differ
    /// between runs.
    #[serde(default)]
    pub record_timestamps: bool,
}

fn default_cap() -> usize {
    200
}
fn default_true() -> bool {
    true
}
fn default_threshold() -> i64 {
    crate::memory::DEFAULT_THRESHOLD
}
fn default_train() -> usize {
    100
}
fn default_validation() -> usize {
    500
}
fn default_max_tokens() -> usize {
    512
}

impl ExperimentConfig {
    pub fn new(dataset: impl Into<PathBuf>, backend: BackendDescriptor, out: impl Into<PathBuf>) -> Self {
        Self {
            dataset: dataset.into(),
            backend,
            memory: MemoryMode::None,
            insights: None,
            fine_grained: false,
            sample_cap: default_cap(),
            seed: 0,
            out: out.into(),
            with_constraints: true,
            space: Space::Probability,
            norm: NormDimension::Whole,
            threshold: default_threshold(),
            train_size: default_train(),
            validation_size: default_validation(),
            max_tokens: default_max_tokens(),
            record_timestamps: false,
        }
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
    }

    pub fn check(&self) -> Result<(), HarnessError> {
        if self.sample_cap == 0 {
            return Err(HarnessError::Config("sample_cap must be at least 1".into()));
        }
        if self.max_tokens == 0 {
            return Err(HarnessError::Config("max_tokens must be at least 1".into()));
        }
        if matches!(self.memory, MemoryMode::BehavioralCloning | MemoryMode::OracleFeedback) && self.insights.is_none()
        {
            return Err(HarnessError::Config(format!("memory mode {} needs an insight store", self.memory)));
        }
        Ok(())
    }

    /// Hex SHA-256 over the settings that affect results and the dataset
    /// contents. Output location and timestamp recording are excluded, so
    /// the same experiment in another directory hashes the same.
    pub fn hash(&self) -> Result<String, HarnessError> {
        let dataset = fs::read(&self.dataset).map_err(|e| io_err(&self.dataset, e))?;
        let insights = match &self.insights {
            Some(p) => fs::read(p).map_err(|e| io_err(p, e))?,
            None => Vec::new(),
        };
        let mut canonical = self.clone();
        canonical.dataset = PathBuf::new();
        canonical.insights = None;
        canonical.out = PathBuf::new();
        canonical.record_timestamps = false;
        let json = serde_json::to_vec(&canonical).expect("config serializes");
        Ok(hex::encode(content_hash(&[&json, &dataset, &insights])))
    }

    pub(crate) fn cache_dir(&self, kind: &str) -> Result<PathBuf, HarnessError> {
        let hash = self.hash()?;
        Ok(self.out.join("cache").join(&hash[..16]).join(kind))
    }

    /// Prompt lines of the insights shown to the agent, or `None` when the
    /// run has no episodic memory.
    pub fn insight_lines(&self) -> Result<Option<Vec<String>>, HarnessError> {
        let set = match self.memory {
            MemoryMode::None => return Ok(None),
            MemoryMode::Reference => InsightSet::reference(),
            MemoryMode::BehavioralCloning | MemoryMode::OracleFeedback => {
                let path = self.insights.as_ref().ok_or_else(|| {
                    HarnessError::Config(format!("memory mode {} needs an insight store", self.memory))
                })?;
                InsightSet::from_json(&fs::read_to_string(path).map_err(|e| io_err(path, e))?)?
            }
        };
        Ok(Some(set.format_visible(self.threshold)))
    }
}

pub fn load_dataset(path: &Path) -> Result<Vec<Instance>, HarnessError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            Instance::from_json(l).map_err(|e| HarnessError::Config(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

pub fn save_dataset(path: &Path, instances: &[Instance]) -> Result<(), HarnessError> {
    let mut out = String::new();
    for inst in instances {
        out.push_str(&inst.to_json_line());
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
    f.write_all(bytes).map_err(|e| io_err(&tmp, e))?;
    f.sync_all().map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

/// Deterministic shuffle by `seed`, then the first `train` instances and
/// the next `validation` ones.
pub fn split_dataset(
    instances: &[Instance],
    seed: u64,
    train: usize,
    validation: usize,
) -> Result<(Vec<Instance>, Vec<Instance>), HarnessError> {
    let needed = train + validation;
    if instances.len() < needed {
        return Err(HarnessError::InsufficientData { needed, available: instances.len() });
    }
    let mut order: Vec<usize> = (0..instances.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pick = |r: std::ops::Range<usize>| order[r].iter().map(|i| instances[*i].clone()).collect();
    Ok((pick(0..train), pick(train..needed)))
}

/// Seeded sample of at most `cap` instances, returned in id order.
pub fn sample_instances(instances: &[Instance], cap: usize, seed: u64) -> Vec<Instance> {
    let mut order: Vec<usize> = (0..instances.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5a4d_504c_4521));
    let mut out: Vec<Instance> = order.into_iter().take(cap).map(|i| instances[i].clone()).collect();
    out.sort_by(|a, b| a.id.cmp(&b.id));
    out
}

/// Writes one {"prompt", "completion"} JSON line per instance with the
/// solver's plan as completion. Returns the record count.
pub fn export_sft_pairs(train: &[Instance], with_constraints: bool, path: &Path) -> Result<usize, HarnessError> {
    let mut out = String::new();
    for inst in train {
        let plan = solve_bfs(inst, 64).ok_or_else(|| HarnessError::SolverFailure(inst.id.clone()))?;
        let prompt = blocksworld_prompt(inst, with_constraints, None, false)?;
        let record = serde_json::json!({"prompt": prompt.rendered(), "completion": render_plan(&plan)});
        out.push_str(&record.to_string());
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())?;
    Ok(train.len())
}
