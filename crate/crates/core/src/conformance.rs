//! Black-box checks that an HTTP endpoint speaks the generate/score
//! protocol the way the gateway expects.

use std::time::Duration;

use serde::Serialize;
use serde_json::{json, Value};

use crate::gateway::{Backend, RemoteBackend, TokenScores};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConformanceReport {
    pub base_url: String,
    pub checks: Vec<CheckResult>,
}

impl ConformanceReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&CheckResult> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }
}

const PROMPT: &str = "As initial conditions I have that, the red block is clear and the hand is empty.\n";
const TARGETS: [&str; 3] =
    ["[Plan]\n1. pick up the red block\n2. put down the red block", "naïve café: ☕ über ∑ 日本", " "];

/// Raw POST returning (status, parsed body or null).
fn raw_post(agent: &ureq::Agent, url: &str, body: &str) -> Result<(u16, Value), String> {
    let resp = agent.post(url).set("Content-Type", "application/json").send_string(body);
    let resp = match resp {
        Ok(r) => r,
        Err(ureq::Error::Status(_, r)) => r,
        Err(e) => return Err(e.to_string()),
    };
    let status = resp.status();
    let text = resp.into_string().map_err(|e| e.to_string())?;
    Ok((status, serde_json::from_str(&text).unwrap_or(Value::Null)))
}

fn error_shape(status: u16, body: &Value, expected: u16) -> Result<(), String> {
    if status != expected {
        return Err(format!("status {status}, expected {expected}"));
    }
    if !body["error"].is_string() {
        return Err(format!("body {body} lacks a string \"error\" field"));
    }
    Ok(())
}

fn check_scores(scores: &TokenScores, target: &str) -> Result<(), String> {
    scores.validate(target).map_err(|e| e.to_string())
}

/// Runs every check against `base_url`; never panics on a misbehaving
/// server, each failure is recorded instead.
pub fn run_conformance(base_url: &str, timeout: Duration) -> ConformanceReport {
    let base = base_url.trim_end_matches('/').to_string();
    let agent = ureq::AgentBuilder::new().timeout(timeout).build();
    let client = RemoteBackend::new(&base, timeout);
    let mut checks = Vec::new();
    let mut record = |name: &str, outcome: Result<(), String>| {
        checks.push(CheckResult {
            name: name.into(),
            passed: outcome.is_ok(),
            detail: outcome.err().unwrap_or_default(),
        });
    };

    record("healthz", if client.healthy() { Ok(()) } else { Err("GET /healthz did not return status ok".into()) });

    for (i, target) in TARGETS.iter().enumerate() {
        let outcome = client.score(PROMPT, target).map_err(|e| e.to_string()).and_then(|s| check_scores(&s, target));
        record(&format!("score_tiling_{i}"), outcome);
    }

    let determinism = (|| {
        let a = client.score(PROMPT, TARGETS[0]).map_err(|e| e.to_string())?;
        let b = client.score(PROMPT, TARGETS[0]).map_err(|e| e.to_string())?;
        if a != b {
            return Err("repeated score requests differ".into());
        }
        let g1 = client.generate(PROMPT, 16).map_err(|e| e.to_string())?;
        let g2 = client.generate(PROMPT, 16).map_err(|e| e.to_string())?;
        if g1 != g2 {
            return Err("repeated generate requests differ".into());
        }
        Ok(())
    })();
    record("deterministic", determinism);

    let empty = raw_post(&agent, &format!("{base}/v1/score"), &json!({"prompt": PROMPT, "target": ""}).to_string())
        .and_then(|(status, body)| error_shape(status, &body, 422));
    record("empty_target_rejected", empty);

    let malformed = raw_post(&agent, &format!("{base}/v1/score"), "{\"prompt\": ")
        .and_then(|(status, body)| error_shape(status, &body, 400));
    record("malformed_json_rejected", malformed);

    let generate =
        raw_post(&agent, &format!("{base}/v1/generate"), &json!({"prompt": PROMPT, "max_tokens": 8}).to_string())
            .and_then(|(status, body)| match (status, body["text"].is_string()) {
                (200, true) => Ok(()),
                _ => Err(format!("status {status}, body {body}")),
            });
    record("generate_shape", generate);

    ConformanceReport { base_url: base, checks }
}
