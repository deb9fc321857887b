//! HTTP client for the generate/score wire protocol.

use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use super::{Backend, GatewayError, TokenScores};

#[derive(Deserialize)]
struct GenerateResponse {
    text: String,
}

#[derive(Deserialize)]
struct ErrorBody {
    error: String,
}

pub struct RemoteBackend {
    base: String,
    agent: ureq::Agent,
}

impl RemoteBackend {
    pub fn new(url: &str, timeout: Duration) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(timeout).build();
        Self { base: url.trim_end_matches('/').to_string(), agent }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    fn post(&self, path: &str, body: serde_json::Value) -> Result<ureq::Response, GatewayError> {
        match self.agent.post(&format!("{}{path}", self.base)).send_json(body) {
            Ok(resp) => Ok(resp),
            Err(ureq::Error::Status(status, resp)) => {
                let text = resp.into_string().unwrap_or_default();
                let message = serde_json::from_str::<ErrorBody>(&text).map(|b| b.error).unwrap_or(text);
                if status >= 500 {
                    Err(GatewayError::Transport(format!("status {status}: {message}")))
                } else {
                    Err(GatewayError::BackendRefused { status, message })
                }
            }
            Err(e) => Err(GatewayError::Transport(e.to_string())),
        }
    }

    /// GET /healthz.
    pub fn healthy(&self) -> bool {
        self.agent
            .get(&format!("{}/healthz", self.base))
            .call()
            .ok()
            .and_then(|r| r.into_json::<serde_json::Value>().ok())
            .is_some_and(|v| v["status"] == "ok")
    }
}

fn decode<T: serde::de::DeserializeOwned>(resp: ureq::Response) -> Result<T, GatewayError> {
    resp.into_json().map_err(|e| GatewayError::ProtocolViolation(format!("malformed response body: {e}")))
}

impl Backend for RemoteBackend {
    fn generate(&self, prompt: &str, max_tokens: usize) -> Result<String, GatewayError> {
        let resp = self.post("/v1/generate", json!({"prompt": prompt, "max_tokens": max_tokens}))?;
        Ok(decode::<GenerateResponse>(resp)?.text)
    }

    fn score(&self, prompt: &str, target: &str) -> Result<TokenScores, GatewayError> {
        let resp = self.post("/v1/score", json!({"prompt": prompt, "target": target}))?;
        decode(resp)
    }
}
