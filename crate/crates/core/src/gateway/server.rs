//! Serves any [`Backend`] over the wire protocol, so the HTTP client and
//! the conformance checks can run without a real model.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use serde::Deserialize;
use serde_json::{json, Value};
use tiny_http::{Header, Method, Request, Response, Server};

use super::{Backend, GatewayError};

#[derive(Debug, Clone)]
pub struct ServerOptions {
    pub addr: String,
    pub workers: usize,
    /// Maximum prompt plus target length in bytes; longer requests get
    /// `context_overflow`.
    pub max_context: Option<usize>,
}

impl Default for ServerOptions {
    fn default() -> Self {
        Self { addr: "127.0.0.1:0".into(), workers: 4, max_context: None }
    }
}

pub struct MockServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    workers: Vec<JoinHandle<()>>,
}

#[derive(Deserialize)]
struct GenerateBody {
    prompt: String,
    max_tokens: usize,
}

#[derive(Deserialize)]
struct ScoreBody {
    prompt: String,
    target: String,
}

type Reply = (u16, Value);

fn error(status: u16, message: impl Into<String>) -> Reply {
    (status, json!({"error": message.into()}))
}

fn from_gateway(e: GatewayError) -> Reply {
    match e {
        GatewayError::InvalidRequest(m) => error(422, m),
        GatewayError::BackendRefused { status, message } => error(status, message),
        GatewayError::Transport(m) => error(503, m),
        GatewayError::ProtocolViolation(m) => error(500, m),
    }
}

fn parse<T: for<'de> Deserialize<'de>>(body: &str) -> Result<T, Reply> {
    serde_json::from_str(body).map_err(|e| error(400, format!("invalid request body: {e}")))
}

fn route(backend: &dyn Backend, opts: &ServerOptions, method: &Method, path: &str, body: &str) -> Reply {
    let overflow = |n: usize| opts.max_context.is_some_and(|max| n > max);
    match (method, path) {
        (Method::Get, "/healthz") => (200, json!({"status": "ok"})),
        (Method::Post, "/v1/generate") => {
            let req: GenerateBody = match parse(body) {
                Ok(r) => r,
                Err(reply) => return reply,
            };
            if req.max_tokens == 0 {
                return error(422, "max_tokens must be at least 1");
            }
            if overflow(req.prompt.len()) {
                return error(400, "context_overflow");
            }
            match backend.generate(&req.prompt, req.max_tokens) {
                Ok(text) => (200, json!({"text": text})),
                Err(e) => from_gateway(e),
            }
        }
        (Method::Post, "/v1/score") => {
            let req: ScoreBody = match parse(body) {
                Ok(r) => r,
                Err(reply) => return reply,
            };
            if req.target.is_empty() {
                return error(422, "target must be non-empty");
            }
            if overflow(req.prompt.len() + req.target.len()) {
                return error(400, "context_overflow");
            }
            match backend.score(&req.prompt, &req.target) {
                Ok(scores) => (200, serde_json::to_value(scores).expect("scores serialize")),
                Err(e) => from_gateway(e),
            }
        }
        (_, "/healthz" | "/v1/generate" | "/v1/score") => error(405, "method not allowed"),
        _ => error(404, format!("no route for {path}")),
    }
}

fn handle(backend: &dyn Backend, opts: &ServerOptions, mut req: Request) {
    let mut body = String::new();
    let (status, value) = match req.as_reader().read_to_string(&mut body) {
        Ok(_) => route(backend, opts, req.method(), req.url(), &body),
        Err(_) => error(400, "request body is not UTF-8"),
    };
    let header = Header::from_bytes("Content-Type", "application/json").expect("static header");
    let resp = Response::from_string(value.to_string()).with_status_code(status).with_header(header);
    if let Err(e) = req.respond(resp) {
        tracing::debug!(error = %e, "client went away");
    }
}

impl MockServer {
    pub fn start(backend: Arc<dyn Backend>, opts: ServerOptions) -> std::io::Result<Self> {
        let server = Server::http(&opts.addr).map_err(std::io::Error::other)?;
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| std::io::Error::other("server is not bound to an IP address"))?;
        let server = Arc::new(server);
        let stop = Arc::new(AtomicBool::new(false));
        let workers = (0..opts.workers.max(1))
            .map(|_| {
                let (server, stop, backend, opts) = (server.clone(), stop.clone(), backend.clone(), opts.clone());
                std::thread::spawn(move || {
                    while !stop.load(Ordering::Relaxed) {
                        match server.recv_timeout(Duration::from_millis(50)) {
                            Ok(Some(req)) => handle(backend.as_ref(), &opts, req),
                            Ok(None) => {}
                            Err(_) => break,
                        }
                    }
                })
            })
            .collect();
        Ok(Self { addr, stop, workers })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Blocks until stopped from another thread; used by the CLI.
    pub fn join(mut self) {
        for w in std::mem::take(&mut self.workers) {
            let _ = w.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::Relaxed);
        for w in std::mem::take(&mut self.workers) {
            let _ = w.join();
        }
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
    }
}
