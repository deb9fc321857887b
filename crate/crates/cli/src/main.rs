use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use planattr::blocksworld::{generate_dataset, parse_plan_text, render_plan, solve_bfs, validate_plan, Instance};
use planattr::gateway::{
    Backend, BackendDescriptor, BackendKind, LocalBackend, MockKind, MockModel, MockServer, PlannerMock, ServerOptions,
    Vocabulary, BACKEND_URL_ENV,
};
use planattr::harness::{
    emit_report, export_sft_pairs, load_dataset, run_ablation, run_attribution_study, run_planning_eval, save_dataset,
    split_dataset, ExperimentConfig, ReportInputs,
};
use planattr::memory::{learn_loop, InsightSet, LearnConfig, MemoryMode};
use planattr::prompt::blocksworld_prompt;

#[derive(Parser)]
#[command(name = "planattr", version, about = "Prompt-component attribution for planning agents")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Experiment config (JSON); flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// JSON-lines instance file.
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    /// Scoring server; defaults to $PLANATTR_BACKEND_URL.
    #[arg(long, global = true)]
    backend_url: Option<String>,
    /// Use the in-process planner mock instead of a server.
    #[arg(long, global = true)]
    mock: bool,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_parser = ["prob", "probability", "logprob"])]
    space: Option<String>,
    #[arg(long, global = true)]
    fine_grained: bool,
    #[arg(long, global = true, value_parser = ["whole", "per-row", "per_row"])]
    norm: Option<String>,
    /// Votes an insight needs, strictly exceeded, to be shown.
    #[arg(long, global = true, allow_negative_numbers = true)]
    threshold: Option<i64>,
    #[arg(long, global = true)]
    parallelism: Option<usize>,
    #[arg(long, global = true, value_parser = ["none", "bc", "of", "reference"])]
    memory: Option<String>,
    /// Insight store for the learned memory modes.
    #[arg(long, global = true)]
    insights: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded BlocksWorld dataset.
    Gen {
        #[arg(long, default_value_t = 600)]
        count: usize,
        #[arg(long, default_value_t = 3)]
        min_blocks: usize,
        #[arg(long, default_value_t = 6)]
        max_blocks: usize,
        /// Minimum optimal plan length.
        #[arg(long, default_value_t = 2)]
        min_optimal: usize,
        /// Destination file; stdout when absent.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Print optimal plans for dataset instances.
    Solve {
        #[arg(long)]
        id: Option<String>,
    },
    /// Check a plan against an instance.
    Validate {
        #[arg(long)]
        id: String,
        /// File holding the plan text; `-` reads stdin.
        #[arg(long)]
        plan: PathBuf,
    },
    /// Ask the backend for a plan and validate it.
    Plan {
        #[arg(long)]
        id: String,
    },
    /// Run the attribution study on the validation sample.
    Attribute,
    /// Learn an insight set on the training split.
    Learn {
        #[arg(long, default_value_t = 3)]
        rounds: usize,
    },
    /// Planning accuracy on the validation split.
    Eval {
        /// Also run without the constraint descriptions.
        #[arg(long)]
        ablation: bool,
    },
    /// Write prompt/completion pairs for the training split.
    ExportSft {
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run evaluation and attribution, then write tables and figures.
    Report {
        #[arg(long)]
        ablation: bool,
    },
    /// Serve a mock model over the scoring protocol.
    ServeMock {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        #[arg(long, default_value_t = 4)]
        workers: usize,
        /// Requests whose prompt plus target exceed this many bytes are refused.
        #[arg(long)]
        max_context: Option<usize>,
        /// Serve the seeded pseudo-model instead of the planner mock.
        #[arg(long)]
        seeded: bool,
    },
}

enum CliError {
    Usage(String),
    Domain { kind: &'static str, message: String },
}

fn domain(kind: &'static str) -> impl Fn(&dyn Display) -> CliError {
    move |e| CliError::Domain { kind, message: e.to_string() }
}

macro_rules! fail {
    ($kind:literal) => {
        |e| domain($kind)(&e)
    };
}

type CliResult = Result<Value, CliError>;

fn parse_value<T: std::str::FromStr<Err = String>>(v: &Option<String>) -> Result<Option<T>, CliError> {
    v.as_deref().map(|s| s.parse().map_err(CliError::Usage)).transpose()
}

/// Resolves the backend: explicit flags, then the config file, then the
/// environment.
fn backend(g: &Global, from_config: Option<BackendDescriptor>) -> Result<BackendDescriptor, CliError> {
    let seed = g.seed.unwrap_or(0);
    let kind = if g.mock {
        Some(BackendKind::Mock { model: MockKind::Planner, seed })
    } else {
        g.backend_url.as_ref().map(|url| BackendKind::Remote { url: url.clone() })
    };
    let mut desc = match (kind, from_config) {
        (Some(kind), Some(mut d)) => {
            d.kind = kind;
            d
        }
        (Some(kind), None) => BackendDescriptor { kind, ..BackendDescriptor::mock(MockKind::Planner, seed) },
        (None, Some(d)) => d,
        (None, None) => match std::env::var(BACKEND_URL_ENV) {
            Ok(url) if !url.is_empty() => BackendDescriptor::remote(url),
            _ => {
                return Err(CliError::Usage(format!("no backend: pass --mock, --backend-url or set {BACKEND_URL_ENV}")))
            }
        },
    };
    if let Some(p) = g.parallelism {
        desc.parallelism = p;
    }
    Ok(desc)
}

fn experiment(g: &Global) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &g.config {
        Some(path) => {
            let mut c = ExperimentConfig::load(path).map_err(fail!("Config"))?;
            c.backend = backend(g, Some(c.backend.clone()))?;
            c
        }
        None => {
            let dataset =
                g.dataset.clone().ok_or_else(|| CliError::Usage("--dataset or --config is required".into()))?;
            ExperimentConfig::new(dataset, backend(g, None)?, g.out.clone().unwrap_or_else(|| "out".into()))
        }
    };
    if g.config.is_some() {
        if let Some(d) = &g.dataset {
            cfg.dataset = d.clone();
        }
        if let Some(o) = &g.out {
            cfg.out = o.clone();
        }
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(s) = parse_value(&g.space)? {
        cfg.space = s;
    }
    if let Some(n) = parse_value(&g.norm)? {
        cfg.norm = n;
    }
    if let Some(m) = parse_value::<MemoryMode>(&g.memory)? {
        cfg.memory = m;
    }
    if let Some(p) = &g.insights {
        cfg.insights = Some(p.clone());
    }
    if let Some(t) = g.threshold {
        cfg.threshold = t;
    }
    cfg.fine_grained |= g.fine_grained;
    cfg.check().map_err(fail!("Config"))?;
    Ok(cfg)
}

fn dataset(g: &Global) -> Result<Vec<Instance>, CliError> {
    let path = match (&g.dataset, &g.config) {
        (Some(d), _) => d.clone(),
        (None, Some(c)) => ExperimentConfig::load(c).map_err(fail!("Config"))?.dataset,
        (None, None) => return Err(CliError::Usage("--dataset or --config is required".into())),
    };
    load_dataset(&path).map_err(fail!("Dataset"))
}

fn find<'a>(data: &'a [Instance], id: &str) -> Result<&'a Instance, CliError> {
    data.iter()
        .find(|i| i.id == id)
        .ok_or_else(|| CliError::Domain { kind: "UnknownInstance", message: format!("no instance with id {id}") })
}

fn validation_json(inst: &Instance, text: &str) -> Value {
    match parse_plan_text(text) {
        Ok(parsed) => {
            let r = validate_plan(inst, &parsed.plan);
            json!({
                "id": inst.id,
                "ok": r.ok,
                "goal_satisfied": r.goal_satisfied,
                "failure_index": r.failure_index,
                "violation": r.violation,
                "steps": parsed.plan.len(),
                "summary": r.summary(&parsed.plan),
            })
        }
        Err(e) => json!({"id": inst.id, "ok": false, "parse_error": e.to_string()}),
    }
}

/// Writes one stdout line; a closed pipe ends output quietly.
fn say(line: impl Display) {
    use std::io::Write;
    if writeln!(std::io::stdout().lock(), "{line}").is_err() {
        std::process::exit(0);
    }
}

fn write_json(path: &Path, value: &Value) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(fail!("Io"))?;
    }
    let text = serde_json::to_string_pretty(value).expect("json serializes") + "\n";
    std::fs::write(path, text).map_err(fail!("Io"))
}

fn run(cli: Cli) -> CliResult {
    let g = &cli.global;
    match cli.command {
        Command::Gen { count, min_blocks, max_blocks, min_optimal, output } => {
            let data = generate_dataset(count, min_blocks, max_blocks, g.seed.unwrap_or(0), min_optimal)
                .map_err(fail!("Domain"))?;
            match output {
                Some(path) => {
                    save_dataset(&path, &data).map_err(fail!("Io"))?;
                    Ok(json!({"written": data.len(), "path": path}))
                }
                None => {
                    for inst in &data {
                        say(inst.to_json_line());
                    }
                    Ok(Value::Null)
                }
            }
        }
        Command::Solve { id } => {
            let data = dataset(g)?;
            let selected: Vec<&Instance> = match &id {
                Some(id) => vec![find(&data, id)?],
                None => data.iter().collect(),
            };
            for inst in selected {
                let plan = solve_bfs(inst, 64).ok_or_else(|| CliError::Domain {
                    kind: "SolverFailure",
                    message: format!("solver found no plan for instance {}", inst.id),
                })?;
                say(json!({"id": inst.id, "optimal_length": plan.len(), "plan": render_plan(&plan)}));
            }
            Ok(Value::Null)
        }
        Command::Validate { id, plan } => {
            let data = dataset(g)?;
            let inst = find(&data, &id)?;
            let text = if plan.as_os_str() == "-" {
                std::io::read_to_string(std::io::stdin()).map_err(fail!("Io"))?
            } else {
                std::fs::read_to_string(&plan).map_err(|e| domain("Io")(&format!("{}: {e}", plan.display())))?
            };
            Ok(validation_json(inst, &text))
        }
        Command::Plan { id } => {
            let cfg = experiment(g)?;
            let data = load_dataset(&cfg.dataset).map_err(fail!("Dataset"))?;
            let inst = find(&data, &id)?;
            let insights = cfg.insight_lines().map_err(fail!("Config"))?;
            let prompt =
                blocksworld_prompt(inst, cfg.with_constraints, insights.as_deref(), false).map_err(fail!("Prompt"))?;
            let gw = cfg.backend.connect().map_err(fail!("Gateway"))?;
            let text = gw.generate(prompt.rendered(), cfg.max_tokens).map_err(fail!("Gateway"))?;
            let mut v = validation_json(inst, &text);
            v["output"] = json!(text);
            Ok(v)
        }
        Command::Attribute => {
            let cfg = experiment(g)?;
            let gw = cfg.backend.connect().map_err(fail!("Gateway"))?;
            let study = run_attribution_study(&cfg, &gw).map_err(fail!("Harness"))?;
            let path = cfg.out.join("study.json");
            write_json(&path, &serde_json::to_value(&study).expect("study serializes"))?;
            let failed = study.records.iter().filter(|r| r.error.is_some()).count();
            Ok(json!({
                "instances": study.records.len(),
                "failed": failed,
                "component_scores": study.component_scores.iter().map(|(id, s)| (id.to_string(), *s)).collect::<Vec<_>>(),
                "study": path,
                "matrices": cfg.out.join("matrices"),
            }))
        }
        Command::Learn { rounds } => {
            let cfg = experiment(g)?;
            let mode = match cfg.memory {
                MemoryMode::None => MemoryMode::BehavioralCloning,
                m => m,
            };
            let data = load_dataset(&cfg.dataset).map_err(fail!("Dataset"))?;
            let (train, _) =
                split_dataset(&data, cfg.seed, cfg.train_size, cfg.validation_size).map_err(fail!("Harness"))?;
            let gw = cfg.backend.connect().map_err(fail!("Gateway"))?;
            let start = match &cfg.insights {
                Some(p) if p.exists() => {
                    let text = std::fs::read_to_string(p).map_err(fail!("Io"))?;
                    InsightSet::from_json(&text).map_err(fail!("Memory"))?
                }
                _ => InsightSet::new(),
            };
            let lc = LearnConfig { mode, rounds, threshold: cfg.threshold, max_tokens: cfg.max_tokens };
            let (set, transcript) = learn_loop(&gw, &train, &lc, start).map_err(fail!("Memory"))?;
            let store = cfg.insights.clone().unwrap_or_else(|| cfg.out.join("insights.json"));
            if let Some(dir) = store.parent() {
                std::fs::create_dir_all(dir).map_err(fail!("Io"))?;
            }
            std::fs::write(&store, set.to_json()).map_err(fail!("Io"))?;
            let transcript_path = cfg.out.join("learn_transcript.json");
            write_json(&transcript_path, &serde_json::to_value(&transcript).expect("transcript serializes"))?;
            Ok(json!({
                "mode": mode.to_string(),
                "insights": set.len(),
                "visible": set.visible(cfg.threshold).len(),
                "store": store,
                "transcript": transcript_path,
            }))
        }
        Command::Eval { ablation } => {
            let cfg = experiment(g)?;
            let gw = cfg.backend.connect().map_err(fail!("Gateway"))?;
            let eval = run_planning_eval(&cfg, &gw).map_err(fail!("Harness"))?;
            write_json(&cfg.out.join("eval.json"), &serde_json::to_value(&eval).expect("eval serializes"))?;
            let mut v =
                json!({"total": eval.total, "correct": eval.correct, "accuracy": eval.accuracy, "bins": eval.bins});
            if ablation {
                v["ablation"] = json!(run_ablation(&cfg, &gw).map_err(fail!("Harness"))?);
            }
            Ok(v)
        }
        Command::ExportSft { output } => {
            let cfg = experiment(g)?;
            let data = load_dataset(&cfg.dataset).map_err(fail!("Dataset"))?;
            let (train, _) =
                split_dataset(&data, cfg.seed, cfg.train_size, cfg.validation_size).map_err(fail!("Harness"))?;
            let path = output.unwrap_or_else(|| cfg.out.join("sft.jsonl"));
            let n = export_sft_pairs(&train, cfg.with_constraints, &path).map_err(fail!("Harness"))?;
            Ok(json!({"written": n, "path": path}))
        }
        Command::Report { ablation } => {
            let cfg = experiment(g)?;
            let gw = cfg.backend.connect().map_err(fail!("Gateway"))?;
            let eval = run_planning_eval(&cfg, &gw).map_err(fail!("Harness"))?;
            let study = run_attribution_study(&cfg, &gw).map_err(fail!("Harness"))?;
            let rows = if ablation { Some(run_ablation(&cfg, &gw).map_err(fail!("Harness"))?) } else { None };
            let inputs = ReportInputs {
                config_hash: cfg.hash().map_err(fail!("Harness"))?,
                space: cfg.space,
                norm: cfg.norm,
                study: Some(&study),
                eval: Some(&eval),
                ablation: rows.as_deref(),
                timestamps: None,
            };
            let bundle = emit_report(&cfg.out.join("report"), &inputs).map_err(fail!("Harness"))?;
            Ok(json!({"dir": bundle.dir, "files": bundle.files, "omitted": bundle.omitted}))
        }
        Command::ServeMock { addr, workers, max_context, seeded } => {
            let seed = g.seed.unwrap_or(0);
            let backend: Arc<dyn Backend> = if seeded {
                Arc::new(LocalBackend::new(MockModel::new(Vocabulary::plan_words(), seed)))
            } else {
                Arc::new(LocalBackend::new(PlannerMock::new(seed)))
            };
            let server =
                MockServer::start(backend, ServerOptions { addr, workers, max_context }).map_err(fail!("Io"))?;
            say(json!({"listening": server.url()}));
            server.join();
            Ok(Value::Null)
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "off".into()))
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(Value::Null) => ExitCode::SUCCESS,
        Ok(v) => {
            say(serde_json::to_string_pretty(&v).expect("json serializes"));
            ExitCode::SUCCESS
        }
        Err(CliError::Usage(message)) => {
            eprintln!("error: {message}");
            ExitCode::from(2)
        }
        Err(CliError::Domain { kind, message }) => {
            eprintln!("{}", json!({"error": kind, "message": message}));
            ExitCode::from(1)
        }
    }
}
