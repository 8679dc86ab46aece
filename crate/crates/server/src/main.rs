use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};
use shopsandbox_core::agents::{
    load_trajectories, replay, run_episode, score_trajectory, write_trajectories, ChatPolicy, GreedyPolicy,
    HttpChatTransport, OraclePolicy, Policy,
};
use shopsandbox_core::analysis::{correlation_report, extract_factors, failure_tally, load_labels, FactorRow};
use shopsandbox_core::distill::{export_training_file, reject_sample, segment_sft, SegmentOptions};
use shopsandbox_core::metrics::{aggregate, evaluate_task, MetricsConfig};
use shopsandbox_core::sandbox::Environment;
use shopsandbox_core::search::{Bm25Params, FieldWeights, ProductIndex};
use shopsandbox_core::synth::{generate, write_corpus, SynthConfig};
use shopsandbox_core::taskgen::{
    generate_suite, write_tasks, FactStore, InstructionRenderer, IntentKind, RemoteRenderer, SuiteConfig, Task,
    TemplateRenderer,
};
use shopsandbox_core::Catalog;
use shopsandbox_server::config::{ModelConfig, WebBackend};
use shopsandbox_server::ServerConfig;

#[derive(Parser)]
#[command(name = "shopsandbox", version, about = "Offline shopping sandbox for tool-using agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic catalog, knowledge facts and snippet fixture.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        products: usize,
        #[arg(long, default_value_t = 120)]
        shops: usize,
        #[arg(long, default_value_t = 60)]
        facts: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Generate a task suite from a catalog.
    Gen {
        #[arg(long)]
        catalog: PathBuf,
        /// Knowledge facts; required for knowledge_reasoning tasks.
        #[arg(long)]
        facts: Option<PathBuf>,
        /// `all` or a comma list of intent names or codes (pf, kr, ms, vb).
        #[arg(long, default_value = "all")]
        intents: String,
        /// Tasks per intent.
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = RendererKind::Template)]
        renderer: RendererKind,
        /// Config file holding the `[model]` section for the remote renderer.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Build and persist the search index.
    Index {
        #[arg(long)]
        catalog: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.9)]
        k1: f64,
        #[arg(long, default_value_t = 0.4)]
        b: f64,
        #[arg(long, default_value_t = 2)]
        title_weight: u32,
    },
    /// Drive a policy over every task and write scored trajectories.
    Run {
        #[command(flatten)]
        env: EnvArgs,
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long, value_enum)]
        policy: PolicyKind,
        #[arg(long)]
        out: PathBuf,
        /// Only the first N tasks.
        #[arg(long)]
        limit: Option<usize>,
        /// Chat policy: request reasoning before each call.
        #[arg(long)]
        think: bool,
    },
    /// Score trajectories against their tasks and aggregate a report.
    Eval {
        #[arg(long)]
        catalog: PathBuf,
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long)]
        trajectories: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        /// Per-task results, one JSON object per line.
        #[arg(long)]
        results: Option<PathBuf>,
        #[arg(long)]
        lenient_features: bool,
    },
    /// Reject-sample scored trajectories and export SFT samples.
    Distill {
        #[arg(long)]
        trajectories: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        no_think: bool,
        /// Inputs carry only the latest observation.
        #[arg(long)]
        latest_only: bool,
    },
    /// Factor correlations and failure tallies over scored trajectories.
    Analyze {
        #[arg(long)]
        trajectories: PathBuf,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also print a plain-text correlation table.
        #[arg(long)]
        table: bool,
    },
    /// Start the HTTP service.
    Serve {
        #[arg(long)]
        config: PathBuf,
    },
    /// Re-execute recorded trajectories and diff observations.
    Replay {
        #[command(flatten)]
        env: EnvArgs,
        #[arg(long)]
        trajectories: PathBuf,
    },
}

#[derive(Args)]
struct EnvArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    catalog: Option<PathBuf>,
    #[arg(long)]
    index: Option<PathBuf>,
    /// Snippet fixture for web_search.
    #[arg(long)]
    snippets: Option<PathBuf>,
    #[arg(long, conflicts_with = "snippets")]
    no_web: bool,
    #[arg(long)]
    step_limit: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum RendererKind {
    Template,
    Remote,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyKind {
    Oracle,
    Greedy,
    Chat,
}

struct Failure {
    code: &'static str,
    message: String,
    detail: Value,
    exit: u8,
}

impl Failure {
    fn new(code: &'static str, message: impl ToString) -> Failure {
        Failure { code, message: message.to_string(), detail: Value::Null, exit: 1 }
    }
}

fn fail<E: ToString>(code: &'static str) -> impl Fn(E) -> Failure {
    move |e| Failure::new(code, e)
}

type CliResult = Result<Value, Failure>;

impl EnvArgs {
    fn config(&self) -> Result<ServerConfig, Failure> {
        let mut cfg = match (&self.config, &self.catalog) {
            (Some(path), _) => ServerConfig::load(path).map_err(fail("Config"))?,
            (None, Some(catalog)) => {
                let mut cfg = ServerConfig::for_catalog(catalog);
                cfg.web_search.backend = WebBackend::Disabled;
                cfg
            }
            (None, None) => return Err(Failure::new("Config", "pass --config or --catalog")),
        };
        if let Some(c) = &self.catalog {
            cfg.catalog = c.clone();
        }
        if let Some(i) = &self.index {
            cfg.index = Some(i.clone());
        }
        if let Some(s) = &self.snippets {
            cfg.web_search.backend = WebBackend::Fixture;
            cfg.web_search.snippets = Some(s.clone());
        }
        if self.no_web {
            cfg.web_search.backend = WebBackend::Disabled;
        }
        if let Some(n) = self.step_limit {
            cfg.step_limit = n;
        }
        Ok(cfg)
    }

    fn environment(&self) -> Result<(ServerConfig, Environment), Failure> {
        let cfg = self.config()?;
        let env = cfg.environment().map_err(fail("Config"))?;
        Ok((cfg, env))
    }
}

fn parse_intents(spec: &str) -> Result<Vec<IntentKind>, Failure> {
    if spec.trim().eq_ignore_ascii_case("all") {
        return Ok(IntentKind::ALL.to_vec());
    }
    spec.split(',').map(|s| s.trim().parse::<IntentKind>().map_err(fail("InvalidArgument"))).collect()
}

fn load_task_file(path: &Path) -> Result<Vec<Task>, Failure> {
    shopsandbox_core::taskgen::load_tasks(path).map_err(fail("TaskFile"))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(fail("Io"))?;
    fs::write(path, text + "\n").map_err(fail("Io"))
}

fn remote_model(cfg: &ModelConfig) -> Result<(String, Option<String>, String), Failure> {
    let endpoint = cfg.endpoint.clone().ok_or_else(|| Failure::new("Config", "model.endpoint is not set"))?;
    let model = cfg.model.clone().ok_or_else(|| Failure::new("Config", "model.model is not set"))?;
    Ok((endpoint, cfg.api_key.clone(), model))
}

fn cmd_synth(out: &Path, config: SynthConfig) -> CliResult {
    fs::create_dir_all(out).map_err(fail("Io"))?;
    let corpus = generate(config);
    let paths = write_corpus(&corpus, out).map_err(fail("Io"))?;
    Ok(json!({ "ledger": corpus.ledger, "paths": paths }))
}

#[allow(clippy::too_many_arguments)]
fn cmd_gen(
    catalog: &Path,
    facts: Option<&Path>,
    intents: &str,
    count: usize,
    seed: u64,
    out: &Path,
    renderer: RendererKind,
    config: Option<&Path>,
) -> CliResult {
    let cat = Catalog::load(catalog).map_err(fail("Catalog"))?;
    let store = facts.map(|p| FactStore::load(p, &cat)).transpose().map_err(fail("Facts"))?;
    let mut suite = SuiteConfig::uniform(0, seed);
    suite.counts.clear();
    for k in parse_intents(intents)? {
        suite.counts.insert(k, count);
    }
    let remote;
    let renderer: &dyn InstructionRenderer = match renderer {
        RendererKind::Template => &TemplateRenderer,
        RendererKind::Remote => {
            let path = config.ok_or_else(|| Failure::new("Config", "--renderer remote needs --config"))?;
            let cfg = ServerConfig::load(path).map_err(fail("Config"))?;
            let (endpoint, key, model) = remote_model(&cfg.model)?;
            remote = RemoteRenderer::new(endpoint, key, model);
            &remote
        }
    };
    let tasks = generate_suite(&cat, store.as_ref(), &suite, renderer).map_err(fail("Taskgen"))?;
    write_tasks(out, &tasks).map_err(fail("Io"))?;
    let mut per_intent: BTreeMap<&str, usize> = BTreeMap::new();
    for t in &tasks {
        *per_intent.entry(t.intent.as_str()).or_default() += 1;
    }
    Ok(json!({ "tasks": tasks.len(), "per_intent": per_intent, "out": out }))
}

fn cmd_index(catalog: &Path, out: &Path, params: Bm25Params, title_weight: u32) -> CliResult {
    let cat = Catalog::load(catalog).map_err(fail("Catalog"))?;
    let weights = FieldWeights { title: title_weight, ..FieldWeights::default() };
    let index = ProductIndex::build(&cat, weights, params).map_err(fail("Index"))?;
    index.save(out).map_err(fail("Io"))?;
    Ok(json!({
        "documents": index.corpus().doc_count(),
        "terms": index.corpus().terms().count(),
        "catalog_digest": cat.digest(),
        "out": out,
    }))
}

fn cmd_run(args: &EnvArgs, tasks: &Path, policy: PolicyKind, out: &Path, limit: Option<usize>, think: bool) -> CliResult {
    let (cfg, env) = args.environment()?;
    let mut tasks = load_task_file(tasks)?;
    if let Some(n) = limit {
        tasks.truncate(n);
    }
    let metrics = MetricsConfig::default();
    let mut trajectories = Vec::with_capacity(tasks.len());
    for task in &tasks {
        let mut policy: Box<dyn Policy> = match policy {
            PolicyKind::Oracle => Box::new(OraclePolicy::new(task, env.catalog())),
            PolicyKind::Greedy => Box::new(GreedyPolicy::new()),
            PolicyKind::Chat => {
                let (endpoint, key, model) = remote_model(&cfg.model)?;
                Box::new(ChatPolicy::new(HttpChatTransport::new(endpoint, key, model.clone()), think, model))
            }
        };
        let mut traj = run_episode(policy.as_mut(), &env, task);
        score_trajectory(&mut traj, task, env.catalog(), &metrics).map_err(fail("Metrics"))?;
        trajectories.push(traj);
    }
    write_trajectories(out, &trajectories).map_err(fail("Io"))?;
    let results: Vec<_> = trajectories.iter().filter_map(|t| t.scores.clone()).collect();
    let report = aggregate(&results);
    Ok(json!({ "trajectories": trajectories.len(), "weighted_asr": report.weighted_asr, "out": out }))
}

fn cmd_eval(
    catalog: &Path,
    tasks: &Path,
    trajectories: &Path,
    report_path: Option<&Path>,
    results_path: Option<&Path>,
    lenient: bool,
) -> CliResult {
    let cat = Catalog::load(catalog).map_err(fail("Catalog"))?;
    let tasks = load_task_file(tasks)?;
    let trajs = load_trajectories(trajectories).map_err(fail("TrajectoryFile"))?;
    let by_task: HashMap<&str, &Task> = tasks.iter().map(|t| (t.task_id.as_str(), t)).collect();
    let mut recommended: BTreeMap<&str, &[String]> = BTreeMap::new();
    for t in &trajs {
        if !by_task.contains_key(t.task_id.as_str()) {
            return Err(Failure::new("UnknownTask", format!("trajectory {} names unknown task {}", t.trajectory_id, t.task_id)));
        }
        recommended.insert(&t.task_id, &t.recommended);
    }
    let cfg = MetricsConfig { lenient_features: lenient, ..MetricsConfig::default() };
    let mut results = Vec::with_capacity(tasks.len());
    let mut missing = 0;
    for task in &tasks {
        // A task without a trajectory is scored as an empty recommendation.
        let recs = recommended.get(task.task_id.as_str()).copied().unwrap_or_else(|| {
            missing += 1;
            &[]
        });
        results.push(evaluate_task(task, recs, &cat, &cfg).map_err(fail("Metrics"))?);
    }
    let report = aggregate(&results);
    if let Some(p) = report_path {
        write_json(p, &report)?;
    }
    if let Some(p) = results_path {
        let mut text = String::new();
        for r in &results {
            text.push_str(&serde_json::to_string(r).map_err(fail("Io"))?);
            text.push('\n');
        }
        fs::write(p, text).map_err(fail("Io"))?;
    }
    Ok(json!({ "report": report, "missing_trajectories": missing }))
}

fn cmd_distill(trajectories: &Path, out: &Path, manifest: Option<&Path>, think: bool, latest_only: bool) -> CliResult {
    let trajs = load_trajectories(trajectories).map_err(fail("TrajectoryFile"))?;
    let (kept, ledger) = reject_sample(&trajs).map_err(fail("Distill"))?;
    let opts = SegmentOptions { think, latest_only };
    let samples: Vec<_> = kept.iter().flat_map(|t| segment_sft(t, opts)).collect();
    let m = export_training_file(&samples, out).map_err(fail("Distill"))?;
    if let Some(p) = manifest {
        write_json(p, &json!({ "manifest": m, "ledger": ledger }))?;
    }
    Ok(json!({ "manifest": m, "ledger": ledger }))
}

fn cmd_analyze(trajectories: &Path, labels: Option<&Path>, out: Option<&Path>, table: bool) -> CliResult {
    let trajs = load_trajectories(trajectories).map_err(fail("TrajectoryFile"))?;
    let mut rows = Vec::with_capacity(trajs.len());
    for t in &trajs {
        let scores = t
            .scores
            .as_ref()
            .ok_or_else(|| Failure::new("UnscoredTrajectory", format!("{} has no scores", t.trajectory_id)))?;
        rows.push(FactorRow {
            trajectory_id: t.trajectory_id.clone(),
            intent: t.intent,
            factors: extract_factors(t),
            success: scores.success,
        });
    }
    let report = correlation_report(&rows);
    if table {
        eprint!("{}", report.to_table());
    }
    let tally = match labels {
        Some(p) => {
            let labels = load_labels(p).map_err(fail("Labels"))?;
            let outcomes: Vec<(String, bool)> = rows.iter().map(|r| (r.trajectory_id.clone(), r.success)).collect();
            Some(failure_tally(&outcomes, &labels))
        }
        None => None,
    };
    let doc = json!({ "factors": rows, "correlations": report, "failures": tally });
    if let Some(p) = out {
        write_json(p, &doc)?;
    }
    Ok(json!({ "trajectories": rows.len(), "correlations": report, "failures": tally }))
}

fn cmd_replay(args: &EnvArgs, trajectories: &Path) -> CliResult {
    let (_, env) = args.environment()?;
    let trajs = load_trajectories(trajectories).map_err(fail("TrajectoryFile"))?;
    for t in &trajs {
        let rep = replay(&env, t);
        if let Some(step) = rep.first_divergence {
            return Err(Failure {
                code: "ReplayDivergence",
                message: format!("{} diverges at step {step}", t.trajectory_id),
                detail: json!({
                    "trajectory_id": t.trajectory_id,
                    "step": step,
                    "expected": rep.expected,
                    "actual": rep.actual,
                }),
                exit: 2,
            });
        }
    }
    Ok(json!({ "replayed": trajs.len(), "divergent": 0 }))
}

fn cmd_serve(config: &Path) -> CliResult {
    let cfg = ServerConfig::load(config).map_err(fail("Config"))?;
    cfg.validate().map_err(fail("Config"))?;
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    let rt = tokio::runtime::Runtime::new().map_err(fail("Io"))?;
    rt.block_on(shopsandbox_server::serve(cfg)).map_err(fail("Serve"))?;
    Ok(json!({ "stopped": true }))
}

fn dispatch(cmd: Command) -> CliResult {
    match cmd {
        Command::Synth { out, products, shops, facts, seed } => cmd_synth(&out, SynthConfig { products, shops, facts, seed }),
        Command::Gen { catalog, facts, intents, count, seed, out, renderer, config } => {
            cmd_gen(&catalog, facts.as_deref(), &intents, count, seed, &out, renderer, config.as_deref())
        }
        Command::Index { catalog, out, k1, b, title_weight } => cmd_index(&catalog, &out, Bm25Params { k1, b }, title_weight),
        Command::Run { env, tasks, policy, out, limit, think } => cmd_run(&env, &tasks, policy, &out, limit, think),
        Command::Eval { catalog, tasks, trajectories, report, results, lenient_features } => {
            cmd_eval(&catalog, &tasks, &trajectories, report.as_deref(), results.as_deref(), lenient_features)
        }
        Command::Distill { trajectories, out, manifest, no_think, latest_only } => {
            cmd_distill(&trajectories, &out, manifest.as_deref(), !no_think, latest_only)
        }
        Command::Analyze { trajectories, labels, out, table } => cmd_analyze(&trajectories, labels.as_deref(), out.as_deref(), table),
        Command::Serve { config } => cmd_serve(&config),
        Command::Replay { env, trajectories } => cmd_replay(&env, &trajectories),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            let mut err = json!({ "code": f.code, "message": f.message });
            if !f.detail.is_null() {
                err["detail"] = f.detail;
            }
            eprintln!("{}", json!({ "error": err }));
            ExitCode::from(f.exit)
        }
    }
}
