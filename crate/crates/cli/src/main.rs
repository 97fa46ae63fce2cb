//! `gsem`: build, query, evolve and inspect an experience memory graph.
//!
//! Exit status: 0 on success, 2 for usage, configuration or data errors,
//! 3 when a model provider fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use gsem_core::config::{ConfigError, EngineConfig};
use gsem_core::construction::build_memory;
use gsem_core::episode::{append_record, read_log, read_snapshot, replay, run_episode, write_snapshot, EpisodeContext};
use gsem_core::export::{entity_dot, experience_dot};
use gsem_core::model::{CaseRecord, ExperienceId};
use gsem_core::providers::ChatProvider;
use gsem_core::retrieval::{retrieve, ActionPolicy, LlmPolicy, RetrievalError};
use gsem_core::simulate::{simulate, SyntheticScenario};
use gsem_core::stats::GraphStats;

#[derive(Parser)]
#[command(name = "gsem", version, about = "Experience memory graph for decision-making agents")]
struct Cli {
    /// Engine configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Log more (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyKind {
    Greedy,
    Llm,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Dot,
}

#[derive(Clone, Copy, ValueEnum)]
enum Layer {
    Experience,
    Entity,
}

#[derive(Subcommand)]
enum Command {
    /// Build a memory graph from solved cases (JSON lines).
    Build {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the full build report here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Retrieve experiences for a query and print the trace.
    Retrieve {
        #[arg(long)]
        snapshot: PathBuf,
        #[arg(long)]
        query: String,
        #[arg(long, value_enum, default_value = "greedy")]
        policy: PolicyKind,
    },
    /// Run episodes: retrieve, answer, grade, and update the graph in place.
    Episode {
        #[arg(long)]
        snapshot: PathBuf,
        /// One case as JSON, or several as JSON lines.
        #[arg(long)]
        case: PathBuf,
        /// Episode log (JSON lines); defaults to `<snapshot>.episodes.jsonl`.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "greedy")]
        policy: PolicyKind,
    },
    /// Run the synthetic evolution experiment and write per-episode CSV.
    Simulate {
        /// Scenario (TOML); the default scenario when omitted.
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print counts and histograms of quality and edge weight.
    Stats {
        #[arg(long)]
        snapshot: PathBuf,
    },
    /// Export the graph for an external visualizer.
    Export {
        #[arg(long)]
        snapshot: PathBuf,
        #[arg(long, value_enum, default_value = "dot")]
        format: Format,
        #[arg(long, value_enum, default_value = "experience")]
        layer: Layer,
        /// Experience whose entities to draw (entity layer only).
        #[arg(long)]
        id: Option<String>,
        /// Write here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-apply an episode log to a starting snapshot.
    Replay {
        #[arg(long)]
        snapshot: PathBuf,
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Data(String),
    Provider(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Data(_) => 2,
            Failure::Provider(_) => 3,
        }
    }
}

fn data(e: impl std::fmt::Display) -> Failure {
    Failure::Data(e.to_string())
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        data(e)
    }
}

type Outcome = Result<(), Failure>;

fn load_config(path: Option<&Path>) -> Result<EngineConfig, Failure> {
    match path {
        Some(p) => Ok(EngineConfig::load(p)?),
        None => Ok(EngineConfig::default()),
    }
}

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Data(format!("cannot read {}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Outcome {
    fs::write(path, text).map_err(|e| Failure::Data(format!("cannot write {}: {e}", path.display())))
}

/// A single JSON object, or one object per non-empty line.
fn read_cases(path: &Path) -> Result<Vec<CaseRecord>, Failure> {
    let text = read_text(path)?;
    if let Ok(one) = serde_json::from_str::<CaseRecord>(&text) {
        return Ok(vec![one]);
    }
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let case = serde_json::from_str(line)
            .map_err(|e| Failure::Data(format!("{} line {}: {e}", path.display(), i + 1)))?;
        out.push(case);
    }
    if out.is_empty() {
        return Err(Failure::Data(format!("{} holds no cases", path.display())));
    }
    Ok(out)
}

fn to_json(value: &impl Serialize) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("reports serialize");
    s.push('\n');
    s
}

#[derive(Serialize)]
struct BuildSummary {
    cases: usize,
    skipped_cases: usize,
    failures: usize,
    experiences: usize,
    indications: usize,
    contraindications: usize,
    edges: usize,
    mean_quality: Option<f64>,
}

fn cmd_build(cfg: &EngineConfig, dataset: &Path, out: &Path, report_path: Option<&Path>) -> Outcome {
    let cases = read_cases(dataset)?;
    let chat = cfg.generation()?;
    let embed = cfg.embedding()?;
    let (g, report) = build_memory(&cases, &chat, &embed, &cfg.construction).map_err(|e| {
        if e.is_provider_failure() {
            Failure::Provider(format!("build: {e}"))
        } else {
            Failure::Data(format!("build: {e}"))
        }
    })?;
    write_snapshot(out, &g).map_err(data)?;
    let stats = GraphStats::of(&g);
    let summary = BuildSummary {
        cases: report.cases,
        skipped_cases: report.skipped_cases.len(),
        failures: report.failures.len(),
        experiences: stats.nodes,
        indications: stats.indications,
        contraindications: stats.contraindications,
        edges: stats.edges,
        mean_quality: stats.mean_quality,
    };
    print!("{}", to_json(&summary));
    if let Some(p) = report_path {
        write_text(p, &to_json(&report))?;
    }
    Ok(())
}

fn policy_for<'a>(
    cfg: &EngineConfig,
    kind: PolicyKind,
    holder: &'a mut Option<Box<dyn ChatProvider>>,
) -> Result<Box<dyn ActionPolicy + 'a>, Failure> {
    Ok(match kind {
        PolicyKind::Greedy => Box::new(cfg.retrieval.greedy()),
        PolicyKind::Llm => {
            let provider = cfg
                .retrieval_policy()
                .map_err(|e| Failure::Data(format!("--policy llm needs a retrieval policy provider: {e}")))?;
            let provider: &'a dyn ChatProvider = &**holder.insert(provider);
            Box::new(LlmPolicy::new(provider, cfg.retrieval.greedy()))
        }
    })
}

fn cmd_retrieve(cfg: &EngineConfig, snapshot: &Path, query: &str, kind: PolicyKind) -> Outcome {
    let g = read_snapshot(snapshot).map_err(data)?;
    if g.is_empty() {
        return Err(Failure::Data("empty memory: the snapshot holds no experiences".into()));
    }
    let mut holder = None;
    let policy = policy_for(cfg, kind, &mut holder)?;
    let chat = cfg.generation()?;
    let embed = cfg.embedding()?;
    let (_, trace) = retrieve(&g, query, &chat, &embed, policy.as_ref(), &cfg.retrieval).map_err(|e| match e {
        RetrievalError::Provider(p) => Failure::Provider(format!("retrieve: {p}")),
        other => Failure::Data(format!("retrieve: {other}")),
    })?;
    print!("{}", trace.to_json());
    Ok(())
}

fn cmd_episode(cfg: &EngineConfig, snapshot: &Path, case: &Path, log: Option<&Path>, kind: PolicyKind) -> Outcome {
    let cases = read_cases(case)?;
    let mut g = read_snapshot(snapshot).map_err(data)?;
    if g.is_empty() {
        return Err(Failure::Data("empty memory: the snapshot holds no experiences".into()));
    }
    let mut holder = None;
    let policy = policy_for(cfg, kind, &mut holder)?;
    let chat = cfg.generation()?;
    let embed = cfg.embedding()?;
    let ctx = EpisodeContext {
        chat: &chat,
        embed: &embed,
        policy: policy.as_ref(),
        retrieval: &cfg.retrieval,
        evolution: &cfg.evolution,
    };
    let mut records = Vec::new();
    for c in &cases {
        let rec = run_episode(&mut g, c, &ctx).map_err(|e| {
            let msg = format!("episode {} failed at stage {}: {e}", c.case_id, e.stage());
            if e.is_provider_failure() {
                Failure::Provider(msg)
            } else {
                Failure::Data(msg)
            }
        })?;
        println!(
            "{}: {} retrieved={} delta={:+}",
            rec.task_id,
            if rec.correct { "correct" } else { "wrong" },
            rec.retrieved.len(),
            rec.delta
        );
        records.push(rec);
    }
    write_snapshot(snapshot, &g).map_err(data)?;
    let log = log.map(Path::to_path_buf).unwrap_or_else(|| {
        let mut name = snapshot.as_os_str().to_owned();
        name.push(".episodes.jsonl");
        PathBuf::from(name)
    });
    for rec in &records {
        append_record(&log, rec).map_err(|e| Failure::Data(format!("cannot append to {}: {e}", log.display())))?;
    }
    Ok(())
}

fn cmd_simulate(cfg: &EngineConfig, scenario: Option<&Path>, out: &Path) -> Outcome {
    let s: SyntheticScenario = match scenario {
        Some(p) => toml::from_str(&read_text(p)?).map_err(|e| Failure::Data(format!("{}: {e}", p.display())))?,
        None => SyntheticScenario::default(),
    };
    let result = simulate(&s, &cfg.edge_builder(), &cfg.retrieval, &cfg.evolution).map_err(data)?;
    write_text(out, &result.to_csv())?;
    let f = result.final_row();
    let show = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    println!(
        "episodes={} correct={} mean_q_good={} mean_q_bad={} spearman={}",
        f.episode,
        result.correct_episodes,
        show(f.mean_q_good),
        show(f.mean_q_bad),
        show(f.spearman)
    );
    Ok(())
}

fn cmd_stats(snapshot: &Path) -> Outcome {
    let g = read_snapshot(snapshot).map_err(data)?;
    print!("{}", GraphStats::of(&g).render());
    Ok(())
}

fn cmd_export(snapshot: &Path, _format: Format, layer: Layer, id: Option<&str>, out: Option<&Path>) -> Outcome {
    let g = read_snapshot(snapshot).map_err(data)?;
    let text = match (layer, id) {
        (Layer::Experience, _) => experience_dot(&g),
        (Layer::Entity, Some(id)) => entity_dot(&g, &ExperienceId::new(id)).map_err(data)?,
        (Layer::Entity, None) => return Err(Failure::Data("--layer entity needs --id".into())),
    };
    match out {
        Some(p) => write_text(p, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_replay(cfg: &EngineConfig, snapshot: &Path, log: &Path, out: &Path) -> Outcome {
    let mut g = read_snapshot(snapshot).map_err(data)?;
    let records = read_log(log).map_err(data)?;
    replay(&mut g, &records, &cfg.evolution).map_err(data)?;
    write_snapshot(out, &g).map_err(data)?;
    println!("replayed {} episodes", records.len());
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    let cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Build { dataset, out, report } => cmd_build(&cfg, &dataset, &out, report.as_deref()),
        Command::Retrieve { snapshot, query, policy } => cmd_retrieve(&cfg, &snapshot, &query, policy),
        Command::Episode { snapshot, case, log, policy } => cmd_episode(&cfg, &snapshot, &case, log.as_deref(), policy),
        Command::Simulate { scenario, out } => cmd_simulate(&cfg, scenario.as_deref(), &out),
        Command::Stats { snapshot } => cmd_stats(&snapshot),
        Command::Export { snapshot, format, layer, id, out } => {
            cmd_export(&snapshot, format, layer, id.as_deref(), out.as_deref())
        }
        Command::Replay { snapshot, log, out } => cmd_replay(&cfg, &snapshot, &log, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Data(msg) | Failure::Provider(msg)) = &f;
            eprintln!("gsem: {msg}");
            ExitCode::from(f.code())
        }
    }
}
