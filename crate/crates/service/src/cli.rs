//! The `rmm` command line.

use std::ffi::OsString;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use tracing_subscriber::EnvFilter;

use rmm_core::agent_loop::{run_scripted, AgentMode, Engine, Script};
use rmm_core::eval::{compare_reports, evaluate, EvalRunRecord, MetricsReport};
use rmm_core::fixtures::{multi_evidence, planted_facts, BanditFixture};
use rmm_core::transcript::TranscriptStore;

use crate::config::RuntimeConfig;

/// Exit code when an evaluation misses a metric floor.
pub const EXIT_FLOOR: i32 = 1;
/// Exit code for malformed command lines.
pub const EXIT_USAGE: i32 = 2;
/// Exit code for any other failure.
pub const EXIT_ERROR: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "rmm", version, about = "Reflective memory agent: service, evaluation, and bank tools")]
pub struct Cli {
    /// TOML config file; RMM_* environment variables override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the data directory.
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum ModeArg {
    Rmm,
    RagTurn,
    RagSession,
    RagMix,
    LongContext,
    NoHistory,
}

impl From<ModeArg> for AgentMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Rmm => AgentMode::Rmm,
            ModeArg::RagTurn => AgentMode::RagTurn,
            ModeArg::RagSession => AgentMode::RagSession,
            ModeArg::RagMix => AgentMode::RagMix,
            ModeArg::LongContext => AgentMode::LongContext,
            ModeArg::NoHistory => AgentMode::NoHistory,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Format {
    Table,
    Tsv,
    Json,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        bind: Option<String>,
    },
    /// Interactive chat. `/end` closes the session and prints its reflection report.
    Chat {
        #[arg(long)]
        owner: Option<String>,
    },
    /// Replay a transcript JSONL file into an owner's bank.
    Ingest {
        transcripts: PathBuf,
        #[arg(long)]
        owner: Option<String>,
    },
    /// Run a script on a fresh in-memory engine and print its metrics report.
    Eval {
        script: PathBuf,
        #[arg(long, value_enum, default_value = "rmm")]
        mode: ModeArg,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// Also write the raw run record here.
        #[arg(long)]
        record: Option<PathBuf>,
    },
    /// Tabulate metrics reports or run records side by side.
    Compare {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
        #[arg(long, default_value_t = 5)]
        k: usize,
    },
    /// List an owner's memory entries.
    InspectBank {
        #[arg(long)]
        owner: Option<String>,
        #[arg(long)]
        json: bool,
    },
    /// Write the synthetic planted-fact, multi-evidence, and bandit fixtures.
    GenFixtures {
        #[arg(long)]
        out: PathBuf,
    },
    /// Show or reset an owner's reranker parameters.
    Params {
        #[command(subcommand)]
        action: ParamsAction,
    },
}

#[derive(Debug, Subcommand)]
pub enum ParamsAction {
    Show {
        #[arg(long)]
        owner: Option<String>,
    },
    Reset {
        #[arg(long)]
        owner: Option<String>,
    },
}

struct Floored(Vec<String>);

fn open_engine(cfg: &RuntimeConfig, owner: Option<&str>) -> anyhow::Result<Engine> {
    let agent = cfg.agent_for(owner);
    let paths = cfg.owner_paths(&agent.owner);
    Ok(Engine::open(agent, cfg.clients()?, cfg.new_clock(), Some(paths))?)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Runs a script the way `eval` does and returns the report.
pub fn eval_script(cfg: &RuntimeConfig, script: &Script, mode: AgentMode, seed: u64, k: usize) -> anyhow::Result<(EvalRunRecord, MetricsReport)> {
    let mut agent = cfg.agent.clone();
    agent.mode = mode;
    agent.seed = seed;
    let mut engine = Engine::open(agent, cfg.clients()?, cfg.new_clock(), None)?;
    let record = run_scripted(&mut engine, script, None)?;
    let report = evaluate(&record, cfg.judge()?.as_ref(), k)?;
    Ok((record, report))
}

fn chat(cfg: &RuntimeConfig, owner: Option<&str>, input: &mut dyn BufRead, out: &mut dyn Write) -> anyhow::Result<()> {
    let mut engine = open_engine(cfg, owner)?;
    let mut session = engine.start_session()?.session_id;
    writeln!(out, "session {session} (type /end to close it, /quit to leave)")?;
    let mut line = String::new();
    loop {
        line.clear();
        write!(out, "> ")?;
        out.flush()?;
        if input.read_line(&mut line)? == 0 {
            break;
        }
        let text = line.trim();
        match text {
            "" => continue,
            "/quit" => break,
            "/end" => {
                let report = engine.end_session(&session)?;
                writeln!(out, "{}", serde_json::to_string_pretty(&report)?)?;
                session = engine.start_session()?.session_id;
                writeln!(out, "session {session}")?;
            }
            _ => {
                let r = engine.run_turn(&session, text)?;
                writeln!(out, "{}", r.response)?;
            }
        }
    }
    if engine.active_session().is_some_and(|s| !s.is_empty()) {
        let report = engine.end_session(&session)?;
        writeln!(out, "{}", serde_json::to_string_pretty(&report)?)?;
    }
    Ok(())
}

fn load_report(path: &Path, cfg: &RuntimeConfig, k: usize) -> anyhow::Result<MetricsReport> {
    let v: serde_json::Value = read_json(path)?;
    if v.get("aggregates").is_some() {
        return Ok(serde_json::from_value(v)?);
    }
    let record: EvalRunRecord = serde_json::from_value(v).with_context(|| format!("{} is neither a report nor a run record", path.display()))?;
    Ok(evaluate(&record, cfg.judge()?.as_ref(), k)?)
}

fn execute(cli: Cli, input: &mut dyn BufRead, out: &mut dyn Write) -> anyhow::Result<Option<Floored>> {
    let mut cfg = RuntimeConfig::load(cli.config.as_deref())?;
    if let Some(d) = cli.data_dir {
        cfg.data_dir = d;
    }
    let _ = tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_new(&cfg.log_level).unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .try_init();
    match cli.command {
        Command::Serve { bind } => {
            if let Some(b) = bind {
                cfg.bind = b;
            }
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(crate::server::run(cfg))?;
        }
        Command::Chat { owner } => chat(&cfg, owner.as_deref(), input, out)?,
        Command::Ingest { transcripts, owner } => {
            let store = TranscriptStore::load(&transcripts)?;
            if store.is_empty() {
                bail!("{} holds no sessions", transcripts.display());
            }
            let mut engine = open_engine(&cfg, owner.as_deref())?;
            for report in engine.replay(store.sessions())? {
                writeln!(out, "{}", serde_json::to_string(&report)?)?;
            }
        }
        Command::Eval { script, mode, seed, k, record } => {
            let script: Script = Script::load(&script)?;
            let seed = seed.unwrap_or(cfg.agent.seed);
            let (rec, report) = eval_script(&cfg, &script, mode.into(), seed, k)?;
            if let Some(p) = record {
                std::fs::write(&p, rec.to_json()).with_context(|| format!("writing {}", p.display()))?;
            }
            writeln!(out, "{}", report.to_json())?;
            let failures = cfg.floors.failures(&report);
            if !failures.is_empty() {
                return Ok(Some(Floored(failures)));
            }
        }
        Command::Compare { reports, format, k } => {
            let reports = reports.iter().map(|p| load_report(p, &cfg, k)).collect::<anyhow::Result<Vec<_>>>()?;
            let cmp = compare_reports(&reports)?;
            match format {
                Format::Table => write!(out, "{}", cmp.to_table())?,
                Format::Tsv => write!(out, "{}", cmp.to_tsv())?,
                Format::Json => writeln!(out, "{}", cmp.to_json())?,
            }
        }
        Command::InspectBank { owner, json } => {
            let engine = open_engine(&cfg, owner.as_deref())?;
            let bank = engine.bank();
            if json {
                write!(out, "{}", bank.to_jsonl())?;
            } else {
                writeln!(out, "bank {} ({} entries, embedder {})", bank.bank_id(), bank.len(), bank.embedder_id())?;
                for e in bank.entries() {
                    let turns: usize = e.segments.iter().map(|s| s.turn_indices.len()).sum();
                    writeln!(out, "{}  merges={}  turns={}  {}", e.entry_id, e.merge_count, turns, e.topic_summary)?;
                }
            }
        }
        Command::GenFixtures { out: dir } => {
            std::fs::create_dir_all(&dir)?;
            let files = [
                ("planted.json", serde_json::to_string_pretty(&planted_facts())?),
                ("multi_evidence.json", serde_json::to_string_pretty(&multi_evidence())?),
                ("bandit.json", serde_json::to_string_pretty(&BanditFixture::standard())?),
            ];
            for (name, body) in files {
                let p = dir.join(name);
                std::fs::write(&p, body + "\n")?;
                writeln!(out, "{}", p.display())?;
            }
        }
        Command::Params { action } => match action {
            ParamsAction::Show { owner } => {
                let engine = open_engine(&cfg, owner.as_deref())?;
                write!(out, "{}", engine.reranker().to_json())?;
            }
            ParamsAction::Reset { owner } => {
                let mut engine = open_engine(&cfg, owner.as_deref())?;
                engine.reset_params()?;
                writeln!(out, "reset {}", engine.config().owner)?;
            }
        },
    }
    Ok(None)
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I, input: &mut dyn BufRead, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = if e.use_stderr() { write!(err, "{e}") } else { write!(out, "{e}") };
            return code;
        }
    };
    match execute(cli, input, out) {
        Ok(None) => 0,
        Ok(Some(Floored(failures))) => {
            for f in failures {
                let _ = writeln!(err, "floor failed: {f}");
            }
            EXIT_FLOOR
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e:#}");
            EXIT_ERROR
        }
    }
}
