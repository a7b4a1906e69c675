//! Command-line front end. Each command renders to a string so tests can
//! check the output without spawning the binary.

use std::fmt::Write as _;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use hmtd_core::context::Connectivity;
use hmtd_core::prescription::SessionId;
use hmtd_core::tag::{TagIdentity, TagKind, TagMemory, HISTORY_CAPACITY, MAGIC};
use hmtd_core::taskmodel::{continuity_score, derive_configurations, load_irvo, load_referential, load_task_tree, validate_irvo};
use hmtd_core::trace::{read_log, replay_events, TraceEvent};
use hmtd_core::Minutes;
use thiserror::Error;

use crate::clock::Clock;
use crate::error::ServiceError;
use crate::http::{self, ServeConfig};
use crate::scenario::{self, ScenarioScript};
use crate::service::ServiceConfig;
use crate::world::{Catalog, DataLayout};

/// Overrides `--data` when set.
pub const DATA_ENV: &str = "HMTD_DATA";

#[derive(Debug, Parser)]
#[command(name = "hmtd", version, about = "Maintenance assistant: prescribed interventions, in-situ tags, traceability")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct DataArg {
    /// Data directory (trace.log, tags/, sgdt/, workflows/, operators.json, experts.json)
    #[arg(long, default_value = "data")]
    pub data: PathBuf,
}

impl DataArg {
    pub fn resolve(&self) -> PathBuf {
        data_dir(&self.data, std::env::var_os(DATA_ENV).map(PathBuf::from))
    }
}

/// The environment variable wins over the flag.
pub fn data_dir(flag: &Path, env: Option<PathBuf>) -> PathBuf {
    env.filter(|p| !p.as_os_str().is_empty()).unwrap_or_else(|| flag.to_path_buf())
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Serve the HTTP endpoints
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
        #[command(flatten)]
        data: DataArg,
        /// Use a logical clock starting at this many minutes since 2000-01-01
        #[arg(long)]
        clock_start: Option<u32>,
        /// Minutes the logical clock advances per reading
        #[arg(long, default_value_t = 1)]
        clock_step: u32,
        /// Start without network access to the technical data server
        #[arg(long)]
        offline: bool,
    },
    /// Run a scenario script and print its transcript
    Run {
        scenario: PathBuf,
        #[command(flatten)]
        data: DataArg,
        /// Fixture directory copied into the data directory first (existing files are kept)
        #[arg(long)]
        world: Option<PathBuf>,
        /// Also write the transcript to this file
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Inspect or create tag snapshot files
    #[command(subcommand)]
    Tag(TagCommand),
    /// Query the traceability ledger
    #[command(subcommand)]
    Trace(TraceCommand),
    /// Analyze task models
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
}

#[derive(Debug, Subcommand)]
pub enum TagCommand {
    /// Print header fields and decoded history
    Dump { file: PathBuf },
    /// Create an initialized tag
    Make { kind: String, id: u32, file: PathBuf },
}

#[derive(Debug, Subcommand)]
pub enum TraceCommand {
    /// Every event concerning a part
    Parts {
        id: u32,
        #[command(flatten)]
        data: DataArg,
    },
    /// Every event concerning a tool
    Tools {
        id: u32,
        #[command(flatten)]
        data: DataArg,
    },
    /// Rebuild a session's state from its events
    Replay {
        session: u32,
        #[command(flatten)]
        data: DataArg,
    },
}

#[derive(Debug, Subcommand)]
pub enum AnalyzeCommand {
    /// Validate an IRVO model and score its perceptual continuity
    Irvo { file: PathBuf },
    /// Derive minimal device configurations for a task tree
    Devices { tree: PathBuf, referential: PathBuf },
}

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad input, configuration or environment.
    #[error("{0}")]
    Config(String),
    /// The command ran but its subject failed a check.
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Failed(_) => ExitCode::from(1),
            CliError::Config(_) => ExitCode::from(2),
        }
    }
}

impl From<ServiceError> for CliError {
    fn from(e: ServiceError) -> Self {
        CliError::Config(format!("{}: {e}", e.code()))
    }
}

/// Output of a command that ran to the end. `failure` carries the reason
/// when the exit code must be 1.
#[derive(Debug, Default)]
pub struct Rendered {
    pub text: String,
    pub failure: Option<String>,
}

fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn tag_dump(path: &Path) -> Result<Rendered, CliError> {
    let tag = TagMemory::load(path).map_err(|e| CliError::Config(e.to_string()))?;
    let bytes = tag.as_bytes();
    let mut out = String::new();
    let w = &mut out;
    writeln!(w, "file         {}", path.display()).ok();
    writeln!(w, "magic        {:02X} {:02X}{}", bytes[0], bytes[1], if bytes[..2] == MAGIC { "" } else { " (bad)" }).ok();
    writeln!(w, "version      {}", bytes[2]).ok();
    let kind = TagKind::from_code(bytes[3]).map_or_else(|| "unknown".to_string(), |k| k.to_string());
    writeln!(w, "kind         {kind} (0x{:02X})", bytes[3]).ok();
    writeln!(w, "entity-id    {}", u32::from_be_bytes([bytes[4], bytes[5], bytes[6], bytes[7]])).ok();
    writeln!(w, "records      {} of {HISTORY_CAPACITY}, head {}", tag.record_count(), tag.head_index()).ok();
    writeln!(w, "flags        0x{:02X}", tag.status_flags()).ok();
    let verified = tag.verify();
    writeln!(w, "crc          {:08X} {}", tag.stored_crc(), if verified.is_ok() { "ok" } else { "MISMATCH" }).ok();
    if let Err(e) = verified {
        return Ok(Rendered { text: out, failure: Some(e.to_string()) });
    }
    if tag.read_identity().map(|i| i.kind) == Ok(TagKind::Part) {
        writeln!(w, "defective    {}", tag.is_defective().unwrap_or(false)).ok();
    }
    if let Ok(history) = tag.read_history() {
        writeln!(w, "history (oldest first)").ok();
        writeln!(w, "  {:>12} {:>8} {:>8} {:<17} {:<17} {:<24} {:>7} {:>5}", "intervention", "badge", "workflow", "start", "end", "outcome", "defects", "steps").ok();
        for r in history {
            writeln!(
                w,
                "  {:>12} {:>8} {:>8} {:<17} {:<17} {:<24} {:>7} {:>5}",
                r.intervention_id,
                r.operator_badge_id,
                r.workflow_id,
                r.start_time.to_string(),
                r.end_time.to_string(),
                format!("{:?}", r.outcome),
                r.defect_count,
                r.step_count
            )
            .ok();
        }
    }
    Ok(Rendered { text: out, failure: None })
}

pub fn tag_make(kind: &str, id: u32, path: &Path) -> Result<Rendered, CliError> {
    let kind = TagKind::from_str(kind).map_err(|e| CliError::Config(e.to_string()))?;
    let identity = TagIdentity::new(kind, id).map_err(|e| CliError::Config(e.to_string()))?;
    TagMemory::init(identity).save(path).map_err(|e| CliError::Config(e.to_string()))?;
    Ok(Rendered { text: format!("wrote {identity} to {}\n", path.display()), failure: None })
}

fn ledger_events(data_dir: &Path) -> Result<Vec<TraceEvent>, CliError> {
    let path = DataLayout::new(data_dir).trace_log();
    if !path.exists() {
        return Ok(Vec::new());
    }
    Ok(read_log(&path).map_err(|e| CliError::Config(e.to_string()))?.events)
}

pub fn event_table(events: &[TraceEvent]) -> String {
    let mut out = String::new();
    writeln!(out, "{:>5} {:<17} {:>7} {:<21} {:>6} {:>7} {:>5} {:>5} detail", "seq", "time", "session", "kind", "badge", "machine", "tool", "part").ok();
    let opt = |v: Option<u32>| v.map_or("-".to_string(), |v| v.to_string());
    for e in events {
        let part = match (e.part_id, e.replacement_part_id) {
            (Some(old), Some(new)) => format!("{old}>{new}"),
            (part, _) => opt(part),
        };
        writeln!(
            out,
            "{:>5} {:<17} {:>7} {:<21} {:>6} {:>7} {:>5} {:>5} {}",
            e.seq,
            e.timestamp.to_string(),
            e.session_id.0,
            e.kind.to_string(),
            e.operator_badge_id,
            e.machine_id,
            opt(e.tool_id),
            part,
            e.detail
        )
        .ok();
    }
    writeln!(out, "{} event(s)", events.len()).ok();
    out
}

pub fn trace_parts(data_dir: &Path, part_id: u32) -> Result<Rendered, CliError> {
    let events: Vec<_> = ledger_events(data_dir)?.into_iter().filter(|e| e.touches_part(part_id)).collect();
    Ok(Rendered { text: event_table(&events), failure: None })
}

pub fn trace_tools(data_dir: &Path, tool_id: u32) -> Result<Rendered, CliError> {
    let events: Vec<_> = ledger_events(data_dir)?.into_iter().filter(|e| e.touches_tool(tool_id)).collect();
    Ok(Rendered { text: event_table(&events), failure: None })
}

pub fn trace_replay(data_dir: &Path, session: u32) -> Result<Rendered, CliError> {
    let layout = DataLayout::new(data_dir);
    let catalog = Catalog::load(&layout)?;
    let events: Vec<_> = ledger_events(data_dir)?.into_iter().filter(|e| e.session_id == SessionId(session)).collect();
    let state = match replay_events(&events, &catalog) {
        Ok(state) => state,
        Err(e) => return Ok(Rendered { text: format!("replay of session {session}: {e}\n"), failure: Some(e.to_string()) }),
    };
    let mut out = event_table(&events);
    let opt_time = |t: Option<Minutes>| t.map_or("-".to_string(), |t| t.to_string());
    writeln!(out, "session      {session}").ok();
    writeln!(out, "operator     {} ({})", state.operator().badge_id, state.operator().name).ok();
    writeln!(out, "workflow     {} on machine {}", state.workflow().workflow_id, state.machine_id()).ok();
    writeln!(out, "phase        {:?}", state.phase()).ok();
    writeln!(out, "cursor       {}/{} {:?}", state.step_cursor(), state.workflow().step_count(), state.scan_substate()).ok();
    writeln!(out, "started      {}", opt_time(state.start_time())).ok();
    writeln!(out, "ended        {}", opt_time(state.end_time())).ok();
    writeln!(out, "defects      {}", state.defect_count()).ok();
    for (old, new) in state.replaced_parts() {
        writeln!(out, "replaced     {old} -> {new}").ok();
    }
    Ok(Rendered { text: out, failure: None })
}

pub fn analyze_irvo(path: &Path) -> Result<Rendered, CliError> {
    let model = load_irvo(&read(path)?).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let mut out = String::new();
    writeln!(out, "entities     {}", model.entities.len()).ok();
    writeln!(out, "arrows       {}", model.arrows.len()).ok();
    writeln!(out, "frames       {}", model.fusion_frames.len()).ok();
    let violations = validate_irvo(&model);
    if !violations.is_empty() {
        writeln!(out, "violations   {}", violations.len()).ok();
        for v in &violations {
            writeln!(out, "  {v}").ok();
        }
        return Ok(Rendered { text: out, failure: Some(format!("{} violation(s)", violations.len())) });
    }
    writeln!(out, "violations   none").ok();
    match continuity_score(&model) {
        Ok(score) => {
            writeln!(out, "continuity   {score} perceived source(s)").ok();
            Ok(Rendered { text: out, failure: None })
        }
        Err(e) => Ok(Rendered { text: out, failure: Some(e.to_string()) }),
    }
}

pub fn analyze_devices(tree: &Path, referential: &Path) -> Result<Rendered, CliError> {
    let tree_doc = load_task_tree(&read(tree)?).map_err(|e| CliError::Config(format!("{}: {e}", tree.display())))?;
    let devices =
        load_referential(&read(referential)?).map_err(|e| CliError::Config(format!("{}: {e}", referential.display())))?;
    let mut out = String::new();
    let needs: Vec<String> = tree_doc.required_needs().iter().map(|m| format!("{m:?}")).collect();
    writeln!(out, "task         {}", tree_doc.name).ok();
    writeln!(out, "needs        {}", needs.join(", ")).ok();
    match derive_configurations(&tree_doc, &devices) {
        Ok(configs) => {
            writeln!(out, "configurations {}", configs.len()).ok();
            for (i, c) in configs.iter().enumerate() {
                writeln!(out, "  {}. {}", i + 1, c.devices.join(" + ")).ok();
            }
            Ok(Rendered { text: out, failure: None })
        }
        Err(e) => {
            writeln!(out, "{e}").ok();
            Ok(Rendered { text: out, failure: Some(e.to_string()) })
        }
    }
}

pub fn run(scenario_path: &Path, data_dir: &Path, world: Option<&Path>, out: Option<&Path>) -> Result<Rendered, CliError> {
    let script = ScenarioScript::load(scenario_path)?;
    let transcript = scenario::run_in(&script, data_dir, world)?;
    if let Some(out) = out {
        std::fs::write(out, &transcript.text).map_err(|e| CliError::Config(format!("{}: {e}", out.display())))?;
    }
    let failure = transcript.deviation.map(|d| format!("deviation at step {} (line {}): {}", d.step, d.line, d.message));
    Ok(Rendered { text: transcript.text, failure })
}

fn serve(addr: SocketAddr, data_dir: PathBuf, clock: Clock, connectivity: Connectivity) -> Result<Rendered, CliError> {
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let config = ServeConfig { addr, service: ServiceConfig { data_dir, clock, connectivity } };
    runtime.block_on(http::serve(config))?;
    Ok(Rendered::default())
}

pub fn execute(cli: Cli) -> Result<Rendered, CliError> {
    match cli.command {
        Command::Serve { port, host, data, clock_start, clock_step, offline } => {
            let clock = clock_start.map_or(Clock::Wall, |start| Clock::logical(Minutes(start), clock_step));
            let connectivity = if offline { Connectivity::Offline } else { Connectivity::Online };
            serve(SocketAddr::new(host, port), data.resolve(), clock, connectivity)
        }
        Command::Run { scenario, data, world, out } => run(&scenario, &data.resolve(), world.as_deref(), out.as_deref()),
        Command::Tag(TagCommand::Dump { file }) => tag_dump(&file),
        Command::Tag(TagCommand::Make { kind, id, file }) => tag_make(&kind, id, &file),
        Command::Trace(TraceCommand::Parts { id, data }) => trace_parts(&data.resolve(), id),
        Command::Trace(TraceCommand::Tools { id, data }) => trace_tools(&data.resolve(), id),
        Command::Trace(TraceCommand::Replay { session, data }) => trace_replay(&data.resolve(), session),
        Command::Analyze(AnalyzeCommand::Irvo { file }) => analyze_irvo(&file),
        Command::Analyze(AnalyzeCommand::Devices { tree, referential }) => analyze_devices(&tree, &referential),
    }
}
