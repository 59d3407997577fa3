//! Command-line front end.
//!
//! Exit status 0 means success, 1 a parse or configuration problem (the
//! message names the file and line), 2 a failure while running.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{ArgAction, Args, CommandFactory, Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;

use crate::harness::{
    estimate_tightness, load_clients, load_traces, run_enumeration_style, run_live_style,
    write_circuit_log, ClientSpec, EnumerationReport, ExperimentConfig, ExperimentKind,
    HarnessError, LiveReport, TightnessReport,
};
use crate::lp::{dump_tableau, SelectionProblem};
use crate::routing::{bidirectional_path_set, bidirectional_paths, TreeCache, DEFAULT_ENUMERATE_CAP};
use crate::selection::{
    Astoria, AstoriaConfig, Consensus, GuardSet, SelectionError, SelectorKind,
    DEFAULT_MAX_REQUESTS_PER_CIRCUIT,
};
use crate::threat::{CircuitSpec, ThreatConfig, ThreatModel};
use crate::topology::{
    load_countries, load_siblings, load_topology, AdversaryMode, AsId, CountryCode, TopologyBundle,
    TopologyError,
};

#[derive(Debug, Parser)]
#[command(name = "astoria", version, about = "AS-aware relay selection experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run an experiment and write report.json and circuits.csv.
    #[command(args_override_self = true)]
    Run(RunArgs),
    /// Assess one circuit and print the result as JSON.
    #[command(args_override_self = true)]
    Assess(AssessArgs),
    /// Print the bidirectional path set between two ASes.
    #[command(args_override_self = true)]
    Paths(PathsArgs),
    /// Print the minimax program for one client and destination.
    #[command(name = "lp-dump", args_override_self = true)]
    LpDump(LpDumpArgs),
}

#[derive(Debug, Args)]
pub struct TopologyArgs {
    /// AS relationship file (`a|b|rel`).
    #[arg(long)]
    pub topology: PathBuf,
    /// Sibling file (`org|asn`).
    #[arg(long)]
    pub siblings: Option<PathBuf>,
    /// Country file (`asn|CC`).
    #[arg(long)]
    pub countries: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ThreatArgs {
    /// Adversary granularity. Defaults to the experiment's own.
    #[arg(long, value_enum)]
    pub mode: Option<AdversaryMode>,
    /// Leave the client and destination ASes out of the leg path sets.
    #[arg(long)]
    pub exclude_endpoints: bool,
    /// In state mode, only count this country as an adversary.
    #[arg(long)]
    pub country_filter: Option<CountryCode>,
    /// Skip (entry, exit) grid pairs sharing an AS.
    #[arg(long)]
    pub exclude_same_as_pairs: bool,
}

impl ThreatArgs {
    fn config(&self) -> ThreatConfig {
        ThreatConfig {
            exclude_endpoints: self.exclude_endpoints,
            country_filter: self.country_filter,
            exclude_same_as_pairs: self.exclude_same_as_pairs,
        }
    }
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Flat `key=value` file using the long flag names; flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub topology: TopologyArgs,
    /// Relay CSV (`fingerprint,asn,bandwidth,flags,net16,family`).
    #[arg(long)]
    pub consensus: PathBuf,
    /// Trace CSV (`site,dst_asn,is_main`).
    #[arg(long)]
    pub traces: PathBuf,
    /// Client file (`label,asn`).
    #[arg(long)]
    pub clients: PathBuf,
    #[arg(long, value_enum)]
    pub experiment: ExperimentKind,
    /// Relay selector for live experiments [default: vanilla].
    #[arg(long, value_enum)]
    pub selector: Option<SelectorKind>,
    #[command(flatten)]
    pub threat: ThreatArgs,
    /// Guards per client in live experiments.
    #[arg(long, default_value_t = 3)]
    pub guard_size: usize,
    /// Guard sets drawn per size in E5.
    #[arg(long, default_value_t = 20)]
    pub guard_sets: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Path enumeration cap for tightness estimation.
    #[arg(long, default_value_t = DEFAULT_ENUMERATE_CAP)]
    pub enumerate_cap: usize,
    /// Minimum safe/assessable ratio before the AS-aware selector falls
    /// back to the minimax distribution.
    #[arg(long, default_value_t = 0.0)]
    pub safe_threshold: f64,
    /// Requests served by one circuit under vanilla and uniform selection.
    #[arg(long, default_value_t = DEFAULT_MAX_REQUESTS_PER_CIRCUIT)]
    pub max_requests: u32,
    /// Also estimate how many paths of each vulnerable circuit are vulnerable.
    #[arg(long)]
    pub tightness: bool,
    /// Worker threads [default: available cores].
    #[arg(long)]
    pub workers: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AssessArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub topology: TopologyArgs,
    #[command(flatten)]
    pub threat: ThreatArgs,
    #[arg(long)]
    pub src: AsId,
    #[arg(long)]
    pub entry: AsId,
    #[arg(long)]
    pub exit: AsId,
    #[arg(long)]
    pub dst: AsId,
}

#[derive(Debug, Args)]
pub struct PathsArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub topology: TopologyArgs,
    #[arg(long)]
    pub a: AsId,
    #[arg(long)]
    pub b: AsId,
    /// Also list the individual paths in both directions.
    #[arg(long)]
    pub enumerate: bool,
    #[arg(long, default_value_t = DEFAULT_ENUMERATE_CAP)]
    pub enumerate_cap: usize,
}

#[derive(Debug, Args)]
pub struct LpDumpArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub topology: TopologyArgs,
    #[command(flatten)]
    pub threat: ThreatArgs,
    #[arg(long)]
    pub consensus: PathBuf,
    #[arg(long)]
    pub src: AsId,
    #[arg(long)]
    pub dst: AsId,
    /// Guard fingerprints, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub guards: Vec<String>,
    /// Restrict the program to vulnerable pairs, as the selector does below
    /// its safe threshold.
    #[arg(long)]
    pub vulnerable_only: bool,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{}: {message}", location(.file, *.line))]
    Input {
        file: PathBuf,
        line: Option<usize>,
        message: String,
    },
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

fn location(file: &Path, line: Option<usize>) -> String {
    match line {
        Some(l) => format!("{}:{l}", file.display()),
        None => file.display().to_string(),
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input { .. } | CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    fn input(file: &Path, line: Option<usize>, message: impl ToString) -> Self {
        CliError::Input {
            file: file.to_path_buf(),
            line,
            message: message.to_string(),
        }
    }
}

fn runtime(e: impl ToString) -> CliError {
    CliError::Runtime(e.to_string())
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::input(path, None, e))
}

fn topology_error(path: &Path, e: TopologyError) -> CliError {
    CliError::input(path, e.line(), e)
}

pub fn load_bundle(args: &TopologyArgs) -> Result<TopologyBundle, CliError> {
    let graph = load_topology(open(&args.topology)?).map_err(|e| topology_error(&args.topology, e))?;
    let mut bundle = TopologyBundle::new(graph);
    if let Some(path) = &args.siblings {
        bundle.orgs = load_siblings(open(path)?).map_err(|e| topology_error(path, e))?;
    }
    if let Some(path) = &args.countries {
        bundle.countries = load_countries(open(path)?).map_err(|e| topology_error(path, e))?;
    }
    Ok(bundle)
}

pub fn load_consensus(path: &Path) -> Result<Consensus, CliError> {
    let stamp = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Consensus::from_csv(open(path)?, stamp).map_err(|e| match e {
        SelectionError::Parse { line, reason } => CliError::input(path, Some(line as usize), reason),
        other => CliError::input(path, None, other),
    })
}

fn harness_input_error(path: &Path, e: HarnessError) -> CliError {
    match e {
        HarnessError::Parse { line, reason } => CliError::input(path, Some(line), reason),
        other => CliError::input(path, None, other),
    }
}

fn harness_error(e: HarnessError) -> CliError {
    match e {
        HarnessError::UnknownAs(_) | HarnessError::Config(_) => CliError::Config(e.to_string()),
        other => runtime(other),
    }
}

#[derive(Serialize)]
struct InputSummary {
    topology: PathBuf,
    siblings: Option<PathBuf>,
    countries: Option<PathBuf>,
    consensus: PathBuf,
    traces: PathBuf,
    clients: PathBuf,
    ases: usize,
    as_edges: usize,
    relays: usize,
    consensus_timestamp: String,
    sites: usize,
    requests: usize,
}

#[derive(Serialize)]
struct ClientSeed<'a> {
    label: &'a str,
    asn: AsId,
    stream: u64,
}

#[derive(Serialize)]
struct Seeds<'a> {
    master: u64,
    clients: Vec<ClientSeed<'a>>,
}

#[derive(Serialize)]
#[serde(untagged)]
enum Metrics {
    Live(LiveReport),
    Enumeration(EnumerationReport),
}

#[derive(Serialize)]
struct Report<'a> {
    config: &'a ExperimentConfig,
    seeds: Seeds<'a>,
    inputs: InputSummary,
    clients: &'a [ClientSpec],
    metrics: Metrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    tightness: Option<TightnessReport>,
}

/// Builds the experiment configuration, warning about ignored options.
pub fn experiment_config(args: &RunArgs, warn: &mut dyn Write) -> ExperimentConfig {
    let kind = args.experiment;
    let mut config = ExperimentConfig::new(kind);
    if let Some(selector) = args.selector {
        if kind.is_live() {
            config.selector = selector;
        } else {
            let _ = writeln!(warn, "warning: --selector is ignored for {kind}");
        }
    }
    if args.tightness && !kind.is_live() {
        let _ = writeln!(warn, "warning: --tightness is ignored for {kind}");
    }
    if let Some(mode) = args.threat.mode {
        config.mode = mode;
    }
    config.guard_size = args.guard_size;
    config.guard_sets_per_size = args.guard_sets;
    config.seed = args.seed;
    config.enumerate_cap = args.enumerate_cap;
    config.safe_threshold = args.safe_threshold;
    config.max_requests_per_circuit = args.max_requests;
    config.threat = args.threat.config();
    config.workers = args.workers;
    config
}

pub fn cmd_run(args: &RunArgs, warn: &mut dyn Write) -> Result<(), CliError> {
    let config = experiment_config(args, warn);
    config.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let bundle = load_bundle(&args.topology)?;
    let consensus = load_consensus(&args.consensus)?;
    let sites = load_traces(open(&args.traces)?).map_err(|e| harness_input_error(&args.traces, e))?;
    let clients =
        load_clients(open(&args.clients)?).map_err(|e| harness_input_error(&args.clients, e))?;

    let (metrics, rows, tightness) = if config.kind.is_live() {
        let mut report = run_live_style(&config, &bundle, &consensus, &sites, &clients)
            .map_err(harness_error)?;
        let rows = std::mem::take(&mut report.circuits);
        let tightness = if args.tightness {
            Some(
                estimate_tightness(&rows, &bundle, &config.threat, config.mode, config.enumerate_cap)
                    .map_err(harness_error)?,
            )
        } else {
            None
        };
        (Metrics::Live(report), rows, tightness)
    } else {
        let report = run_enumeration_style(&config, &bundle, &consensus, &sites, &clients)
            .map_err(harness_error)?;
        (Metrics::Enumeration(report), Vec::new(), None)
    };

    let report = Report {
        config: &config,
        seeds: Seeds {
            master: config.seed,
            clients: clients
                .iter()
                .enumerate()
                .map(|(i, c)| ClientSeed {
                    label: &c.label,
                    asn: c.asn,
                    stream: (i as u64) << 8,
                })
                .collect(),
        },
        inputs: InputSummary {
            topology: args.topology.topology.clone(),
            siblings: args.topology.siblings.clone(),
            countries: args.topology.countries.clone(),
            consensus: args.consensus.clone(),
            traces: args.traces.clone(),
            clients: args.clients.clone(),
            ases: bundle.graph.node_count(),
            as_edges: bundle.graph.edge_count(),
            relays: consensus.relays().len(),
            consensus_timestamp: consensus.timestamp().to_string(),
            sites: sites.len(),
            requests: sites.iter().map(|s| s.requests.len()).sum(),
        },
        clients: &clients,
        metrics,
        tightness,
    };

    fs::create_dir_all(&args.out).map_err(|e| CliError::input(&args.out, None, e))?;
    let write_err = |path: &Path| {
        let path = path.to_path_buf();
        move |e: io::Error| CliError::Runtime(format!("{}: {e}", path.display()))
    };
    let report_path = args.out.join("report.json");
    let mut w = BufWriter::new(File::create(&report_path).map_err(write_err(&report_path))?);
    serde_json::to_writer_pretty(&mut w, &report).map_err(runtime)?;
    writeln!(w).and_then(|_| w.flush()).map_err(write_err(&report_path))?;

    let log_path = args.out.join("circuits.csv");
    let file = File::create(&log_path).map_err(write_err(&log_path))?;
    write_circuit_log(&rows, BufWriter::new(file)).map_err(runtime)?;
    Ok(())
}

pub fn cmd_assess(args: &AssessArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let bundle = load_bundle(&args.topology)?;
    let cache = TreeCache::new(&bundle.graph);
    let threat = ThreatModel::with_config(&bundle, &cache, args.threat.config());
    let spec = CircuitSpec {
        src: args.src,
        entry: args.entry,
        exit: args.exit,
        dst: args.dst,
    };
    let mode = args.threat.mode.unwrap_or(AdversaryMode::SingleAs);
    let assessment = threat.assess(&spec, mode).map_err(runtime)?;
    #[derive(Serialize)]
    struct Out<'a> {
        circuit: CircuitSpec,
        mode: AdversaryMode,
        #[serde(flatten)]
        assessment: &'a crate::threat::ThreatAssessment,
    }
    let text = serde_json::to_string_pretty(&Out {
        circuit: spec,
        mode,
        assessment: &assessment,
    })
    .map_err(runtime)?;
    writeln!(out, "{text}").map_err(runtime)
}

pub fn cmd_paths(args: &PathsArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let bundle = load_bundle(&args.topology)?;
    let cache = TreeCache::new(&bundle.graph);
    let set = bidirectional_path_set(&cache, args.a, args.b).map_err(runtime)?;
    #[derive(Serialize)]
    struct Out {
        a: AsId,
        b: AsId,
        path_set: Vec<AsId>,
        #[serde(skip_serializing_if = "Option::is_none")]
        paths: Option<Vec<Vec<AsId>>>,
        #[serde(skip_serializing_if = "Option::is_none")]
        truncated: Option<bool>,
    }
    let (paths, truncated) = if args.enumerate {
        let e = bidirectional_paths(&cache, args.a, args.b, args.enumerate_cap).map_err(runtime)?;
        (Some(e.paths), Some(e.truncated))
    } else {
        (None, None)
    };
    let text = serde_json::to_string_pretty(&Out {
        a: args.a,
        b: args.b,
        path_set: set.iter().collect(),
        paths,
        truncated,
    })
    .map_err(runtime)?;
    writeln!(out, "{text}").map_err(runtime)
}

pub fn cmd_lp_dump(args: &LpDumpArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let bundle = load_bundle(&args.topology)?;
    let consensus = load_consensus(&args.consensus)?;
    let guards = args
        .guards
        .iter()
        .map(|fp| {
            consensus
                .find(fp)
                .ok_or_else(|| CliError::Config(format!("guard {fp} is not in the consensus")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let guards = GuardSet::new(&consensus, guards).map_err(|e| CliError::Config(e.to_string()))?;
    let cache = TreeCache::new(&bundle.graph);
    let threat = ThreatModel::with_config(&bundle, &cache, args.threat.config());
    let mode = args.threat.mode.unwrap_or(AdversaryMode::SingleAs);
    let mut astoria = Astoria::new(&threat, mode, AstoriaConfig::default());
    let pairs = astoria
        .assess_pairs(&consensus, &guards, args.src, args.dst)
        .map_err(runtime)?;
    let candidates: Vec<_> = pairs
        .iter()
        .filter(|p| p.assessment.assessable && (!args.vulnerable_only || p.assessment.vulnerable))
        .collect();
    let problem = SelectionProblem::from_pair_attackers(
        candidates.iter().map(|p| (p.entry, p.exit)).collect(),
        candidates.iter().map(|p| p.assessment.attackers.iter().cloned()),
    )
    .map_err(runtime)?;
    let mut text = String::from("# relays\n");
    let mut listed: Vec<usize> = candidates.iter().flat_map(|p| [p.entry, p.exit]).collect();
    listed.sort_unstable();
    listed.dedup();
    for i in listed {
        let r = consensus.relay(i);
        text.push_str(&format!("  {i} = {} (AS{})\n", r.fingerprint, r.asn));
    }
    text.push_str(&dump_tableau(&problem));
    out.write_all(text.as_bytes()).map_err(runtime)
}

/// Splices `--config` file entries into the argument list ahead of the
/// command-line flags so that explicit flags override them.
pub fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>, CliError> {
    let strs: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let mut path: Option<PathBuf> = None;
    for (i, a) in strs.iter().enumerate() {
        if a == "--config" {
            path = strs.get(i + 1).map(PathBuf::from);
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(PathBuf::from(p));
        }
    }
    let (Some(path), Some(sub)) = (path, strs.get(1)) else {
        return Ok(args);
    };
    let command = Cli::command();
    let Some(sub_cmd) = command.find_subcommand(sub) else {
        return Ok(args);
    };
    let text = fs::read_to_string(&path).map_err(|e| CliError::input(&path, None, e))?;
    let mut injected: Vec<OsString> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |msg: String| CliError::input(&path, Some(n + 1), msg);
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("expected key=value, got {line:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        if key == "config" {
            return Err(bad("config files cannot nest".into()));
        }
        let arg = sub_cmd
            .get_arguments()
            .find(|a| a.get_long() == Some(key))
            .ok_or_else(|| bad(format!("unknown key {key:?} for `{sub}`")))?;
        let flag = OsString::from(format!("--{key}"));
        if matches!(arg.get_action(), ArgAction::SetTrue) {
            match value {
                "true" | "1" | "yes" => injected.push(flag),
                "false" | "0" | "no" => {}
                _ => return Err(bad(format!("{key} expects true or false, got {value:?}"))),
            }
        } else {
            injected.push(flag);
            injected.push(OsString::from(value));
        }
    }
    let mut out = args;
    out.splice(2..2, injected);
    Ok(out)
}

/// Parses `args` and runs the selected subcommand, returning the exit code.
pub fn main_with_args(args: Vec<OsString>, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let args = match expand_config(args) {
        Ok(a) => a,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return e.exit_code();
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = write!(err, "{}", e.render());
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = match &cli.command {
        Command::Run(a) => cmd_run(a, err),
        Command::Assess(a) => cmd_assess(a, out),
        Command::Paths(a) => cmd_paths(a, out),
        Command::LpDump(a) => cmd_lp_dump(a, out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
