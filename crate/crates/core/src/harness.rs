//! Experiment harness: desk-scale replays of the live and enumeration
//! experiments, plus the statistics used to summarize them.
//!
//! Every run derives its randomness from one master seed. Each client gets
//! its own ChaCha stream, so results do not depend on worker count or
//! scheduling order.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::routing::{TreeCache, DEFAULT_ENUMERATE_CAP};
use crate::selection::{
    choose_guards, perfect_balance_distribution, AstoriaConfig, Client, Consensus, GuardSet,
    Provenance, SelectionError, SelectorKind, DEFAULT_MAX_REQUESTS_PER_CIRCUIT,
};
use crate::threat::{AdversaryMode, CircuitSpec, ThreatConfig, ThreatError, ThreatModel};
use crate::topology::{AsId, CountryCode, TopologyBundle};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("AS {0} is not in the topology")]
    UnknownAs(AsId),
    #[error("relay {0} is not in the consensus")]
    UnknownRelay(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Statistics(String),
    #[error("client AS{client}: {source}")]
    Selection {
        client: AsId,
        #[source]
        source: SelectionError,
    },
    #[error(transparent)]
    Threat(#[from] ThreatError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One request of a page load.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRequest {
    pub site: String,
    pub dst_asn: AsId,
    pub is_main: bool,
}

/// Requests of one site, in trace order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Site {
    pub name: String,
    pub requests: Vec<TraceRequest>,
}

#[derive(Debug, Deserialize)]
struct TraceRecord {
    site: String,
    dst_asn: String,
    is_main: String,
}

/// Parses `site,dst_asn,is_main` and groups requests by site in order of
/// first appearance. Every site needs exactly one main request.
pub fn load_traces<R: Read>(reader: R) -> Result<Vec<Site>, HarnessError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut order: Vec<String> = Vec::new();
    let mut by_site: HashMap<String, Vec<TraceRequest>> = HashMap::new();
    for (n, record) in rdr.deserialize::<TraceRecord>().enumerate() {
        let line = n + 2;
        let record = record.map_err(|e| HarnessError::Parse {
            line,
            reason: e.to_string(),
        })?;
        let dst_asn = record
            .dst_asn
            .parse()
            .map_err(|reason| HarnessError::Parse { line, reason })?;
        let is_main = match record.is_main.as_str() {
            "1" => true,
            "0" => false,
            other => {
                return Err(HarnessError::Parse {
                    line,
                    reason: format!("is_main must be 0 or 1, got {other:?}"),
                })
            }
        };
        if !by_site.contains_key(&record.site) {
            order.push(record.site.clone());
        }
        by_site.entry(record.site.clone()).or_default().push(TraceRequest {
            site: record.site,
            dst_asn,
            is_main,
        });
    }
    let mut sites = Vec::with_capacity(order.len());
    for name in order {
        let requests = by_site.remove(&name).unwrap();
        let mains = requests.iter().filter(|r| r.is_main).count();
        if mains != 1 {
            return Err(HarnessError::Config(format!(
                "site {name:?} has {mains} main requests, expected exactly one"
            )));
        }
        sites.push(Site { name, requests });
    }
    Ok(sites)
}

/// A simulated client location.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ClientSpec {
    pub label: String,
    pub asn: AsId,
}

/// Parses `label,asn` lines. A leading `label,asn` header is skipped.
pub fn load_clients<R: BufRead>(reader: R) -> Result<Vec<ClientSpec>, HarnessError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        let text = line.trim();
        if text.is_empty() || text.starts_with('#') || (i == 0 && text == "label,asn") {
            continue;
        }
        let (label, asn) = text.split_once(',').ok_or_else(|| HarnessError::Parse {
            line: line_no,
            reason: format!("expected `label,asn`, got {text:?}"),
        })?;
        out.push(ClientSpec {
            label: label.trim().to_string(),
            asn: asn.parse().map_err(|reason| HarnessError::Parse {
                line: line_no,
                reason,
            })?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentKind {
    E1,
    E2,
    E3,
    E4,
    E5,
}

impl ExperimentKind {
    pub fn is_live(self) -> bool {
        matches!(self, ExperimentKind::E1 | ExperimentKind::E3 | ExperimentKind::E4)
    }

    /// Adversary granularity each experiment studies.
    pub fn default_mode(self) -> AdversaryMode {
        match self {
            ExperimentKind::E3 => AdversaryMode::Sibling,
            ExperimentKind::E4 => AdversaryMode::State,
            _ => AdversaryMode::SingleAs,
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", format!("{self:?}").to_lowercase())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub selector: SelectorKind,
    pub mode: AdversaryMode,
    /// Guard-set size for live runs.
    pub guard_size: usize,
    /// Guard-set sizes swept by E5.
    pub guard_sizes: Vec<usize>,
    pub guard_sets_per_size: usize,
    pub seed: u64,
    pub enumerate_cap: usize,
    pub safe_threshold: f64,
    pub max_requests_per_circuit: u32,
    pub threat: ThreatConfig,
    #[serde(skip)]
    pub workers: Option<usize>,
}

impl ExperimentConfig {
    pub fn new(kind: ExperimentKind) -> Self {
        ExperimentConfig {
            kind,
            selector: SelectorKind::Vanilla,
            mode: kind.default_mode(),
            guard_size: 3,
            guard_sizes: vec![1, 2, 3],
            guard_sets_per_size: 20,
            seed: 42,
            enumerate_cap: DEFAULT_ENUMERATE_CAP,
            safe_threshold: 0.0,
            max_requests_per_circuit: DEFAULT_MAX_REQUESTS_PER_CIRCUIT,
            threat: ThreatConfig::default(),
            workers: None,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let sizes_ok = |k: usize| (1..=3).contains(&k);
        if !sizes_ok(self.guard_size) || !self.guard_sizes.iter().all(|&k| sizes_ok(k)) {
            return Err(HarnessError::Config("guard-set sizes must be 1, 2 or 3".into()));
        }
        if self.guard_sizes.is_empty() || self.guard_sets_per_size == 0 {
            return Err(HarnessError::Config("E5 needs at least one guard set".into()));
        }
        if self.enumerate_cap == 0 {
            return Err(HarnessError::Config("enumeration cap must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.safe_threshold) {
            return Err(HarnessError::Config("safe threshold must lie in [0, 1]".into()));
        }
        if self.max_requests_per_circuit == 0 {
            return Err(HarnessError::Config("circuits must serve at least one request".into()));
        }
        Ok(())
    }
}

/// Stream ids for the per-client generators.
const STREAM_LIVE: u64 = 0;
const STREAM_E5_BASE: u64 = 16;

/// Generator for `client` and `purpose`, split off the master seed.
pub fn client_rng(master: u64, client: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(((client as u64) << 8) | purpose);
    rng
}

fn check_inputs(
    bundle: &TopologyBundle,
    sites: &[Site],
    clients: &[ClientSpec],
    consensus: &Consensus,
) -> Result<(), HarnessError> {
    let known = |asn: AsId| {
        if bundle.graph.contains(asn) {
            Ok(())
        } else {
            Err(HarnessError::UnknownAs(asn))
        }
    };
    for c in clients {
        known(c.asn)?;
    }
    for r in sites.iter().flat_map(|s| &s.requests) {
        known(r.dst_asn)?;
    }
    for r in consensus.relays() {
        known(r.asn)?;
    }
    if clients.is_empty() {
        return Err(HarnessError::Config("no clients".into()));
    }
    Ok(())
}

fn in_pool<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> T {
    match workers {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        },
        None => f(),
    }
}

/// One assessed (circuit, destination) usage.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CircuitLogRow {
    pub client_asn: AsId,
    pub site: String,
    pub dst_asn: AsId,
    pub entry_fp: String,
    pub middle_fp: String,
    pub exit_fp: String,
    pub entry_asn: AsId,
    pub exit_asn: AsId,
    pub provenance: Provenance,
    /// `None` when a leg was unreachable.
    pub vulnerable: Option<bool>,
    pub attackers: Vec<String>,
}

/// Writes the per-circuit log CSV.
pub fn write_circuit_log<W: Write>(rows: &[CircuitLogRow], writer: W) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "client_asn",
        "site",
        "dst_asn",
        "entry_fp",
        "middle_fp",
        "exit_fp",
        "provenance",
        "vulnerable",
        "attackers",
    ])?;
    for r in rows {
        w.write_record([
            r.client_asn.to_string(),
            r.site.clone(),
            r.dst_asn.to_string(),
            r.entry_fp.clone(),
            r.middle_fp.clone(),
            r.exit_fp.clone(),
            r.provenance.to_string(),
            r.vulnerable.map_or(String::new(), |v| v.to_string()),
            r.attackers.join(";"),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Additive counters behind the live-run fractions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct LiveCounts {
    pub sites: u64,
    pub sites_main_vulnerable: u64,
    pub sites_any_vulnerable: u64,
    pub circuits_built: u64,
    pub circuits_assessed: u64,
    pub circuits_vulnerable: u64,
    pub circuits_unassessable: u64,
    pub bandwidth_selections: u64,
    pub lp_selections: u64,
}

impl LiveCounts {
    pub fn merge(&mut self, o: &LiveCounts) {
        self.sites += o.sites;
        self.sites_main_vulnerable += o.sites_main_vulnerable;
        self.sites_any_vulnerable += o.sites_any_vulnerable;
        self.circuits_built += o.circuits_built;
        self.circuits_assessed += o.circuits_assessed;
        self.circuits_vulnerable += o.circuits_vulnerable;
        self.circuits_unassessable += o.circuits_unassessable;
        self.bandwidth_selections += o.bandwidth_selections;
        self.lp_selections += o.lp_selections;
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LiveMetrics {
    pub websites_main_vulnerable: Option<f64>,
    pub websites_any_vulnerable: Option<f64>,
    pub circuits_vulnerable: Option<f64>,
    pub counts: LiveCounts,
}

impl From<LiveCounts> for LiveMetrics {
    fn from(c: LiveCounts) -> Self {
        LiveMetrics {
            websites_main_vulnerable: ratio(c.sites_main_vulnerable, c.sites),
            websites_any_vulnerable: ratio(c.sites_any_vulnerable, c.sites),
            circuits_vulnerable: ratio(c.circuits_vulnerable, c.circuits_assessed),
            counts: c,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClientLiveResult {
    pub label: String,
    pub asn: AsId,
    pub rng_stream: u64,
    pub guards: Vec<String>,
    pub metrics: LiveMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LiveReport {
    pub overall: LiveMetrics,
    pub per_label: BTreeMap<String, LiveMetrics>,
    pub per_client: Vec<ClientLiveResult>,
    pub load_balance: Option<LoadBalanceReport>,
    #[serde(skip)]
    pub circuits: Vec<CircuitLogRow>,
}

struct ClientRun {
    guards: Vec<String>,
    counts: LiveCounts,
    rows: Vec<CircuitLogRow>,
}

fn replay_client(
    config: &ExperimentConfig,
    threat: &ThreatModel<'_>,
    consensus: &Consensus,
    sites: &[Site],
    index: usize,
    spec: &ClientSpec,
) -> Result<ClientRun, HarnessError> {
    let wrap = |source| HarnessError::Selection {
        client: spec.asn,
        source,
    };
    let mut rng = client_rng(config.seed, index, STREAM_LIVE);
    let guards = choose_guards(consensus, config.guard_size, &mut rng).map_err(wrap)?;
    let guard_fps = guards
        .relays()
        .iter()
        .map(|&g| consensus.relay(g).fingerprint.clone())
        .collect();
    let astoria_cfg = AstoriaConfig {
        safe_threshold: config.safe_threshold,
    };
    let mut client = Client::new(
        config.selector,
        consensus,
        guards,
        spec.asn,
        threat,
        config.mode,
        astoria_cfg,
        config.max_requests_per_circuit,
    );

    let mut counts = LiveCounts::default();
    let mut rows = Vec::new();
    // Assessment of each (circuit, destination) usage, keyed by build event.
    let mut usages: HashMap<(u64, AsId), Option<bool>> = HashMap::new();
    let mut event = 0u64;
    for site in sites {
        counts.sites += 1;
        let (mut main_vuln, mut any_vuln) = (false, false);
        for req in &site.requests {
            let (circuit, built) = client.request(req.dst_asn, event, &mut rng).map_err(wrap)?;
            event += 1;
            if built {
                counts.circuits_built += 1;
                match circuit.selection.provenance {
                    Provenance::Bandwidth => counts.bandwidth_selections += 1,
                    Provenance::Lp => counts.lp_selections += 1,
                    _ => {}
                }
            }
            let key = (circuit.created_at, req.dst_asn);
            let vulnerable = match usages.get(&key) {
                Some(v) => *v,
                None => {
                    let spec_c = client.circuit_spec(&circuit.selection, req.dst_asn);
                    let a = threat.assess(&spec_c, config.mode)?;
                    let v = a.assessable.then_some(a.vulnerable);
                    match v {
                        Some(true) => {
                            counts.circuits_assessed += 1;
                            counts.circuits_vulnerable += 1;
                        }
                        Some(false) => counts.circuits_assessed += 1,
                        None => counts.circuits_unassessable += 1,
                    }
                    let sel = &circuit.selection;
                    rows.push(CircuitLogRow {
                        client_asn: spec.asn,
                        site: site.name.clone(),
                        dst_asn: req.dst_asn,
                        entry_fp: consensus.relay(sel.entry).fingerprint.clone(),
                        middle_fp: consensus.relay(sel.middle).fingerprint.clone(),
                        exit_fp: consensus.relay(sel.exit).fingerprint.clone(),
                        entry_asn: spec_c.entry,
                        exit_asn: spec_c.exit,
                        provenance: sel.provenance,
                        vulnerable: v,
                        attackers: a.attackers.iter().map(ToString::to_string).collect(),
                    });
                    usages.insert(key, v);
                    v
                }
            };
            if vulnerable == Some(true) {
                any_vuln = true;
                main_vuln |= req.is_main;
            }
        }
        counts.sites_main_vulnerable += u64::from(main_vuln);
        counts.sites_any_vulnerable += u64::from(any_vuln);
    }
    Ok(ClientRun {
        guards: guard_fps,
        counts,
        rows,
    })
}

/// Replays every trace for every client through guard selection, the
/// configured selector and circuit pooling, assessing each circuit usage.
pub fn run_live_style(
    config: &ExperimentConfig,
    bundle: &TopologyBundle,
    consensus: &Consensus,
    sites: &[Site],
    clients: &[ClientSpec],
) -> Result<LiveReport, HarnessError> {
    if !config.kind.is_live() {
        return Err(HarnessError::Config(format!(
            "{} is not a live-style experiment",
            config.kind
        )));
    }
    config.validate()?;
    check_inputs(bundle, sites, clients, consensus)?;
    let cache = TreeCache::new(&bundle.graph);
    let threat = ThreatModel::with_config(bundle, &cache, config.threat.clone());

    let runs: Vec<Result<ClientRun, HarnessError>> = in_pool(config.workers, || {
        clients
            .par_iter()
            .enumerate()
            .map(|(i, spec)| replay_client(config, &threat, consensus, sites, i, spec))
            .collect()
    });

    let mut overall = LiveCounts::default();
    let mut per_label: BTreeMap<String, LiveCounts> = BTreeMap::new();
    let mut per_client = Vec::with_capacity(clients.len());
    let mut circuits = Vec::new();
    for (i, (spec, run)) in clients.iter().zip(runs).enumerate() {
        let run = run?;
        overall.merge(&run.counts);
        per_label.entry(spec.label.clone()).or_default().merge(&run.counts);
        per_client.push(ClientLiveResult {
            label: spec.label.clone(),
            asn: spec.asn,
            rng_stream: ((i as u64) << 8) | STREAM_LIVE,
            guards: run.guards,
            metrics: run.counts.into(),
        });
        circuits.extend(run.rows);
    }
    let load_balance = if circuits.is_empty() {
        None
    } else {
        Some(load_balance_report(&circuits, consensus)?)
    };
    Ok(LiveReport {
        overall: overall.into(),
        per_label: per_label.into_iter().map(|(k, v)| (k, v.into())).collect(),
        per_client,
        load_balance,
        circuits,
    })
}

/// Point of an empirical CDF: fraction of samples `<= value`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CdfPoint {
    pub value: f64,
    pub cumulative: f64,
}

/// Empirical CDF with one point per distinct value.
pub fn empirical_cdf(values: &[f64]) -> Vec<CdfPoint> {
    let mut sorted: Vec<f64> = values.iter().copied().filter(|v| !v.is_nan()).collect();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut out: Vec<CdfPoint> = Vec::new();
    for (i, v) in sorted.iter().enumerate() {
        let cumulative = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.value == *v => last.cumulative = cumulative,
            _ => out.push(CdfPoint {
                value: *v,
                cumulative,
            }),
        }
    }
    out
}

/// Summary of attacker-free fractions over (source, destination) pairs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FractionSummary {
    pub pairs: usize,
    /// Pairs with no assessable (entry, exit) option.
    pub undefined: usize,
    pub mean: Option<f64>,
    /// Share of pairs with fewer than 5% safe options.
    pub five_percent: Option<f64>,
    /// Share of pairs with no safe option at all.
    pub no_safe: Option<f64>,
    pub cdf: Vec<CdfPoint>,
}

impl FractionSummary {
    pub fn from_fractions(fractions: &[Option<f64>]) -> Self {
        let defined: Vec<f64> = fractions.iter().flatten().copied().collect();
        let n = defined.len();
        let share = |pred: &dyn Fn(f64) -> bool| {
            (n > 0).then(|| defined.iter().filter(|&&f| pred(f)).count() as f64 / n as f64)
        };
        FractionSummary {
            pairs: fractions.len(),
            undefined: fractions.len() - n,
            mean: (n > 0).then(|| defined.iter().sum::<f64>() / n as f64),
            five_percent: share(&|f| f < 0.05),
            no_safe: share(&|f| f == 0.0),
            cdf: empirical_cdf(&defined),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairFraction {
    pub label: String,
    pub client_asn: AsId,
    pub dst_asn: AsId,
    pub fraction: Option<f64>,
}

/// Per-label E2 output, including the middle-relay analysis inputs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabelEnumeration {
    pub summary: FractionSummary,
    /// Per client: share of destinations with more than half safe options.
    pub over_half_safe: Vec<f64>,
    pub mu_ci99: Option<(f64, f64)>,
    pub middle_relay_risk: Option<MiddleRelayRisk>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GuardSizeResult {
    pub guard_size: usize,
    pub summary: FractionSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnumerationReport {
    pub overall: FractionSummary,
    pub per_label: BTreeMap<String, LabelEnumeration>,
    /// E5 only.
    pub guard_sizes: Vec<GuardSizeResult>,
    pub pairs: Vec<PairFraction>,
}

fn distinct_destinations(sites: &[Site]) -> Vec<AsId> {
    sites
        .iter()
        .flat_map(|s| s.requests.iter().map(|r| r.dst_asn))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// Enumeration experiments: E2 grids every Guard-flagged entry against every
/// Exit-flagged exit; E5 restricts entries to seeded guard sets of each size.
pub fn run_enumeration_style(
    config: &ExperimentConfig,
    bundle: &TopologyBundle,
    consensus: &Consensus,
    sites: &[Site],
    clients: &[ClientSpec],
) -> Result<EnumerationReport, HarnessError> {
    config.validate()?;
    check_inputs(bundle, sites, clients, consensus)?;
    let cache = TreeCache::new(&bundle.graph);
    let threat = ThreatModel::with_config(bundle, &cache, config.threat.clone());
    let dsts = distinct_destinations(sites);
    let exit_ases: Vec<AsId> = consensus.exits().iter().map(|&i| consensus.relay(i).asn).collect();
    let grid = |src: AsId, entries: &[AsId]| -> Result<Vec<Option<f64>>, HarnessError> {
        dsts.iter()
            .map(|&dst| {
                Ok(threat
                    .attacker_free_fraction(src, dst, entries, &exit_ases, config.mode)?
                    .fraction)
            })
            .collect()
    };

    match config.kind {
        ExperimentKind::E2 => {
            let entry_ases: Vec<AsId> =
                consensus.guards().iter().map(|&i| consensus.relay(i).asn).collect();
            let per_client: Vec<Result<Vec<Option<f64>>, HarnessError>> = in_pool(config.workers, || {
                clients.par_iter().map(|c| grid(c.asn, &entry_ases)).collect()
            });
            let mut pairs = Vec::new();
            let mut by_label: BTreeMap<String, Vec<Vec<Option<f64>>>> = BTreeMap::new();
            for (c, fractions) in clients.iter().zip(per_client) {
                let fractions = fractions?;
                for (&dst, &fraction) in dsts.iter().zip(&fractions) {
                    pairs.push(PairFraction {
                        label: c.label.clone(),
                        client_asn: c.asn,
                        dst_asn: dst,
                        fraction,
                    });
                }
                by_label.entry(c.label.clone()).or_default().push(fractions);
            }
            let p_mid = perfect_balance_distribution(consensus)
                .ok()
                .and_then(|s| s.into_iter().reduce(f64::max));
            let per_label = by_label
                .into_iter()
                .map(|(label, rows)| {
                    let summary = FractionSummary::from_fractions(&rows.concat());
                    let over_half: Vec<f64> = rows
                        .iter()
                        .filter_map(|r| {
                            let defined: Vec<f64> = r.iter().flatten().copied().collect();
                            (!defined.is_empty()).then(|| {
                                defined.iter().filter(|&&f| f > 0.5).count() as f64
                                    / defined.len() as f64
                            })
                        })
                        .collect();
                    let mu_ci99 = confidence_interval(&over_half, 0.99).ok();
                    let middle_relay_risk = label
                        .parse::<CountryCode>()
                        .ok()
                        .map(|cc| bundle.graph.nodes().iter().filter(|&&a| bundle.countries.country_of(a) == cc).count())
                        .zip(mu_ci99)
                        .zip(p_mid)
                        .and_then(|((x_count, (low, _)), p)| {
                            middle_relay_risk(x_count, dsts.len(), low, p).ok()
                        });
                    (
                        label,
                        LabelEnumeration {
                            summary,
                            over_half_safe: over_half,
                            mu_ci99,
                            middle_relay_risk,
                        },
                    )
                })
                .collect();
            let all: Vec<Option<f64>> = pairs.iter().map(|p| p.fraction).collect();
            Ok(EnumerationReport {
                overall: FractionSummary::from_fractions(&all),
                per_label,
                guard_sizes: Vec::new(),
                pairs,
            })
        }
        ExperimentKind::E5 => {
            let per_client: Vec<Result<Vec<Vec<Option<f64>>>, HarnessError>> =
                in_pool(config.workers, || {
                    clients
                        .par_iter()
                        .enumerate()
                        .map(|(i, c)| {
                            config
                                .guard_sizes
                                .iter()
                                .map(|&k| {
                                    let mut rng = client_rng(config.seed, i, STREAM_E5_BASE + k as u64);
                                    let mut fractions = Vec::new();
                                    for _ in 0..config.guard_sets_per_size {
                                        let guards = choose_guards(consensus, k, &mut rng).map_err(|source| {
                                            HarnessError::Selection { client: c.asn, source }
                                        })?;
                                        let entries = guard_ases(consensus, &guards);
                                        fractions.extend(grid(c.asn, &entries)?);
                                    }
                                    Ok(fractions)
                                })
                                .collect()
                        })
                        .collect()
                });
            let mut by_size: Vec<Vec<Option<f64>>> = vec![Vec::new(); config.guard_sizes.len()];
            for result in per_client {
                for (slot, fractions) in by_size.iter_mut().zip(result?) {
                    slot.extend(fractions);
                }
            }
            let guard_sizes: Vec<GuardSizeResult> = config
                .guard_sizes
                .iter()
                .zip(&by_size)
                .map(|(&k, f)| GuardSizeResult {
                    guard_size: k,
                    summary: FractionSummary::from_fractions(f),
                })
                .collect();
            Ok(EnumerationReport {
                overall: FractionSummary::from_fractions(&by_size.concat()),
                per_label: BTreeMap::new(),
                guard_sizes,
                pairs: Vec::new(),
            })
        }
        other => Err(HarnessError::Config(format!(
            "{other} is not an enumeration-style experiment"
        ))),
    }
}

fn guard_ases(consensus: &Consensus, guards: &GuardSet) -> Vec<AsId> {
    guards.relays().iter().map(|&g| consensus.relay(g).asn).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TightnessReport {
    pub circuits: usize,
    pub truncated: usize,
    pub fractions: Vec<f64>,
    pub cdf: Vec<CdfPoint>,
}

/// Fraction of concrete path pairs that are actually vulnerable, for every
/// distinct vulnerable circuit in the log.
pub fn estimate_tightness(
    rows: &[CircuitLogRow],
    bundle: &TopologyBundle,
    threat_config: &ThreatConfig,
    mode: AdversaryMode,
    cap: usize,
) -> Result<TightnessReport, HarnessError> {
    let cache = TreeCache::new(&bundle.graph);
    let threat = ThreatModel::with_config(bundle, &cache, threat_config.clone());
    let circuits: BTreeSet<(AsId, AsId, AsId, AsId)> = rows
        .iter()
        .filter(|r| r.vulnerable == Some(true))
        .map(|r| (r.client_asn, r.entry_asn, r.exit_asn, r.dst_asn))
        .collect();
    let mut fractions = Vec::with_capacity(circuits.len());
    let mut truncated = 0;
    for (src, entry, exit, dst) in circuits {
        let spec = CircuitSpec {
            src,
            entry,
            exit,
            dst,
        };
        match threat.vulnerable_path_fraction(&spec, mode, cap) {
            Ok(f) => {
                truncated += usize::from(f.truncated);
                fractions.push(f.fraction);
            }
            // Logged under a different mode or config; not vulnerable here.
            Err(ThreatError::NotVulnerable) => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(TightnessReport {
        circuits: fractions.len(),
        truncated,
        cdf: empirical_cdf(&fractions),
        fractions,
    })
}

/// Bound on how many circuits an adversarial middle relay must observe to
/// single out one (source, destination) pair, and the chance of seeing that
/// many.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MiddleRelayRisk {
    /// Expected number of (source, destination) pairs linkable to one
    /// (entry, exit) observation.
    pub expected_linkable: f64,
    /// Observations needed to narrow the candidates down to one pair.
    pub circuits_needed: f64,
    /// `p_mid ^ floor(circuits_needed)`.
    pub probability: f64,
}

pub fn middle_relay_risk(
    x_count: usize,
    d_count: usize,
    mu_low: f64,
    p_mid: f64,
) -> Result<MiddleRelayRisk, HarnessError> {
    if x_count < 2 || d_count < 2 {
        return Err(HarnessError::Statistics("source and destination counts must exceed 1".into()));
    }
    if !(mu_low > 0.0 && mu_low < 1.0) {
        return Err(HarnessError::Statistics(format!("mu must lie in (0, 1), got {mu_low}")));
    }
    if !(p_mid > 0.0 && p_mid < 1.0) {
        return Err(HarnessError::Statistics(format!(
            "middle-relay probability must lie in (0, 1), got {p_mid}"
        )));
    }
    let pairs = x_count as f64 * d_count as f64;
    let expected = 0.5 * mu_low * pairs;
    if expected <= 1.0 {
        return Err(HarnessError::Statistics(format!(
            "expected linkable pairs {expected} <= 1; bound is degenerate"
        )));
    }
    let n = -pairs.ln() / (expected.ln() - pairs.ln());
    Ok(MiddleRelayRisk {
        expected_linkable: expected,
        circuits_needed: n,
        probability: p_mid.powi(n.floor() as i32),
    })
}

/// Normal-approximation interval `mean +/- z * s / sqrt(n)` with the sample
/// standard deviation.
pub fn confidence_interval(samples: &[f64], level: f64) -> Result<(f64, f64), HarnessError> {
    if samples.len() < 2 {
        return Err(HarnessError::Statistics("need at least two samples".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(HarnessError::Statistics(format!("invalid confidence level {level}")));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let z = Normal::standard().inverse_cdf(0.5 + level / 2.0);
    let half = z * var.sqrt() / n.sqrt();
    Ok((mean - half, mean + half))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RelayLoad {
    pub fingerprint: String,
    pub bandwidth: f64,
    pub empirical: f64,
    pub perfect: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecileLoad {
    pub decile: usize,
    pub relays: usize,
    pub empirical: f64,
    pub perfect: f64,
}

/// Selected-relay traffic shares against perfect load balancing.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoadBalanceReport {
    pub selections: u64,
    pub relays: Vec<RelayLoad>,
    /// Relays bucketed by bandwidth rank, lowest decile first.
    pub deciles: Vec<DecileLoad>,
    pub total_variation: f64,
}

/// Counts every entry, middle and exit slot in the log and compares each
/// relay's share of slots with its bandwidth share.
pub fn load_balance_report(
    rows: &[CircuitLogRow],
    consensus: &Consensus,
) -> Result<LoadBalanceReport, HarnessError> {
    if rows.is_empty() {
        return Err(HarnessError::Statistics("circuit log is empty".into()));
    }
    let perfect = perfect_balance_distribution(consensus)
        .map_err(|e| HarnessError::Statistics(e.to_string()))?;
    let index: HashMap<&str, usize> = consensus
        .relays()
        .iter()
        .enumerate()
        .map(|(i, r)| (r.fingerprint.as_str(), i))
        .collect();
    let mut counts = vec![0u64; consensus.relays().len()];
    for row in rows {
        for fp in [&row.entry_fp, &row.middle_fp, &row.exit_fp] {
            let i = *index
                .get(fp.as_str())
                .ok_or_else(|| HarnessError::UnknownRelay(fp.clone()))?;
            counts[i] += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    let relays: Vec<RelayLoad> = consensus
        .relays()
        .iter()
        .zip(&counts)
        .zip(&perfect)
        .map(|((r, &c), &p)| RelayLoad {
            fingerprint: r.fingerprint.clone(),
            bandwidth: r.bandwidth,
            empirical: c as f64 / total as f64,
            perfect: p,
        })
        .collect();
    let mut order: Vec<usize> = (0..relays.len()).collect();
    order.sort_by(|&a, &b| {
        relays[a]
            .bandwidth
            .total_cmp(&relays[b].bandwidth)
            .then_with(|| relays[a].fingerprint.cmp(&relays[b].fingerprint))
    });
    let n = order.len();
    let deciles = (0..10)
        .filter_map(|d| {
            let members = &order[d * n / 10..(d + 1) * n / 10];
            (!members.is_empty()).then(|| DecileLoad {
                decile: d + 1,
                relays: members.len(),
                empirical: members.iter().map(|&i| relays[i].empirical).sum(),
                perfect: members.iter().map(|&i| relays[i].perfect).sum(),
            })
        })
        .collect();
    let total_variation = 0.5
        * relays
            .iter()
            .map(|r| (r.empirical - r.perfect).abs())
            .sum::<f64>();
    Ok(LoadBalanceReport {
        selections: total,
        relays,
        deciles,
        total_variation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn traces_group_by_site() {
        let text = "site,dst_asn,is_main\na,10,1\nb,11,1\na,12,0\n";
        let sites = load_traces(text.as_bytes()).unwrap();
        assert_eq!(sites.len(), 2);
        assert_eq!(sites[0].name, "a");
        assert_eq!(sites[0].requests.len(), 2);
        assert!(load_traces("site,dst_asn,is_main\na,10,0\n".as_bytes()).is_err());
        assert!(load_traces("site,dst_asn,is_main\na,10,1\na,11,1\n".as_bytes()).is_err());
        assert!(matches!(
            load_traces("site,dst_asn,is_main\na,10,2\n".as_bytes()),
            Err(HarnessError::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn clients_file() {
        let c = load_clients("label,asn\nBR,10\n# skip\nCN,20\n".as_bytes()).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c[1].label, "CN");
        assert!(matches!(
            load_clients("BR;10\n".as_bytes()),
            Err(HarnessError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn risk_table_rows() {
        // mu chosen inside the published interval so E[S] matches the table.
        let br = middle_relay_risk(3515, 165, 114_797.0 / (0.5 * 3515.0 * 165.0), 0.007).unwrap();
        assert!((br.expected_linkable - 114_797.0).abs() < 1.0);
        assert!((br.circuits_needed - 8.1).abs() <= 0.15);
        assert!((br.probability / 5.7e-18 - 1.0).abs() < 0.05);

        let cn = middle_relay_risk(1227, 131, 0.43, 0.007).unwrap();
        assert!((cn.expected_linkable / 35_216.0 - 1.0).abs() < 0.03);
        assert!((cn.circuits_needed - 7.8).abs() <= 0.15);
        assert!((cn.probability / 8.2e-16 - 1.0).abs() < 0.05);
    }

    #[test]
    fn risk_log_identity() {
        // E[S] = sqrt(|X||D|) gives exactly two observations.
        let (x, d) = (400usize, 100usize);
        let mu = 2.0 * ((x * d) as f64).sqrt() / (x * d) as f64;
        let r = middle_relay_risk(x, d, mu, 0.5).unwrap();
        assert!((r.circuits_needed - 2.0).abs() < 1e-12);
    }

    #[test]
    fn risk_rejects_degenerate_inputs() {
        assert!(middle_relay_risk(2, 2, 0.4, 0.01).is_err());
        assert!(middle_relay_risk(100, 100, 0.0, 0.01).is_err());
        assert!(middle_relay_risk(100, 100, 0.5, 1.0).is_err());
        assert!(middle_relay_risk(1, 100, 0.5, 0.1).is_err());
    }

    #[test]
    fn interval() {
        let (lo, hi) = confidence_interval(&[0.3; 10], 0.99).unwrap();
        assert!((lo - 0.3).abs() < 1e-12 && (hi - 0.3).abs() < 1e-12);
        let mut samples = vec![0.0; 50];
        samples.extend([1.0; 50]);
        let (lo, hi) = confidence_interval(&samples, 0.99).unwrap();
        assert!(((lo + hi) / 2.0 - 0.5).abs() < 1e-12);
        assert!(((hi - lo) / 2.0 - 2.576 * 0.502_519 / 10.0).abs() < 1e-3);
        assert!(confidence_interval(&[0.5], 0.99).is_err());
    }

    #[test]
    fn cdf_and_summary() {
        let cdf = empirical_cdf(&[0.5, 0.0, 0.5, 1.0]);
        assert_eq!(
            cdf,
            vec![
                CdfPoint { value: 0.0, cumulative: 0.25 },
                CdfPoint { value: 0.5, cumulative: 0.75 },
                CdfPoint { value: 1.0, cumulative: 1.0 },
            ]
        );
        let s = FractionSummary::from_fractions(&[Some(1.0), Some(1.0), None]);
        assert_eq!(s.undefined, 1);
        assert_eq!(s.five_percent, Some(0.0));
        assert_eq!(s.cdf, vec![CdfPoint { value: 1.0, cumulative: 1.0 }]);
        let s = FractionSummary::from_fractions(&[Some(0.0), Some(0.01)]);
        assert_eq!(s.five_percent, Some(1.0));
        assert_eq!(s.no_safe, Some(0.5));
        let s = FractionSummary::from_fractions(&[None]);
        assert_eq!(s.mean, None);
        assert!(s.cdf.is_empty());
    }

    #[test]
    fn seeds_split_by_client() {
        use rand::RngCore;
        let a = client_rng(7, 0, 0).next_u64();
        let b = client_rng(7, 1, 0).next_u64();
        assert_ne!(a, b);
        assert_eq!(a, client_rng(7, 0, 0).next_u64());
    }
}
