//! Relay directory, relay selectors and on-demand circuit pooling.
//!
//! Four strategies are modelled: bandwidth-weighted vanilla selection,
//! uniform selection, AS-aware selection (safe pairs drawn by bandwidth
//! product, minimax fallback when none is safe) and a perfect load-balancing
//! reference distribution.

use std::collections::HashMap;
use std::fmt;
use std::io::Read;
use std::str::FromStr;

use bitflags::bitflags;
use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lp::{solve_minimax, LpError, SelectionProblem};
use crate::threat::{AdversaryMode, CircuitSpec, ThreatAssessment, ThreatError, ThreatModel};
use crate::topology::{AsId, ColluderClass};

/// Resampling budget for /16, family and duplicate conflicts.
pub const MAX_ATTEMPTS: usize = 100;
pub const DEFAULT_MAX_REQUESTS_PER_CIRCUIT: u32 = 50;

bitflags! {
    #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
    pub struct RelayFlags: u8 {
        const GUARD = 1;
        const EXIT = 1 << 1;
        const FAST = 1 << 2;
        const STABLE = 1 << 3;
    }
}

impl FromStr for RelayFlags {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut flags = RelayFlags::empty();
        for name in s.split(';').map(str::trim).filter(|f| !f.is_empty()) {
            flags |= match name {
                "Guard" => RelayFlags::GUARD,
                "Exit" => RelayFlags::EXIT,
                "Fast" => RelayFlags::FAST,
                "Stable" => RelayFlags::STABLE,
                other => return Err(format!("unknown flag {other:?}")),
            };
        }
        Ok(flags)
    }
}

/// Two-octet IPv4 prefix, e.g. `93.184`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Net16(pub [u8; 2]);

impl FromStr for Net16 {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (a, b) = s
            .trim()
            .split_once('.')
            .ok_or_else(|| format!("invalid /16 prefix {s:?}"))?;
        let parse = |x: &str| x.parse::<u8>().map_err(|_| format!("invalid /16 prefix {s:?}"));
        Ok(Net16([parse(a)?, parse(b)?]))
    }
}

impl fmt::Display for Net16 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.0[0], self.0[1])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Relay {
    pub fingerprint: String,
    pub asn: AsId,
    pub bandwidth: f64,
    pub flags: RelayFlags,
    pub net16: Net16,
    pub family: Option<String>,
}

impl Relay {
    pub fn is_guard(&self) -> bool {
        self.flags.contains(RelayFlags::GUARD)
    }

    pub fn is_exit(&self) -> bool {
        self.flags.contains(RelayFlags::EXIT)
    }

    /// Whether the two relays may not appear on the same circuit.
    pub fn conflicts_with(&self, other: &Relay) -> bool {
        self.fingerprint == other.fingerprint
            || self.net16 == other.net16
            || (self.family.is_some() && self.family == other.family)
    }
}

/// Index of a relay within its [`Consensus`].
pub type RelayIdx = usize;

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("consensus line {line}: {reason}")]
    Parse { line: u64, reason: String },
    #[error("duplicate relay fingerprint {0}")]
    DuplicateFingerprint(String),
    #[error("consensus is empty")]
    EmptyConsensus,
    #[error("consensus has no {0}-flagged relay")]
    MissingRole(&'static str),
    #[error("only {found} of {wanted} guards could be chosen")]
    InsufficientGuards { wanted: usize, found: usize },
    #[error("guard set must hold 1 to 3 relays, got {0}")]
    GuardSetSize(usize),
    #[error("no candidate relays for the {0} position")]
    NoCandidates(&'static str),
    #[error("circuit constraints unsatisfiable after {0} attempts")]
    Unsatisfiable(usize),
    #[error("no assessable entry/exit pair")]
    NoAssessablePairs,
    #[error("total bandwidth is zero")]
    ZeroBandwidth,
    #[error(transparent)]
    Lp(#[from] LpError),
    #[error(transparent)]
    Threat(#[from] ThreatError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Deserialize)]
struct RelayRecord {
    fingerprint: String,
    asn: String,
    bandwidth: f64,
    flags: String,
    net16: String,
    #[serde(default)]
    family: String,
}

/// Relay directory snapshot with precomputed role lists.
#[derive(Debug, Clone)]
pub struct Consensus {
    relays: Vec<Relay>,
    timestamp: String,
    guards: Vec<RelayIdx>,
    exits: Vec<RelayIdx>,
    exit_weights: Option<WeightedIndex<f64>>,
    all_weights: Option<WeightedIndex<f64>>,
}

impl Consensus {
    pub fn new(relays: Vec<Relay>, timestamp: impl Into<String>) -> Result<Self, SelectionError> {
        if relays.is_empty() {
            return Err(SelectionError::EmptyConsensus);
        }
        let mut seen = std::collections::HashSet::new();
        for r in &relays {
            if !seen.insert(r.fingerprint.as_str()) {
                return Err(SelectionError::DuplicateFingerprint(r.fingerprint.clone()));
            }
            if !(r.bandwidth >= 0.0 && r.bandwidth.is_finite()) {
                return Err(SelectionError::Parse {
                    line: 0,
                    reason: format!("relay {} has invalid bandwidth", r.fingerprint),
                });
            }
        }
        let guards: Vec<RelayIdx> = (0..relays.len()).filter(|&i| relays[i].is_guard()).collect();
        let exits: Vec<RelayIdx> = (0..relays.len()).filter(|&i| relays[i].is_exit()).collect();
        if guards.is_empty() {
            return Err(SelectionError::MissingRole("Guard"));
        }
        if exits.is_empty() {
            return Err(SelectionError::MissingRole("Exit"));
        }
        let exit_weights = WeightedIndex::new(exits.iter().map(|&i| relays[i].bandwidth)).ok();
        let all_weights = WeightedIndex::new(relays.iter().map(|r| r.bandwidth)).ok();
        Ok(Consensus {
            relays,
            timestamp: timestamp.into(),
            guards,
            exits,
            exit_weights,
            all_weights,
        })
    }

    /// Parses the CSV relay directory
    /// (`fingerprint,asn,bandwidth,flags,net16,family`).
    pub fn from_csv<R: Read>(reader: R, timestamp: impl Into<String>) -> Result<Self, SelectionError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let mut relays = Vec::new();
        for record in rdr.deserialize::<RelayRecord>() {
            let record = record.map_err(|e| SelectionError::Parse {
                line: e.position().map_or(0, |p| p.line()),
                reason: e.to_string(),
            })?;
            let line = relays.len() as u64 + 2;
            let err = |reason: String| SelectionError::Parse { line, reason };
            let family = Some(record.family).filter(|f| !f.is_empty());
            relays.push(Relay {
                asn: record.asn.parse().map_err(err)?,
                bandwidth: record.bandwidth,
                flags: record.flags.parse().map_err(err)?,
                net16: record.net16.parse().map_err(err)?,
                fingerprint: record.fingerprint,
                family,
            });
        }
        Self::new(relays, timestamp)
    }

    pub fn relays(&self) -> &[Relay] {
        &self.relays
    }

    pub fn relay(&self, idx: RelayIdx) -> &Relay {
        &self.relays[idx]
    }

    pub fn timestamp(&self) -> &str {
        &self.timestamp
    }

    pub fn guards(&self) -> &[RelayIdx] {
        &self.guards
    }

    pub fn exits(&self) -> &[RelayIdx] {
        &self.exits
    }

    pub fn find(&self, fingerprint: &str) -> Option<RelayIdx> {
        self.relays.iter().position(|r| r.fingerprint == fingerprint)
    }

    fn sample_exit<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<RelayIdx, SelectionError> {
        let dist = self.exit_weights.as_ref().ok_or(SelectionError::NoCandidates("exit"))?;
        Ok(self.exits[dist.sample(rng)])
    }

    fn sample_any<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<RelayIdx, SelectionError> {
        let dist = self.all_weights.as_ref().ok_or(SelectionError::NoCandidates("middle"))?;
        Ok(dist.sample(rng))
    }

    /// True when all given relays are pairwise compatible.
    pub fn compatible(&self, relays: &[RelayIdx]) -> bool {
        relays.iter().enumerate().all(|(i, &a)| {
            relays[i + 1..]
                .iter()
                .all(|&b| !self.relays[a].conflicts_with(&self.relays[b]))
        })
    }
}

/// One to three pairwise-compatible guard relays.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GuardSet(Vec<RelayIdx>);

impl GuardSet {
    pub fn new(consensus: &Consensus, guards: Vec<RelayIdx>) -> Result<Self, SelectionError> {
        if guards.is_empty() || guards.len() > 3 {
            return Err(SelectionError::GuardSetSize(guards.len()));
        }
        if !consensus.compatible(&guards) {
            return Err(SelectionError::Unsatisfiable(0));
        }
        Ok(GuardSet(guards))
    }

    pub fn relays(&self) -> &[RelayIdx] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Bandwidth-weighted draw without replacement among Guard-flagged relays,
/// skipping candidates that conflict with guards already chosen.
pub fn choose_guards<R: Rng + ?Sized>(
    consensus: &Consensus,
    k: usize,
    rng: &mut R,
) -> Result<GuardSet, SelectionError> {
    if k == 0 || k > 3 {
        return Err(SelectionError::GuardSetSize(k));
    }
    let mut chosen: Vec<RelayIdx> = Vec::with_capacity(k);
    while chosen.len() < k {
        let candidates: Vec<RelayIdx> = consensus
            .guards()
            .iter()
            .copied()
            .filter(|&g| {
                consensus.relay(g).bandwidth > 0.0
                    && chosen
                        .iter()
                        .all(|&c| !consensus.relay(c).conflicts_with(consensus.relay(g)))
            })
            .collect();
        let dist = WeightedIndex::new(candidates.iter().map(|&g| consensus.relay(g).bandwidth))
            .map_err(|_| SelectionError::InsufficientGuards {
                wanted: k,
                found: chosen.len(),
            })?;
        chosen.push(candidates[dist.sample(rng)]);
    }
    Ok(GuardSet(chosen))
}

/// How a circuit's entry and exit were chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Vanilla,
    Uniform,
    /// Drawn from the bandwidth-product distribution over safe pairs.
    Bandwidth,
    /// Drawn from the minimax LP distribution.
    Lp,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Vanilla => "vanilla",
            Provenance::Uniform => "uniform",
            Provenance::Bandwidth => "d_bw",
            Provenance::Lp => "d_lp",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Selection {
    pub entry: RelayIdx,
    pub middle: RelayIdx,
    pub exit: RelayIdx,
    pub provenance: Provenance,
    /// Safe and assessable pair counts seen by the AS-aware selector.
    pub safe_pairs: usize,
    pub assessable_pairs: usize,
    /// LP optimum when the minimax fallback was used.
    pub lp_objective: Option<f64>,
}

impl Selection {
    fn plain(entry: RelayIdx, middle: RelayIdx, exit: RelayIdx, provenance: Provenance) -> Self {
        Selection {
            entry,
            middle,
            exit,
            provenance,
            safe_pairs: 0,
            assessable_pairs: 0,
            lp_objective: None,
        }
    }
}

fn pick_weighted<R: Rng + ?Sized>(
    consensus: &Consensus,
    pool: &[RelayIdx],
    rng: &mut R,
    role: &'static str,
) -> Result<RelayIdx, SelectionError> {
    if pool.is_empty() {
        return Err(SelectionError::NoCandidates(role));
    }
    match WeightedIndex::new(pool.iter().map(|&i| consensus.relay(i).bandwidth)) {
        Ok(dist) => Ok(pool[dist.sample(rng)]),
        // All-zero weights degrade to a uniform draw.
        Err(_) => Ok(pool[rng.gen_range(0..pool.len())]),
    }
}

/// Bandwidth-weighted entry (from the guards), exit and middle, resampling
/// the whole triple on conflicts.
pub fn vanilla_select<R: Rng + ?Sized>(
    consensus: &Consensus,
    guards: &GuardSet,
    rng: &mut R,
) -> Result<Selection, SelectionError> {
    for _ in 0..MAX_ATTEMPTS {
        let entry = pick_weighted(consensus, guards.relays(), rng, "entry")?;
        let exit = consensus.sample_exit(rng)?;
        let middle = consensus.sample_any(rng)?;
        if consensus.compatible(&[entry, middle, exit]) {
            return Ok(Selection::plain(entry, middle, exit, Provenance::Vanilla));
        }
    }
    Err(SelectionError::Unsatisfiable(MAX_ATTEMPTS))
}

/// Like [`vanilla_select`] with equal weights: entry among all Guard-flagged
/// relays, exit among Exit-flagged relays, middle among all relays.
pub fn uniform_select<R: Rng + ?Sized>(
    consensus: &Consensus,
    rng: &mut R,
) -> Result<Selection, SelectionError> {
    let n = consensus.relays().len();
    for _ in 0..MAX_ATTEMPTS {
        let entry = consensus.guards()[rng.gen_range(0..consensus.guards().len())];
        let exit = consensus.exits()[rng.gen_range(0..consensus.exits().len())];
        let middle = rng.gen_range(0..n);
        if consensus.compatible(&[entry, middle, exit]) {
            return Ok(Selection::plain(entry, middle, exit, Provenance::Uniform));
        }
    }
    Err(SelectionError::Unsatisfiable(MAX_ATTEMPTS))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AstoriaConfig {
    /// Minimum safe/assessable ratio below which safe pairs are discarded
    /// and the LP decides. Zero disables the defense.
    pub safe_threshold: f64,
}

impl Default for AstoriaConfig {
    fn default() -> Self {
        AstoriaConfig { safe_threshold: 0.0 }
    }
}

/// Candidate (entry, exit) pair with its assessment.
#[derive(Debug, Clone)]
pub struct AssessedPair {
    pub entry: RelayIdx,
    pub exit: RelayIdx,
    pub assessment: ThreatAssessment,
}

/// AS-aware selector. Keeps a memo of leg assessments so repeated circuit
/// construction toward the same destination does not recompute path sets.
pub struct Astoria<'a> {
    threat: &'a ThreatModel<'a>,
    mode: AdversaryMode,
    config: AstoriaConfig,
    legs: HashMap<(AsId, AsId), Option<std::collections::BTreeSet<ColluderClass>>>,
}

impl<'a> Astoria<'a> {
    pub fn new(threat: &'a ThreatModel<'a>, mode: AdversaryMode, config: AstoriaConfig) -> Self {
        Astoria {
            threat,
            mode,
            config,
            legs: HashMap::new(),
        }
    }

    pub fn mode(&self) -> AdversaryMode {
        self.mode
    }

    fn leg(&mut self, outer: AsId, relay: AsId) -> Result<Option<std::collections::BTreeSet<ColluderClass>>, SelectionError> {
        if let Some(hit) = self.legs.get(&(outer, relay)) {
            return Ok(hit.clone());
        }
        let classes = self
            .threat
            .leg_classes(outer, relay, self.mode)
            .map_err(ThreatError::from)?;
        self.legs.insert((outer, relay), classes.clone());
        Ok(classes)
    }

    /// Steps 1 and 2: compatible guard x exit pairs and their assessments.
    pub fn assess_pairs(
        &mut self,
        consensus: &Consensus,
        guards: &GuardSet,
        src: AsId,
        dst: AsId,
    ) -> Result<Vec<AssessedPair>, SelectionError> {
        let mut out = Vec::new();
        for &entry in guards.relays() {
            let entry_leg = self.leg(src, consensus.relay(entry).asn)?;
            for &exit in consensus.exits() {
                if consensus.relay(entry).conflicts_with(consensus.relay(exit)) {
                    continue;
                }
                let exit_leg = self.leg(dst, consensus.relay(exit).asn)?;
                let assessment = ThreatModel::combine_legs(entry_leg.as_ref(), exit_leg.as_ref());
                out.push(AssessedPair {
                    entry,
                    exit,
                    assessment,
                });
            }
        }
        Ok(out)
    }

    pub fn select<R: Rng + ?Sized>(
        &mut self,
        consensus: &Consensus,
        guards: &GuardSet,
        src: AsId,
        dst: AsId,
        rng: &mut R,
    ) -> Result<Selection, SelectionError> {
        let pairs = self.assess_pairs(consensus, guards, src, dst)?;
        let assessable: Vec<&AssessedPair> = pairs.iter().filter(|p| p.assessment.assessable).collect();
        if assessable.is_empty() {
            return Err(SelectionError::NoAssessablePairs);
        }
        let safe: Vec<&AssessedPair> = assessable
            .iter()
            .copied()
            .filter(|p| !p.assessment.vulnerable)
            .collect();
        let ratio = safe.len() as f64 / assessable.len() as f64;
        let use_safe = !safe.is_empty() && ratio >= self.config.safe_threshold;

        let (entry, exit, provenance, lp_objective) = if use_safe {
            let weights = safe
                .iter()
                .map(|p| consensus.relay(p.entry).bandwidth * consensus.relay(p.exit).bandwidth);
            let k = match WeightedIndex::new(weights) {
                Ok(dist) => dist.sample(rng),
                Err(_) => rng.gen_range(0..safe.len()),
            };
            (safe[k].entry, safe[k].exit, Provenance::Bandwidth, None)
        } else {
            // Below the threshold the remaining safe pairs are discarded.
            let candidates: Vec<&AssessedPair> = if safe.is_empty() {
                assessable
            } else {
                assessable
                    .into_iter()
                    .filter(|p| p.assessment.vulnerable)
                    .collect()
            };
            let problem = SelectionProblem::from_pair_attackers(
                candidates.iter().map(|p| (p.entry, p.exit)).collect(),
                candidates.iter().map(|p| p.assessment.attackers.iter().cloned()),
            )?;
            let dist = solve_minimax(&problem)?;
            let k = WeightedIndex::new(&dist.probs)
                .map_err(|_| LpError::Infeasible)?
                .sample(rng);
            (candidates[k].entry, candidates[k].exit, Provenance::Lp, Some(dist.objective))
        };

        let middle = pick_middle(consensus, entry, exit, rng)?;
        Ok(Selection {
            entry,
            middle,
            exit,
            provenance,
            safe_pairs: safe.len(),
            assessable_pairs: pairs.iter().filter(|p| p.assessment.assessable).count(),
            lp_objective,
        })
    }
}

fn pick_middle<R: Rng + ?Sized>(
    consensus: &Consensus,
    entry: RelayIdx,
    exit: RelayIdx,
    rng: &mut R,
) -> Result<RelayIdx, SelectionError> {
    for _ in 0..MAX_ATTEMPTS {
        let m = consensus.sample_any(rng)?;
        if consensus.compatible(&[entry, m, exit]) {
            return Ok(m);
        }
    }
    Err(SelectionError::Unsatisfiable(MAX_ATTEMPTS))
}

/// One-shot AS-aware selection.
#[allow(clippy::too_many_arguments)]
pub fn astoria_select<R: Rng + ?Sized>(
    consensus: &Consensus,
    guards: &GuardSet,
    src: AsId,
    dst: AsId,
    mode: AdversaryMode,
    threat: &ThreatModel<'_>,
    rng: &mut R,
    config: AstoriaConfig,
) -> Result<Selection, SelectionError> {
    Astoria::new(threat, mode, config).select(consensus, guards, src, dst, rng)
}

/// Expected traffic share of every relay under perfect load balancing.
pub fn perfect_balance_distribution(consensus: &Consensus) -> Result<Vec<f64>, SelectionError> {
    let total: f64 = consensus.relays().iter().map(|r| r.bandwidth).sum();
    if total <= 0.0 {
        return Err(SelectionError::ZeroBandwidth);
    }
    Ok(consensus.relays().iter().map(|r| r.bandwidth / total).collect())
}

/// Circuit reuse rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum PoolPolicy {
    /// Reuse a live circuit built for the same destination AS.
    PerDestination,
    /// Reuse any live circuit that has served fewer than this many requests.
    RequestCap(u32),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PooledCircuit {
    pub selection: Selection,
    pub dst: Option<AsId>,
    pub requests_served: u32,
    pub created_at: u64,
}

#[derive(Debug, Clone)]
pub struct CircuitPool {
    policy: PoolPolicy,
    /// Circuits older than this many events are dropped; `None` keeps them.
    max_age: Option<u64>,
    circuits: Vec<PooledCircuit>,
}

impl CircuitPool {
    pub fn new(policy: PoolPolicy) -> Self {
        CircuitPool {
            policy,
            max_age: None,
            circuits: Vec::new(),
        }
    }

    pub fn with_max_age(mut self, events: u64) -> Self {
        self.max_age = Some(events);
        self
    }

    pub fn circuits(&self) -> &[PooledCircuit] {
        &self.circuits
    }

    fn expire(&mut self, event: u64) {
        if let Some(max_age) = self.max_age {
            self.circuits
                .retain(|c| event.saturating_sub(c.created_at) <= max_age);
        }
    }

    /// Returns the circuit serving a request toward `dst` at `event`,
    /// building one through `build` when no live circuit is usable.
    pub fn get_or_build<F>(
        &mut self,
        consensus: &Consensus,
        dst: AsId,
        event: u64,
        build: F,
    ) -> Result<(&PooledCircuit, bool), SelectionError>
    where
        F: FnOnce() -> Result<Selection, SelectionError>,
    {
        self.expire(event);
        let reuse = match self.policy {
            PoolPolicy::PerDestination => self.circuits.iter().rposition(|c| c.dst == Some(dst)),
            PoolPolicy::RequestCap(cap) => {
                self.circuits.iter().rposition(|c| c.requests_served < cap)
            }
        };
        if let Some(i) = reuse {
            self.circuits[i].requests_served += 1;
            return Ok((&self.circuits[i], false));
        }
        let selection = build()?;
        let relays = [selection.entry, selection.middle, selection.exit];
        assert!(
            consensus.compatible(&relays),
            "selector produced a circuit violating relay constraints"
        );
        self.circuits.push(PooledCircuit {
            selection,
            dst: matches!(self.policy, PoolPolicy::PerDestination).then_some(dst),
            requests_served: 1,
            created_at: event,
        });
        Ok((self.circuits.last().unwrap(), true))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SelectorKind {
    Vanilla,
    Uniform,
    Astoria,
}

impl fmt::Display for SelectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SelectorKind::Vanilla => "vanilla",
            SelectorKind::Uniform => "uniform",
            SelectorKind::Astoria => "astoria",
        })
    }
}

/// A simulated client: selector, guards and circuit pool for one source AS.
pub struct Client<'a> {
    kind: SelectorKind,
    consensus: &'a Consensus,
    guards: GuardSet,
    src: AsId,
    astoria: Option<Astoria<'a>>,
    pool: CircuitPool,
}

impl<'a> Client<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        kind: SelectorKind,
        consensus: &'a Consensus,
        guards: GuardSet,
        src: AsId,
        threat: &'a ThreatModel<'a>,
        mode: AdversaryMode,
        config: AstoriaConfig,
        max_requests_per_circuit: u32,
    ) -> Self {
        let (astoria, policy) = match kind {
            SelectorKind::Astoria => (
                Some(Astoria::new(threat, mode, config)),
                PoolPolicy::PerDestination,
            ),
            _ => (None, PoolPolicy::RequestCap(max_requests_per_circuit)),
        };
        Client {
            kind,
            consensus,
            guards,
            src,
            astoria,
            pool: CircuitPool::new(policy),
        }
    }

    pub fn guards(&self) -> &GuardSet {
        &self.guards
    }

    pub fn select<R: Rng + ?Sized>(&mut self, dst: AsId, rng: &mut R) -> Result<Selection, SelectionError> {
        match self.kind {
            SelectorKind::Vanilla => vanilla_select(self.consensus, &self.guards, rng),
            SelectorKind::Uniform => uniform_select(self.consensus, rng),
            SelectorKind::Astoria => self
                .astoria
                .as_mut()
                .expect("astoria client has a selector")
                .select(self.consensus, &self.guards, self.src, dst, rng),
        }
    }

    /// Serves one request, returning the circuit and whether it was new.
    pub fn request<R: Rng + ?Sized>(
        &mut self,
        dst: AsId,
        event: u64,
        rng: &mut R,
    ) -> Result<(PooledCircuit, bool), SelectionError> {
        let Client {
            kind,
            consensus,
            guards,
            src,
            astoria,
            pool,
        } = self;
        let (circuit, built) = pool.get_or_build(consensus, dst, event, || match kind {
            SelectorKind::Vanilla => vanilla_select(consensus, guards, rng),
            SelectorKind::Uniform => uniform_select(consensus, rng),
            SelectorKind::Astoria => astoria
                .as_mut()
                .expect("astoria client has a selector")
                .select(consensus, guards, *src, dst, rng),
        })?;
        Ok((circuit.clone(), built))
    }

    /// Circuit spec for a selection made by this client.
    pub fn circuit_spec(&self, selection: &Selection, dst: AsId) -> CircuitSpec {
        CircuitSpec {
            src: self.src,
            entry: self.consensus.relay(selection.entry).asn,
            exit: self.consensus.relay(selection.exit).asn,
            dst,
        }
    }
}
