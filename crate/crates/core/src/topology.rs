//! AS-level topology: relationship-annotated graph, sibling organizations and
//! country labels.
//!
//! The relationship file uses the two-kind convention
//! `provider|customer|-1` and `peer|peer|0`. Organizations come from an
//! `org|asn` file and countries from an `asn|CC` file. Everything here is
//! immutable once loaded.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{self, BufRead, Write};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Autonomous-system number. Always nonzero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct AsId(u32);

impl AsId {
    pub fn new(value: u32) -> Option<Self> {
        (value > 0).then_some(AsId(value))
    }

    pub fn get(self) -> u32 {
        self.0
    }
}

impl TryFrom<u32> for AsId {
    type Error = String;

    fn try_from(value: u32) -> Result<Self, Self::Error> {
        AsId::new(value).ok_or_else(|| "AS number must be positive".to_string())
    }
}

impl From<AsId> for u32 {
    fn from(id: AsId) -> u32 {
        id.0
    }
}

impl fmt::Display for AsId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl FromStr for AsId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let s = s
            .strip_prefix("AS")
            .or_else(|| s.strip_prefix("as"))
            .unwrap_or(s);
        let value: u32 = s
            .parse()
            .map_err(|_| format!("invalid AS number {s:?}"))?;
        AsId::new(value).ok_or_else(|| "AS number must be positive".to_string())
    }
}

/// Business relationship carried by an edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RelKind {
    /// First endpoint is the provider of the second.
    ProviderCustomer,
    PeerPeer,
}

/// How a neighbor relates to a given AS.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Neighbor {
    Customer,
    Peer,
    Provider,
}

#[derive(Debug, Error)]
pub enum TopologyError {
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("line {line}: self-loop on AS {asn}")]
    SelfLoop { line: usize, asn: AsId },
    #[error("line {line}: contradictory relationship between AS {a} and AS {b}")]
    Contradiction { line: usize, a: AsId, b: AsId },
    #[error("line {line}: AS {asn} already assigned to {existing:?}, got {new:?}")]
    ConflictingAssignment {
        line: usize,
        asn: AsId,
        existing: String,
        new: String,
    },
    #[error("line {line}: invalid country code {code:?}")]
    InvalidCountry { line: usize, code: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl TopologyError {
    /// Line number the error refers to, when it came from a parser.
    pub fn line(&self) -> Option<usize> {
        match self {
            TopologyError::Malformed { line, .. }
            | TopologyError::SelfLoop { line, .. }
            | TopologyError::Contradiction { line, .. }
            | TopologyError::ConflictingAssignment { line, .. }
            | TopologyError::InvalidCountry { line, .. } => Some(*line),
            TopologyError::Io(_) => None,
        }
    }
}

/// Yields `(line_number, trimmed_content)` for every non-blank, non-comment line.
fn data_lines<R: BufRead>(
    reader: R,
) -> impl Iterator<Item = Result<(usize, String), TopologyError>> {
    reader.lines().enumerate().filter_map(|(i, line)| match line {
        Err(e) => Some(Err(TopologyError::Io(e))),
        Ok(line) => {
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                None
            } else {
                Some(Ok((i + 1, trimmed.to_string())))
            }
        }
    })
}

fn parse_asn(field: &str, line: usize) -> Result<AsId, TopologyError> {
    field.parse().map_err(|reason| TopologyError::Malformed { line, reason })
}

/// Dense node index into an [`AsGraph`]. Index order equals AsId order.
pub type NodeIdx = u32;

/// Annotated AS-level topology.
///
/// Nodes are stored densely, sorted by AS number, so iteration order is
/// deterministic and `NodeIdx` comparisons agree with `AsId` comparisons.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AsGraph {
    ids: Vec<AsId>,
    index: HashMap<AsId, NodeIdx>,
    customers: Vec<Vec<NodeIdx>>,
    providers: Vec<Vec<NodeIdx>>,
    peers: Vec<Vec<NodeIdx>>,
    edge_count: usize,
}

impl AsGraph {
    /// Builds a graph from `(a, b, kind)` triples. Identical duplicates are
    /// tolerated; a peer edge may be given in either orientation.
    pub fn from_edges<I>(edges: I) -> Result<Self, TopologyError>
    where
        I: IntoIterator<Item = (AsId, AsId, RelKind)>,
    {
        let mut builder = EdgeSet::default();
        for (n, (a, b, kind)) in edges.into_iter().enumerate() {
            builder.insert(n + 1, a, b, kind)?;
        }
        Ok(builder.build())
    }

    pub fn node_count(&self) -> usize {
        self.ids.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edge_count
    }

    pub fn contains(&self, asn: AsId) -> bool {
        self.index.contains_key(&asn)
    }

    pub fn index_of(&self, asn: AsId) -> Option<NodeIdx> {
        self.index.get(&asn).copied()
    }

    pub fn id(&self, idx: NodeIdx) -> AsId {
        self.ids[idx as usize]
    }

    /// All ASes in ascending order.
    pub fn nodes(&self) -> &[AsId] {
        &self.ids
    }

    pub fn customers_of(&self, idx: NodeIdx) -> &[NodeIdx] {
        &self.customers[idx as usize]
    }

    pub fn providers_of(&self, idx: NodeIdx) -> &[NodeIdx] {
        &self.providers[idx as usize]
    }

    pub fn peers_of(&self, idx: NodeIdx) -> &[NodeIdx] {
        &self.peers[idx as usize]
    }

    pub fn customers(&self, asn: AsId) -> impl Iterator<Item = AsId> + '_ {
        self.adjacent(asn, &self.customers)
    }

    pub fn providers(&self, asn: AsId) -> impl Iterator<Item = AsId> + '_ {
        self.adjacent(asn, &self.providers)
    }

    pub fn peers(&self, asn: AsId) -> impl Iterator<Item = AsId> + '_ {
        self.adjacent(asn, &self.peers)
    }

    fn adjacent<'a>(
        &'a self,
        asn: AsId,
        lists: &'a [Vec<NodeIdx>],
    ) -> impl Iterator<Item = AsId> + 'a {
        self.index_of(asn)
            .into_iter()
            .flat_map(move |i| lists[i as usize].iter().map(move |&j| self.id(j)))
    }

    /// How `other` relates to `asn`, if they are adjacent.
    pub fn relationship(&self, asn: AsId, other: AsId) -> Option<Neighbor> {
        let (a, b) = (self.index_of(asn)?, self.index_of(other)?);
        let a = a as usize;
        if self.customers[a].binary_search(&b).is_ok() {
            Some(Neighbor::Customer)
        } else if self.peers[a].binary_search(&b).is_ok() {
            Some(Neighbor::Peer)
        } else if self.providers[a].binary_search(&b).is_ok() {
            Some(Neighbor::Provider)
        } else {
            None
        }
    }

    /// Every edge once, in canonical order: provider-customer edges as
    /// (provider, customer), peer edges with the smaller AS first.
    pub fn edges(&self) -> Vec<(AsId, AsId, RelKind)> {
        let mut out = Vec::with_capacity(self.edge_count);
        for (u, id) in self.ids.iter().enumerate() {
            for &c in &self.customers[u] {
                out.push((*id, self.id(c), RelKind::ProviderCustomer));
            }
            for &p in &self.peers[u] {
                if (u as NodeIdx) < p {
                    out.push((*id, self.id(p), RelKind::PeerPeer));
                }
            }
        }
        out
    }

    /// Writes the graph in the relationship-file format.
    pub fn write_to<W: Write>(&self, mut writer: W) -> io::Result<()> {
        for (a, b, kind) in self.edges() {
            let rel = match kind {
                RelKind::ProviderCustomer => -1,
                RelKind::PeerPeer => 0,
            };
            writeln!(writer, "{a}|{b}|{rel}")?;
        }
        Ok(())
    }
}

#[derive(Default)]
struct EdgeSet {
    // Keyed by the unordered pair (lo, hi).
    pairs: BTreeMap<(AsId, AsId), (RelKind, AsId)>,
}

impl EdgeSet {
    fn insert(&mut self, line: usize, a: AsId, b: AsId, kind: RelKind) -> Result<(), TopologyError> {
        if a == b {
            return Err(TopologyError::SelfLoop { line, asn: a });
        }
        let key = (a.min(b), a.max(b));
        // Peer edges carry the low endpoint so both orientations compare equal.
        let value = match kind {
            RelKind::ProviderCustomer => (kind, a),
            RelKind::PeerPeer => (kind, key.0),
        };
        match self.pairs.get(&key) {
            Some(existing) if *existing != value => {
                Err(TopologyError::Contradiction { line, a, b })
            }
            Some(_) => Ok(()),
            None => {
                self.pairs.insert(key, value);
                Ok(())
            }
        }
    }

    fn build(self) -> AsGraph {
        let mut ids: Vec<AsId> = self.pairs.keys().flat_map(|&(a, b)| [a, b]).collect();
        ids.sort_unstable();
        ids.dedup();
        let index: HashMap<AsId, NodeIdx> = ids
            .iter()
            .enumerate()
            .map(|(i, &id)| (id, i as NodeIdx))
            .collect();
        let n = ids.len();
        let mut customers = vec![Vec::new(); n];
        let mut providers = vec![Vec::new(); n];
        let mut peers = vec![Vec::new(); n];
        for (&(lo, hi), &(kind, first)) in &self.pairs {
            let (l, h) = (index[&lo] as usize, index[&hi] as usize);
            match kind {
                RelKind::PeerPeer => {
                    peers[l].push(h as NodeIdx);
                    peers[h].push(l as NodeIdx);
                }
                RelKind::ProviderCustomer => {
                    let (p, c) = if first == lo { (l, h) } else { (h, l) };
                    customers[p].push(c as NodeIdx);
                    providers[c].push(p as NodeIdx);
                }
            }
        }
        for list in customers.iter_mut().chain(providers.iter_mut()).chain(peers.iter_mut()) {
            list.sort_unstable();
        }
        AsGraph {
            ids,
            index,
            customers,
            providers,
            peers,
            edge_count: self.pairs.len(),
        }
    }
}

/// Parses a relationship file.
pub fn load_topology<R: BufRead>(reader: R) -> Result<AsGraph, TopologyError> {
    let mut edges = EdgeSet::default();
    for item in data_lines(reader) {
        let (line, text) = item?;
        let fields: Vec<&str> = text.split('|').map(str::trim).collect();
        if fields.len() < 3 {
            return Err(TopologyError::Malformed {
                line,
                reason: format!("expected `asn|asn|rel`, got {text:?}"),
            });
        }
        let a = parse_asn(fields[0], line)?;
        let b = parse_asn(fields[1], line)?;
        let kind = match fields[2] {
            "-1" => RelKind::ProviderCustomer,
            "0" => RelKind::PeerPeer,
            other => {
                return Err(TopologyError::Malformed {
                    line,
                    reason: format!("unknown relationship {other:?}"),
                })
            }
        };
        edges.insert(line, a, b, kind)?;
    }
    Ok(edges.build())
}

/// Sibling-organization map. Unmapped ASes form singleton organizations.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OrgMap {
    org_of: HashMap<AsId, Arc<str>>,
}

impl OrgMap {
    pub fn insert(&mut self, asn: AsId, org: &str) -> Result<(), TopologyError> {
        match self.org_of.get(&asn) {
            Some(existing) if &**existing != org => Err(TopologyError::ConflictingAssignment {
                line: 0,
                asn,
                existing: existing.to_string(),
                new: org.to_string(),
            }),
            Some(_) => Ok(()),
            None => {
                self.org_of.insert(asn, Arc::from(org));
                Ok(())
            }
        }
    }

    /// Named organization of `asn`, or `None` for a singleton.
    pub fn org_of(&self, asn: AsId) -> Option<&Arc<str>> {
        self.org_of.get(&asn)
    }

    pub fn len(&self) -> usize {
        self.org_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.org_of.is_empty()
    }
}

pub fn load_siblings<R: BufRead>(reader: R) -> Result<OrgMap, TopologyError> {
    let mut map = OrgMap::default();
    for item in data_lines(reader) {
        let (line, text) = item?;
        let (org, asn) = text.rsplit_once('|').ok_or_else(|| TopologyError::Malformed {
            line,
            reason: format!("expected `org|asn`, got {text:?}"),
        })?;
        let org = org.trim();
        if org.is_empty() {
            return Err(TopologyError::Malformed {
                line,
                reason: "empty organization".into(),
            });
        }
        let asn = parse_asn(asn, line)?;
        map.insert(asn, org).map_err(|e| match e {
            TopologyError::ConflictingAssignment { asn, existing, new, .. } => {
                TopologyError::ConflictingAssignment { line, asn, existing, new }
            }
            other => other,
        })?;
    }
    Ok(map)
}

/// ISO 3166-1 alpha-2 code. `ZZ` marks an unknown country.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CountryCode([u8; 2]);

impl CountryCode {
    pub const UNKNOWN: CountryCode = CountryCode(*b"ZZ");

    pub fn is_unknown(self) -> bool {
        self == Self::UNKNOWN
    }

    pub fn as_str(&self) -> &str {
        std::str::from_utf8(&self.0).expect("country codes are ASCII")
    }
}

impl FromStr for CountryCode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.as_bytes() {
            [a, b] if a.is_ascii_uppercase() && b.is_ascii_uppercase() => Ok(CountryCode([*a, *b])),
            _ => Err(format!("invalid country code {s:?}")),
        }
    }
}

impl fmt::Display for CountryCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for CountryCode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for CountryCode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CountryMap {
    country_of: HashMap<AsId, CountryCode>,
}

impl CountryMap {
    pub fn insert(&mut self, asn: AsId, code: CountryCode) {
        self.country_of.insert(asn, code);
    }

    pub fn country_of(&self, asn: AsId) -> CountryCode {
        self.country_of
            .get(&asn)
            .copied()
            .unwrap_or(CountryCode::UNKNOWN)
    }

    /// Number of mapped ASes in `country`.
    pub fn count_in(&self, country: CountryCode) -> usize {
        self.country_of.values().filter(|&&c| c == country).count()
    }
}

pub fn load_countries<R: BufRead>(reader: R) -> Result<CountryMap, TopologyError> {
    let mut map = CountryMap::default();
    for item in data_lines(reader) {
        let (line, text) = item?;
        let (asn, code) = text.split_once('|').ok_or_else(|| TopologyError::Malformed {
            line,
            reason: format!("expected `asn|CC`, got {text:?}"),
        })?;
        let asn = parse_asn(asn, line)?;
        let code = code.trim();
        let code: CountryCode = code.parse().map_err(|_| TopologyError::InvalidCountry {
            line,
            code: code.to_string(),
        })?;
        map.insert(asn, code);
    }
    Ok(map)
}

/// Granularity at which on-path ASes are assumed to collude.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum AdversaryMode {
    SingleAs,
    Sibling,
    State,
}

impl fmt::Display for AdversaryMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AdversaryMode::SingleAs => "single-as",
            AdversaryMode::Sibling => "sibling",
            AdversaryMode::State => "state",
        })
    }
}

/// Identity of a colluding group. Two ASes collude iff their classes are equal.
///
/// An AS without a named organization (sibling mode) or without a known
/// country (state mode) forms a class of its own, so missing metadata never
/// merges unrelated ASes.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ColluderClass {
    As(AsId),
    Org(Arc<str>),
    Country(CountryCode),
}

impl fmt::Display for ColluderClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ColluderClass::As(id) => write!(f, "AS{id}"),
            ColluderClass::Org(org) => write!(f, "org:{org}"),
            ColluderClass::Country(cc) => write!(f, "cc:{cc}"),
        }
    }
}

impl Serialize for ColluderClass {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

/// Graph plus the metadata needed to map ASes to colluder classes.
#[derive(Debug, Clone)]
pub struct TopologyBundle {
    pub graph: AsGraph,
    pub orgs: OrgMap,
    pub countries: CountryMap,
}

impl TopologyBundle {
    pub fn new(graph: AsGraph) -> Self {
        TopologyBundle {
            graph,
            orgs: OrgMap::default(),
            countries: CountryMap::default(),
        }
    }

    pub fn class_of(&self, asn: AsId, mode: AdversaryMode) -> ColluderClass {
        colluder_class(asn, mode, &self.orgs, &self.countries)
    }
}

pub fn colluder_class(
    asn: AsId,
    mode: AdversaryMode,
    orgs: &OrgMap,
    countries: &CountryMap,
) -> ColluderClass {
    match mode {
        AdversaryMode::SingleAs => ColluderClass::As(asn),
        AdversaryMode::Sibling => match orgs.org_of(asn) {
            Some(org) => ColluderClass::Org(org.clone()),
            None => ColluderClass::As(asn),
        },
        AdversaryMode::State => {
            let cc = countries.country_of(asn);
            if cc.is_unknown() {
                ColluderClass::As(asn)
            } else {
                ColluderClass::Country(cc)
            }
        }
    }
}
