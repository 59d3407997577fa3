//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;

use astoria::selection::Consensus;
use astoria::topology::{
    load_countries, load_siblings, load_topology, AsGraph, CountryCode, CountryMap, Neighbor,
    OrgMap, RelKind,
};
use astoria::{AdversaryMode, AsId, TopologyBundle};
use rand::Rng;

pub fn asn(n: u32) -> AsId {
    AsId::new(n).unwrap()
}

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// Topology, siblings and countries of a fixture directory.
pub fn load_fixture_bundle(dir: &str) -> TopologyBundle {
    let open = |f: &str| BufReader::new(File::open(fixture(dir).join(f)).unwrap());
    let mut bundle = TopologyBundle::new(load_topology(open("topology.txt")).unwrap());
    if fixture(dir).join("siblings.txt").exists() {
        bundle.orgs = load_siblings(open("siblings.txt")).unwrap();
    }
    if fixture(dir).join("countries.txt").exists() {
        bundle.countries = load_countries(open("countries.txt")).unwrap();
    }
    bundle
}

pub fn load_fixture_consensus(dir: &str) -> Consensus {
    Consensus::from_csv(File::open(fixture(dir).join("consensus.csv")).unwrap(), dir).unwrap()
}

/// Random graph on up to `max_nodes` ASes. Every node gets a tier and
/// provider edges only point from a lower tier to a higher one, so the
/// provider hierarchy is acyclic. Peer edges join arbitrary unlinked pairs.
pub fn random_graph<R: Rng>(rng: &mut R, max_nodes: u32) -> AsGraph {
    loop {
        let n = rng.gen_range(2..=max_nodes);
        let tiers: Vec<u32> = (0..n).map(|_| rng.gen_range(0..4)).collect();
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                let roll: f64 = rng.gen();
                let (a, b) = (asn(i + 1), asn(j + 1));
                if tiers[i as usize] != tiers[j as usize] && roll < 0.35 {
                    let (p, c) = if tiers[i as usize] < tiers[j as usize] { (a, b) } else { (b, a) };
                    edges.push((p, c, RelKind::ProviderCustomer));
                } else if roll > 0.82 {
                    edges.push((a, b, RelKind::PeerPeer));
                }
            }
        }
        if !edges.is_empty() {
            return AsGraph::from_edges(edges).unwrap();
        }
    }
}

/// Route preference of `x` for a path leaving through neighbor `y`:
/// customer 2, peer 1, provider 0.
fn pref(graph: &AsGraph, x: AsId, y: AsId) -> u8 {
    match graph.relationship(x, y) {
        Some(Neighbor::Customer) => 2,
        Some(Neighbor::Peer) => 1,
        Some(Neighbor::Provider) => 0,
        None => unreachable!("not adjacent"),
    }
}

/// Every best path toward `dest`, found by synchronous path-vector
/// iteration: each AS keeps all most-preferred, then shortest, loop-free
/// paths among those its neighbors export to it.
pub fn oracle_routes(graph: &AsGraph, dest: AsId) -> BTreeMap<AsId, BTreeSet<Vec<AsId>>> {
    let mut chosen: BTreeMap<AsId, BTreeSet<Vec<AsId>>> = BTreeMap::new();
    chosen.insert(dest, BTreeSet::from([vec![dest]]));
    // The destination's own route counts as a customer route for export.
    let exports_to = |chosen_path: &Vec<AsId>, y: AsId, x: AsId| -> bool {
        let customer_route = chosen_path.len() == 1 || pref(graph, y, chosen_path[1]) == 2;
        customer_route || graph.relationship(y, x) == Some(Neighbor::Customer)
    };
    for _ in 0..4 * graph.node_count() + 4 {
        let mut next: BTreeMap<AsId, BTreeSet<Vec<AsId>>> = BTreeMap::new();
        next.insert(dest, BTreeSet::from([vec![dest]]));
        for &x in graph.nodes() {
            if x == dest {
                continue;
            }
            let mut best: Option<(u8, usize)> = None;
            let mut paths = BTreeSet::new();
            let neighbors = graph
                .customers(x)
                .chain(graph.peers(x))
                .chain(graph.providers(x));
            for y in neighbors {
                for p in chosen.get(&y).into_iter().flatten() {
                    if p.contains(&x) || !exports_to(p, y, x) {
                        continue;
                    }
                    // Higher preference first, then shorter.
                    let key = (pref(graph, x, y), usize::MAX - p.len());
                    let mut full = vec![x];
                    full.extend(p);
                    match best {
                        Some(b) if key < b => {}
                        Some(b) if key == b => {
                            paths.insert(full);
                        }
                        _ => {
                            best = Some(key);
                            paths = BTreeSet::from([full]);
                        }
                    }
                }
            }
            if !paths.is_empty() {
                next.insert(x, paths);
            }
        }
        if next == chosen {
            return chosen;
        }
        chosen = next;
    }
    panic!("path-vector iteration did not converge");
}

/// Checks the up*, at most one peer, down* shape.
pub fn is_valley_free(graph: &AsGraph, path: &[AsId]) -> bool {
    // 0 climbing, 1 after the peak
    let mut phase = 0;
    for w in path.windows(2) {
        match graph.relationship(w[0], w[1]) {
            Some(Neighbor::Provider) if phase == 0 => {}
            Some(Neighbor::Peer) if phase == 0 => phase = 1,
            Some(Neighbor::Customer) => phase = 1,
            _ => return false,
        }
    }
    true
}

/// All best routes toward every destination, keyed by destination.
pub struct OracleRouting {
    pub routes: HashMap<AsId, BTreeMap<AsId, BTreeSet<Vec<AsId>>>>,
}

impl OracleRouting {
    pub fn new(graph: &AsGraph) -> Self {
        OracleRouting {
            routes: graph.nodes().iter().map(|&d| (d, oracle_routes(graph, d))).collect(),
        }
    }

    pub fn paths(&self, src: AsId, dst: AsId) -> BTreeSet<Vec<AsId>> {
        self.routes[&dst].get(&src).cloned().unwrap_or_default()
    }

    /// Union of the ASes on the best paths in both directions.
    pub fn path_set(&self, a: AsId, b: AsId) -> BTreeSet<AsId> {
        self.paths(a, b)
            .into_iter()
            .chain(self.paths(b, a))
            .flatten()
            .collect()
    }
}

/// Colluder label of an AS, spelled the way the library displays classes.
pub fn oracle_class(
    a: AsId,
    mode: AdversaryMode,
    orgs: &HashMap<AsId, String>,
    countries: &HashMap<AsId, String>,
) -> String {
    let fallback = format!("AS{a}");
    match mode {
        AdversaryMode::SingleAs => fallback,
        AdversaryMode::Sibling => orgs.get(&a).map_or(fallback, |o| format!("org:{o}")),
        AdversaryMode::State => match countries.get(&a) {
            Some(cc) if cc != "ZZ" => format!("cc:{cc}"),
            _ => fallback,
        },
    }
}

/// Random sibling and country assignment, returned both as library maps and
/// as plain lookup tables for the oracle.
pub fn random_metadata<R: Rng>(
    rng: &mut R,
    graph: &AsGraph,
) -> (OrgMap, CountryMap, HashMap<AsId, String>, HashMap<AsId, String>) {
    let mut orgs = OrgMap::default();
    let mut countries = CountryMap::default();
    let mut org_table = HashMap::new();
    let mut cc_table = HashMap::new();
    for &a in graph.nodes() {
        if rng.gen_bool(0.6) {
            let org = format!("o{}", rng.gen_range(0..4));
            orgs.insert(a, &org).unwrap();
            org_table.insert(a, org);
        }
        if rng.gen_bool(0.7) {
            let cc = ["US", "DE", "BR", "ZZ"][rng.gen_range(0..4)];
            countries.insert(a, cc.parse::<CountryCode>().unwrap());
            cc_table.insert(a, cc.to_string());
        }
    }
    (orgs, countries, org_table, cc_table)
}

/// Reference vulnerability check: `None` when a leg is unreachable, else the
/// sorted attacker labels.
pub fn oracle_assess(
    routing: &OracleRouting,
    (src, entry, exit, dst): (AsId, AsId, AsId, AsId),
    mode: AdversaryMode,
    orgs: &HashMap<AsId, String>,
    countries: &HashMap<AsId, String>,
) -> Option<BTreeSet<String>> {
    let client = routing.path_set(src, entry);
    let dest = routing.path_set(dst, exit);
    if client.is_empty() || dest.is_empty() {
        return None;
    }
    let label = |s: BTreeSet<AsId>| -> BTreeSet<String> {
        s.into_iter().map(|a| oracle_class(a, mode, orgs, countries)).collect()
    };
    let (c, d) = (label(client), label(dest));
    Some(c.intersection(&d).cloned().collect())
}

/// Minimum over the simplex grid of step `1/res` of the worst adversary
/// exposure, for `m` pairs and adversaries given by pair incidence.
pub fn grid_minimax(m: usize, incidence: &[Vec<usize>], res: u32) -> f64 {
    fn walk(
        k: usize,
        left: u32,
        counts: &mut Vec<u32>,
        incidence: &[Vec<usize>],
        res: u32,
        best: &mut f64,
    ) {
        if k + 1 == counts.len() {
            counts[k] = left;
            let worst = incidence
                .iter()
                .map(|pairs| pairs.iter().map(|&p| counts[p]).sum::<u32>())
                .max()
                .unwrap_or(0);
            *best = best.min(worst as f64 / res as f64);
            return;
        }
        for c in 0..=left {
            counts[k] = c;
            walk(k + 1, left - c, counts, incidence, res, best);
        }
    }
    let mut best = f64::INFINITY;
    walk(0, res, &mut vec![0; m], incidence, res, &mut best);
    best
}

/// Exact probability that vanilla selection with `guards` yields an
/// (entry, exit) pair for which `vulnerable` holds. Vanilla draws the three
/// positions independently by bandwidth and redraws conflicting triples, so
/// the law is the product measure conditioned on compatibility.
pub fn vanilla_exact(
    consensus: &Consensus,
    guards: &[usize],
    mut vulnerable: impl FnMut(usize, usize) -> bool,
) -> f64 {
    let bw = |i: usize| consensus.relay(i).bandwidth;
    let n = consensus.relays().len();
    let (mut total, mut bad) = (0.0, 0.0);
    for &e in guards {
        for &x in consensus.exits() {
            let mass: f64 = (0..n)
                .filter(|&m| consensus.compatible(&[e, m, x]))
                .map(|m| bw(e) * bw(x) * bw(m))
                .sum();
            total += mass;
            if mass > 0.0 && vulnerable(e, x) {
                bad += mass;
            }
        }
    }
    bad / total
}
