//! Multipath policy routing.
//!
//! [`compute_routing_tree`] runs the three-phase customer / peer / provider
//! propagation toward one destination and keeps, for every AS, all neighbors
//! that achieve its best (preference class, length). The resulting next-hop
//! DAG holds every path that satisfies local preference and shortest path at
//! every hop; no tie break is applied.

use std::collections::BTreeSet;
use std::num::NonZeroUsize;
use std::sync::Arc;

use lru::LruCache;
use parking_lot::Mutex;
use serde::Serialize;
use thiserror::Error;

use crate::topology::{AsGraph, AsId, NodeIdx};

/// Local-preference class of a route, ordered worst to best.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PrefClass {
    Provider,
    Peer,
    Customer,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RoutingError {
    #[error("AS {0} is not in the topology")]
    UnknownAs(AsId),
}

#[derive(Debug, Clone)]
struct Route {
    class: PrefClass,
    length: u32,
    next_hops: Vec<NodeIdx>,
}

/// Best routes from every AS toward `dest`.
#[derive(Debug, Clone)]
pub struct RoutingTree {
    dest: AsId,
    dest_idx: NodeIdx,
    routes: Vec<Option<Route>>,
    ids: Arc<[AsId]>,
}

impl RoutingTree {
    pub fn dest(&self) -> AsId {
        self.dest
    }

    fn idx(&self, asn: AsId) -> Option<NodeIdx> {
        self.ids.binary_search(&asn).ok().map(|i| i as NodeIdx)
    }

    fn route(&self, asn: AsId) -> Option<&Route> {
        self.idx(asn).and_then(|i| self.routes[i as usize].as_ref())
    }

    pub fn is_reachable(&self, asn: AsId) -> bool {
        self.route(asn).is_some()
    }

    /// Preference class of `asn`'s route. The destination reports `Customer`.
    pub fn class(&self, asn: AsId) -> Option<PrefClass> {
        self.route(asn).map(|r| r.class)
    }

    pub fn length(&self, asn: AsId) -> Option<u32> {
        self.route(asn).map(|r| r.length)
    }

    /// All tied best next hops of `asn`, ascending.
    pub fn next_hops(&self, asn: AsId) -> Option<Vec<AsId>> {
        self.route(asn)
            .map(|r| r.next_hops.iter().map(|&i| self.ids[i as usize]).collect())
    }

    pub fn reachable_count(&self) -> usize {
        self.routes.iter().filter(|r| r.is_some()).count()
    }

    /// Path set from `src`: every AS on some next-hop path to the destination,
    /// both endpoints included. Empty when `src` is unreachable.
    pub fn path_set(&self, src: AsId) -> PathSet {
        let Some(start) = self.idx(src).filter(|&i| self.routes[i as usize].is_some()) else {
            return PathSet::default();
        };
        // Every node reachable over next hops lies on some path to dest.
        let mut seen = vec![false; self.routes.len()];
        let mut stack = vec![start];
        seen[start as usize] = true;
        let mut members = Vec::new();
        while let Some(u) = stack.pop() {
            members.push(self.ids[u as usize]);
            if let Some(route) = &self.routes[u as usize] {
                for &v in &route.next_hops {
                    if !seen[v as usize] {
                        seen[v as usize] = true;
                        stack.push(v);
                    }
                }
            }
        }
        PathSet(members.into_iter().collect())
    }

    /// Depth-first enumeration of distinct paths `src -> dest`, visiting next
    /// hops in ascending AS order and stopping after `cap` paths.
    pub fn enumerate_paths(&self, src: AsId, cap: usize) -> PathEnumeration {
        let mut out = PathEnumeration::default();
        let Some(start) = self.idx(src).filter(|&i| self.routes[i as usize].is_some()) else {
            return out;
        };
        let mut path = vec![start];
        // Stack of (node, position in its next-hop list).
        let mut stack: Vec<(NodeIdx, usize)> = vec![(start, 0)];
        while let Some(&mut (u, ref mut pos)) = stack.last_mut() {
            if u == self.dest_idx {
                if out.paths.len() == cap {
                    out.truncated = true;
                    return out;
                }
                out.paths
                    .push(path.iter().map(|&i| self.ids[i as usize]).collect());
                stack.pop();
                path.pop();
                continue;
            }
            let hops = &self.routes[u as usize].as_ref().expect("on-DAG node").next_hops;
            if *pos < hops.len() {
                let v = hops[*pos];
                *pos += 1;
                stack.push((v, 0));
                path.push(v);
            } else {
                stack.pop();
                path.pop();
            }
        }
        out
    }

    /// Single path chosen by a seeded tie break: at every hop the next hop
    /// with the lowest `H(u, v)` wins.
    pub fn tie_broken_path(&self, src: AsId, seed: u64) -> Option<Vec<AsId>> {
        let mut u = self.idx(src)?;
        self.routes[u as usize].as_ref()?;
        let mut path = vec![self.ids[u as usize]];
        while u != self.dest_idx {
            let route = self.routes[u as usize].as_ref()?;
            let from = self.ids[u as usize];
            u = *route
                .next_hops
                .iter()
                .min_by_key(|&&v| tie_break_hash(seed, from, self.ids[v as usize]))?;
            path.push(self.ids[u as usize]);
        }
        Some(path)
    }
}

/// Seeded 64-bit hash of an ordered AS pair (splitmix64 finalizer).
pub fn tie_break_hash(seed: u64, from: AsId, to: AsId) -> u64 {
    let mut x = seed ^ ((u64::from(from.get()) << 32) | u64::from(to.get()));
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PathEnumeration {
    pub paths: Vec<Vec<AsId>>,
    pub truncated: bool,
}

/// Set of ASes on any policy-compliant best path between two endpoints.
/// Empty signals that the endpoints are not connected.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct PathSet(BTreeSet<AsId>);

impl PathSet {
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn contains(&self, asn: AsId) -> bool {
        self.0.contains(&asn)
    }

    pub fn iter(&self) -> impl Iterator<Item = AsId> + '_ {
        self.0.iter().copied()
    }

    pub fn union(mut self, other: PathSet) -> PathSet {
        self.0.extend(other.0);
        self
    }
}

impl FromIterator<AsId> for PathSet {
    fn from_iter<I: IntoIterator<Item = AsId>>(iter: I) -> Self {
        PathSet(iter.into_iter().collect())
    }
}

/// Computes the multipath routing tree toward `dest` in O(|V| + |E|).
pub fn compute_routing_tree(graph: &AsGraph, dest: AsId) -> Result<RoutingTree, RoutingError> {
    let d = graph.index_of(dest).ok_or(RoutingError::UnknownAs(dest))?;
    let n = graph.node_count();
    let mut routes: Vec<Option<Route>> = vec![None; n];
    routes[d as usize] = Some(Route {
        class: PrefClass::Customer,
        length: 0,
        next_hops: Vec::new(),
    });

    // Phase 1: customer routes climb from dest toward providers, level by level.
    let mut frontier = vec![d];
    let mut customer_routed = vec![d];
    while !frontier.is_empty() {
        let mut next = Vec::new();
        for &u in &frontier {
            let len = routes[u as usize].as_ref().unwrap().length + 1;
            for &p in graph.providers_of(u) {
                match &mut routes[p as usize] {
                    slot @ None => {
                        *slot = Some(Route {
                            class: PrefClass::Customer,
                            length: len,
                            next_hops: vec![u],
                        });
                        next.push(p);
                    }
                    Some(r) if r.length == len && r.class == PrefClass::Customer => {
                        r.next_hops.push(u)
                    }
                    Some(_) => {}
                }
            }
        }
        customer_routed.extend_from_slice(&next);
        frontier = next;
    }

    // Phase 2: one peer hop onto a customer route (or dest itself).
    let mut peer_routes: Vec<(NodeIdx, Route)> = Vec::new();
    for v in 0..n as NodeIdx {
        if routes[v as usize].is_some() {
            continue;
        }
        let mut best: Option<Route> = None;
        for &u in graph.peers_of(v) {
            let Some(ru) = &routes[u as usize] else { continue };
            debug_assert_eq!(ru.class, PrefClass::Customer);
            let len = ru.length + 1;
            match &mut best {
                None => {
                    best = Some(Route {
                        class: PrefClass::Peer,
                        length: len,
                        next_hops: vec![u],
                    })
                }
                Some(b) if len < b.length => {
                    b.length = len;
                    b.next_hops.clear();
                    b.next_hops.push(u);
                }
                Some(b) if len == b.length => b.next_hops.push(u),
                Some(_) => {}
            }
        }
        if let Some(route) = best {
            peer_routes.push((v, route));
        }
    }
    for (v, route) in peer_routes {
        routes[v as usize] = Some(route);
    }

    // Phase 3: provider routes flow down to customers, in order of length.
    let mut buckets: Vec<Vec<NodeIdx>> = Vec::new();
    for (u, r) in routes.iter().enumerate() {
        if let Some(r) = r {
            let l = r.length as usize;
            if buckets.len() <= l {
                buckets.resize_with(l + 1, Vec::new);
            }
            buckets[l].push(u as NodeIdx);
        }
    }
    let mut level = 0;
    while level < buckets.len() {
        let current = std::mem::take(&mut buckets[level]);
        for &u in &current {
            let len = routes[u as usize].as_ref().unwrap().length + 1;
            for &c in graph.customers_of(u) {
                match &mut routes[c as usize] {
                    slot @ None => {
                        *slot = Some(Route {
                            class: PrefClass::Provider,
                            length: len,
                            next_hops: vec![u],
                        });
                        if buckets.len() <= len as usize {
                            buckets.resize_with(len as usize + 1, Vec::new);
                        }
                        buckets[len as usize].push(c);
                    }
                    Some(r) if r.class == PrefClass::Provider && r.length == len => {
                        r.next_hops.push(u)
                    }
                    Some(_) => {}
                }
            }
        }
        level += 1;
    }

    for r in routes.iter_mut().flatten() {
        r.next_hops.sort_unstable();
        r.next_hops.dedup();
    }

    Ok(RoutingTree {
        dest,
        dest_idx: d,
        routes,
        ids: Arc::from(graph.nodes()),
    })
}

pub const DEFAULT_CACHE_CAPACITY: usize = 4096;
pub const DEFAULT_ENUMERATE_CAP: usize = 10_000;

/// Bounded LRU cache of routing trees keyed by destination.
///
/// Trees are computed outside the lock; two workers racing on the same
/// destination both compute it and the second insert wins, which is harmless
/// because trees are pure functions of (graph, dest).
pub struct TreeCache<'g> {
    graph: &'g AsGraph,
    trees: Mutex<LruCache<AsId, Arc<RoutingTree>>>,
}

impl<'g> TreeCache<'g> {
    pub fn new(graph: &'g AsGraph) -> Self {
        Self::with_capacity(graph, DEFAULT_CACHE_CAPACITY)
    }

    pub fn with_capacity(graph: &'g AsGraph, capacity: usize) -> Self {
        let capacity = NonZeroUsize::new(capacity).unwrap_or(NonZeroUsize::MIN);
        TreeCache {
            graph,
            trees: Mutex::new(LruCache::new(capacity)),
        }
    }

    pub fn graph(&self) -> &'g AsGraph {
        self.graph
    }

    pub fn tree(&self, dest: AsId) -> Result<Arc<RoutingTree>, RoutingError> {
        if let Some(tree) = self.trees.lock().get(&dest) {
            return Ok(tree.clone());
        }
        let tree = Arc::new(compute_routing_tree(self.graph, dest)?);
        self.trees.lock().put(dest, tree.clone());
        Ok(tree)
    }

    pub fn len(&self) -> usize {
        self.trees.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Union of the path sets a→b and b→a. A direction that is unreachable
/// contributes nothing; both unreachable yields an empty set.
pub fn bidirectional_path_set(
    cache: &TreeCache<'_>,
    a: AsId,
    b: AsId,
) -> Result<PathSet, RoutingError> {
    let toward_b = cache.tree(b)?;
    let toward_a = cache.tree(a)?;
    Ok(toward_b.path_set(a).union(toward_a.path_set(b)))
}

/// Concrete paths between `a` and `b` in both directions, each direction
/// capped separately. Reverse-direction paths are listed as found (b first).
pub fn bidirectional_paths(
    cache: &TreeCache<'_>,
    a: AsId,
    b: AsId,
    cap: usize,
) -> Result<PathEnumeration, RoutingError> {
    let forward = cache.tree(b)?.enumerate_paths(a, cap);
    let reverse = cache.tree(a)?.enumerate_paths(b, cap);
    let mut paths = forward.paths;
    paths.extend(reverse.paths);
    Ok(PathEnumeration {
        paths,
        truncated: forward.truncated || reverse.truncated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::load_topology;

    fn asn(v: u32) -> AsId {
        AsId::new(v).unwrap()
    }

    fn ids(v: &[u32]) -> Vec<AsId> {
        v.iter().map(|&x| asn(x)).collect()
    }

    #[test]
    fn chain() {
        let g = load_topology("1|2|-1\n2|3|-1\n".as_bytes()).unwrap();
        let t = compute_routing_tree(&g, asn(3)).unwrap();
        assert_eq!(t.class(asn(1)), Some(PrefClass::Customer));
        assert_eq!(t.length(asn(1)), Some(2));
        assert_eq!(t.next_hops(asn(1)), Some(ids(&[2])));
        assert_eq!(t.path_set(asn(1)).iter().collect::<Vec<_>>(), ids(&[1, 2, 3]));
        assert_eq!(t.path_set(asn(3)).iter().collect::<Vec<_>>(), ids(&[3]));
        let e = t.enumerate_paths(asn(1), 10);
        assert_eq!(e.paths, vec![ids(&[1, 2, 3])]);
        assert!(!e.truncated);

        // Reverse direction: 3 climbs to 2 then 1 as provider routes.
        let t1 = compute_routing_tree(&g, asn(1)).unwrap();
        assert_eq!(t1.class(asn(3)), Some(PrefClass::Provider));
        assert_eq!(t1.length(asn(3)), Some(2));
    }

    #[test]
    fn unknown_dest() {
        let g = load_topology("1|2|-1\n".as_bytes()).unwrap();
        assert_eq!(
            compute_routing_tree(&g, asn(9)).unwrap_err(),
            RoutingError::UnknownAs(asn(9))
        );
    }

    #[test]
    fn star_of_entries() {
        // A source with three directly attached entry ASes.
        let g = load_topology("10|1|-1\n10|2|-1\n10|3|-1\n".as_bytes()).unwrap();
        for e in [1, 2, 3] {
            let t = compute_routing_tree(&g, asn(e)).unwrap();
            assert_eq!(t.length(asn(10)), Some(1));
            assert_eq!(t.next_hops(asn(10)), Some(ids(&[e])));
        }
    }

    #[test]
    fn diamond_keeps_both_next_hops() {
        // 100 and 200 are providers of src 1; both are customers of 50,
        // which reaches dest 9 through 60.
        let text = "100|1|-1\n200|1|-1\n50|100|-1\n50|200|-1\n60|50|-1\n60|9|-1\n";
        let g = load_topology(text.as_bytes()).unwrap();
        let t = compute_routing_tree(&g, asn(9)).unwrap();
        assert_eq!(t.next_hops(asn(1)), Some(ids(&[100, 200])));
        assert_eq!(t.class(asn(1)), Some(PrefClass::Provider));
        assert_eq!(
            t.path_set(asn(1)).iter().collect::<Vec<_>>(),
            ids(&[1, 9, 50, 60, 100, 200])
        );
        let e = t.enumerate_paths(asn(1), 2);
        assert_eq!(
            e.paths,
            vec![ids(&[1, 100, 50, 60, 9]), ids(&[1, 200, 50, 60, 9])]
        );
        assert!(!e.truncated);
        let e = t.enumerate_paths(asn(1), 1);
        assert_eq!(e.paths.len(), 1);
        assert!(e.truncated);
    }

    #[test]
    fn customer_beats_shorter_peer() {
        // 1 reaches 9 via customer chain 1>2>3>9 (length 3) and via peer 5
        // which is a provider of 9 (length 2). Customer wins.
        let text = "1|2|-1\n2|3|-1\n3|9|-1\n1|5|0\n5|9|-1\n";
        let g = load_topology(text.as_bytes()).unwrap();
        let t = compute_routing_tree(&g, asn(9)).unwrap();
        assert_eq!(t.class(asn(1)), Some(PrefClass::Customer));
        assert_eq!(t.length(asn(1)), Some(3));
    }

    #[test]
    fn peer_routes_are_not_exported_to_peers() {
        // 1 -- 2 -- 3 peers, 3 provider of 9. 2 gets a peer route, 1 none.
        let text = "1|2|0\n2|3|0\n3|9|-1\n";
        let g = load_topology(text.as_bytes()).unwrap();
        let t = compute_routing_tree(&g, asn(9)).unwrap();
        assert_eq!(t.class(asn(2)), Some(PrefClass::Peer));
        assert!(!t.is_reachable(asn(1)));
        assert!(t.path_set(asn(1)).is_empty());
        assert!(t.enumerate_paths(asn(1), 5).paths.is_empty());
    }

    #[test]
    fn provider_routes_pick_shortest() {
        // src 1 has providers 2 (peer route length 2) and 3 (customer route length 3).
        let text = "2|1|-1\n3|1|-1\n2|4|0\n4|9|-1\n3|5|-1\n5|6|-1\n6|9|-1\n";
        let g = load_topology(text.as_bytes()).unwrap();
        let t = compute_routing_tree(&g, asn(9)).unwrap();
        assert_eq!(t.class(asn(2)), Some(PrefClass::Peer));
        assert_eq!(t.class(asn(3)), Some(PrefClass::Customer));
        assert_eq!(t.class(asn(1)), Some(PrefClass::Provider));
        assert_eq!(t.length(asn(1)), Some(3));
        assert_eq!(t.next_hops(asn(1)), Some(ids(&[2])));
    }

    #[test]
    fn bidirectional_union_and_identity() {
        let g = load_topology("1|2|-1\n2|3|-1\n".as_bytes()).unwrap();
        let cache = TreeCache::new(&g);
        let s = bidirectional_path_set(&cache, asn(1), asn(3)).unwrap();
        assert_eq!(s, cache.tree(asn(3)).unwrap().path_set(asn(1)));
        let s = bidirectional_path_set(&cache, asn(2), asn(2)).unwrap();
        assert_eq!(s.iter().collect::<Vec<_>>(), ids(&[2]));
        assert_eq!(cache.len(), 3);
    }

    #[test]
    fn tie_break_picks_one_dag_path() {
        let text = "100|1|-1\n200|1|-1\n50|100|-1\n50|200|-1\n60|50|-1\n60|9|-1\n";
        let g = load_topology(text.as_bytes()).unwrap();
        let t = compute_routing_tree(&g, asn(9)).unwrap();
        let all = t.enumerate_paths(asn(1), 10).paths;
        let mut seen = BTreeSet::new();
        for seed in 0..64 {
            let p = t.tie_broken_path(asn(1), seed).unwrap();
            assert!(all.contains(&p));
            seen.insert(p);
        }
        assert_eq!(seen.len(), 2, "randomized tie break should not always pick one side");
    }

    #[test]
    fn cache_evicts_beyond_capacity() {
        let g = load_topology("1|2|-1\n2|3|-1\n".as_bytes()).unwrap();
        let cache = TreeCache::with_capacity(&g, 2);
        for d in [1, 2, 3] {
            cache.tree(asn(d)).unwrap();
        }
        assert_eq!(cache.len(), 2);
    }
}
