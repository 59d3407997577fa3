//! Asymmetric traffic-correlation threat assessment.
//!
//! A circuit `(src, entry, exit, dst)` is vulnerable when some colluder class
//! appears on both the client leg path set `P(src <-> entry)` and the
//! destination leg path set `P(exit <-> dst)`.

use std::collections::hash_map::Entry;
use std::collections::{BTreeSet, HashMap};

use serde::Serialize;
use thiserror::Error;

use crate::routing::{bidirectional_path_set, bidirectional_paths, PathSet, RoutingError, TreeCache};
use crate::topology::{AsId, ColluderClass, CountryCode, TopologyBundle};

pub use crate::topology::AdversaryMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct CircuitSpec {
    pub src: AsId,
    pub entry: AsId,
    pub exit: AsId,
    pub dst: AsId,
}

/// Knobs for sensitivity analysis. The default applies the vulnerability
/// rule as is: every AS on either leg, endpoints included, may observe.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ThreatConfig {
    /// Drop the client and destination ASes from their leg path sets.
    pub exclude_endpoints: bool,
    /// Under state mode, only count this country as an adversary.
    pub country_filter: Option<CountryCode>,
    /// Skip grid pairs whose entry and exit sit in the same AS.
    pub exclude_same_as_pairs: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ThreatAssessment {
    pub vulnerable: bool,
    pub attackers: BTreeSet<ColluderClass>,
    pub assessable: bool,
}

impl ThreatAssessment {
    fn unassessable() -> Self {
        ThreatAssessment {
            vulnerable: false,
            attackers: BTreeSet::new(),
            assessable: false,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ThreatError {
    #[error(transparent)]
    Routing(#[from] RoutingError),
    #[error("entry and exit lists must be nonempty")]
    EmptyCandidates,
    #[error("circuit is not vulnerable")]
    NotVulnerable,
}

/// Safety of one (entry, exit) grid cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PairStatus {
    Safe,
    Vulnerable,
    Unassessable,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SafetyGrid {
    /// safe / assessable; `None` when nothing was assessable.
    pub fraction: Option<f64>,
    pub safe: usize,
    pub assessable: usize,
    /// `matrix[i][j]` is the status of `(entries[i], exits[j])`.
    pub matrix: Vec<Vec<PairStatus>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PathFraction {
    pub fraction: f64,
    pub vulnerable_pairs: usize,
    pub total_pairs: usize,
    pub truncated: bool,
}

/// Read-only view over a topology bundle and a shared routing-tree cache.
pub struct ThreatModel<'a> {
    bundle: &'a TopologyBundle,
    cache: &'a TreeCache<'a>,
    config: ThreatConfig,
}

impl<'a> ThreatModel<'a> {
    pub fn new(bundle: &'a TopologyBundle, cache: &'a TreeCache<'a>) -> Self {
        Self::with_config(bundle, cache, ThreatConfig::default())
    }

    pub fn with_config(
        bundle: &'a TopologyBundle,
        cache: &'a TreeCache<'a>,
        config: ThreatConfig,
    ) -> Self {
        ThreatModel {
            bundle,
            cache,
            config,
        }
    }

    pub fn bundle(&self) -> &'a TopologyBundle {
        self.bundle
    }

    pub fn cache(&self) -> &'a TreeCache<'a> {
        self.cache
    }

    pub fn config(&self) -> &ThreatConfig {
        &self.config
    }

    /// Path set of one leg with the configured endpoint exclusion applied.
    /// `outer` is the client or destination end.
    pub fn leg_path_set(&self, outer: AsId, relay: AsId) -> Result<PathSet, RoutingError> {
        let set = bidirectional_path_set(self.cache, outer, relay)?;
        Ok(set.iter().filter(|&a| self.observes(a, outer, relay)).collect())
    }

    /// Colluder classes present on a leg. `None` when the leg is unreachable.
    pub fn leg_classes(
        &self,
        outer: AsId,
        relay: AsId,
        mode: AdversaryMode,
    ) -> Result<Option<BTreeSet<ColluderClass>>, RoutingError> {
        let set = bidirectional_path_set(self.cache, outer, relay)?;
        if set.is_empty() {
            return Ok(None);
        }
        Ok(Some(self.classes_of(
            set.iter().filter(|&a| self.observes(a, outer, relay)),
            mode,
        )))
    }

    fn observes(&self, asn: AsId, outer: AsId, relay: AsId) -> bool {
        !(self.config.exclude_endpoints && asn == outer && asn != relay)
    }

    fn classes_of(
        &self,
        ases: impl Iterator<Item = AsId>,
        mode: AdversaryMode,
    ) -> BTreeSet<ColluderClass> {
        ases.map(|a| self.bundle.class_of(a, mode))
            .filter(|class| match (mode, self.config.country_filter, class) {
                (AdversaryMode::State, Some(only), ColluderClass::Country(cc)) => *cc == only,
                (AdversaryMode::State, Some(_), _) => false,
                _ => true,
            })
            .collect()
    }

    /// Assessment from the colluder classes of both legs; `None` marks an
    /// unreachable leg.
    pub fn combine_legs(
        client_leg: Option<&BTreeSet<ColluderClass>>,
        dest_leg: Option<&BTreeSet<ColluderClass>>,
    ) -> ThreatAssessment {
        match (client_leg, dest_leg) {
            (Some(a), Some(b)) => {
                let attackers: BTreeSet<ColluderClass> = a.intersection(b).cloned().collect();
                ThreatAssessment {
                    vulnerable: !attackers.is_empty(),
                    attackers,
                    assessable: true,
                }
            }
            _ => ThreatAssessment::unassessable(),
        }
    }

    pub fn assess(
        &self,
        circuit: &CircuitSpec,
        mode: AdversaryMode,
    ) -> Result<ThreatAssessment, ThreatError> {
        let client_leg = self.leg_classes(circuit.src, circuit.entry, mode)?;
        let dest_leg = self.leg_classes(circuit.dst, circuit.exit, mode)?;
        Ok(Self::combine_legs(client_leg.as_ref(), dest_leg.as_ref()))
    }

    /// Assesses the full `entries x exits` grid for one (src, dst) pair.
    /// Leg path sets are computed once per distinct AS.
    pub fn attacker_free_fraction(
        &self,
        src: AsId,
        dst: AsId,
        entries: &[AsId],
        exits: &[AsId],
        mode: AdversaryMode,
    ) -> Result<SafetyGrid, ThreatError> {
        if entries.is_empty() || exits.is_empty() {
            return Err(ThreatError::EmptyCandidates);
        }
        let mut client_legs = HashMap::new();
        for &e in entries {
            if let Entry::Vacant(slot) = client_legs.entry(e) {
                slot.insert(self.leg_classes(src, e, mode)?);
            }
        }
        let mut dest_legs = HashMap::new();
        for &x in exits {
            if let Entry::Vacant(slot) = dest_legs.entry(x) {
                slot.insert(self.leg_classes(dst, x, mode)?);
            }
        }
        let mut memo: HashMap<(AsId, AsId), PairStatus> = HashMap::new();
        let mut safe = 0;
        let mut assessable = 0;
        let mut matrix = Vec::with_capacity(entries.len());
        for &e in entries {
            let mut row = Vec::with_capacity(exits.len());
            for &x in exits {
                let status = if self.config.exclude_same_as_pairs && e == x {
                    PairStatus::Skipped
                } else {
                    *memo.entry((e, x)).or_insert_with(|| {
                        let a = Self::combine_legs(client_legs[&e].as_ref(), dest_legs[&x].as_ref());
                        if !a.assessable {
                            PairStatus::Unassessable
                        } else if a.vulnerable {
                            PairStatus::Vulnerable
                        } else {
                            PairStatus::Safe
                        }
                    })
                };
                match status {
                    PairStatus::Safe => {
                        safe += 1;
                        assessable += 1;
                    }
                    PairStatus::Vulnerable => assessable += 1,
                    _ => {}
                }
                row.push(status);
            }
            matrix.push(row);
        }
        Ok(SafetyGrid {
            fraction: (assessable > 0).then(|| safe as f64 / assessable as f64),
            safe,
            assessable,
            matrix,
        })
    }

    /// Fraction of concrete (client-leg path, destination-leg path) pairs
    /// that share a colluder class, for a circuit already judged vulnerable.
    pub fn vulnerable_path_fraction(
        &self,
        circuit: &CircuitSpec,
        mode: AdversaryMode,
        cap: usize,
    ) -> Result<PathFraction, ThreatError> {
        if !self.assess(circuit, mode)?.vulnerable {
            return Err(ThreatError::NotVulnerable);
        }
        let client_paths = bidirectional_paths(self.cache, circuit.src, circuit.entry, cap)?;
        let dest_paths = bidirectional_paths(self.cache, circuit.dst, circuit.exit, cap)?;
        let to_classes = |paths: &[Vec<AsId>], outer: AsId, relay: AsId| -> Vec<BTreeSet<ColluderClass>> {
            paths
                .iter()
                .map(|p| {
                    self.classes_of(
                        p.iter().copied().filter(|&a| self.observes(a, outer, relay)),
                        mode,
                    )
                })
                .collect()
        };
        let client = to_classes(&client_paths.paths, circuit.src, circuit.entry);
        let dest = to_classes(&dest_paths.paths, circuit.dst, circuit.exit);
        let total = client.len() * dest.len();
        let vulnerable = client
            .iter()
            .map(|a| dest.iter().filter(|b| !a.is_disjoint(b)).count())
            .sum::<usize>();
        Ok(PathFraction {
            fraction: vulnerable as f64 / total as f64,
            vulnerable_pairs: vulnerable,
            total_pairs: total,
            truncated: client_paths.truncated || dest_paths.truncated,
        })
    }
}
