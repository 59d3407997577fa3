mod common;

use std::fs::File;
use std::io::BufReader;

use astoria::harness::*;
use astoria::selection::{Provenance, SelectorKind};
use astoria::threat::ThreatConfig;
use astoria::topology::{AsGraph, RelKind};
use astoria::{AdversaryMode, TopologyBundle};
use common::*;

struct Inputs {
    bundle: TopologyBundle,
    consensus: astoria::selection::Consensus,
    sites: Vec<Site>,
    clients: Vec<ClientSpec>,
}

fn inputs(dir: &str) -> Inputs {
    Inputs {
        bundle: load_fixture_bundle(dir),
        consensus: load_fixture_consensus(dir),
        sites: load_traces(File::open(fixture(dir).join("traces.csv")).unwrap()).unwrap(),
        clients: load_clients(BufReader::new(File::open(fixture(dir).join("clients.csv")).unwrap()))
            .unwrap(),
    }
}

fn live(dir: &str, selector: SelectorKind, seed: u64, workers: Option<usize>) -> LiveReport {
    let i = inputs(dir);
    let mut config = ExperimentConfig::new(ExperimentKind::E1);
    config.selector = selector;
    config.seed = seed;
    config.workers = workers;
    run_live_style(&config, &i.bundle, &i.consensus, &i.sites, &i.clients).unwrap()
}

fn enumeration(dir: &str, kind: ExperimentKind) -> EnumerationReport {
    let i = inputs(dir);
    let config = ExperimentConfig::new(kind);
    run_enumeration_style(&config, &i.bundle, &i.consensus, &i.sites, &i.clients).unwrap()
}

#[test]
fn bottleneck_is_always_vulnerable() {
    for selector in [SelectorKind::Vanilla, SelectorKind::Astoria, SelectorKind::Uniform] {
        let r = live("bottleneck", selector, 1, None);
        assert_eq!(r.overall.circuits_vulnerable, Some(1.0), "{selector}");
        assert_eq!(r.overall.websites_main_vulnerable, Some(1.0));
        assert_eq!(r.overall.websites_any_vulnerable, Some(1.0));
    }
    let r = live("bottleneck", SelectorKind::Astoria, 1, None);
    assert!(r.circuits.iter().all(|c| c.provenance == Provenance::Lp));
    assert!(r.circuits.iter().all(|c| c.attackers.contains(&"AS50".to_string())));
}

#[test]
fn disjoint_fixture_is_always_safe() {
    for selector in [SelectorKind::Vanilla, SelectorKind::Astoria] {
        let r = live("disjoint", selector, 1, None);
        assert_eq!(r.overall.circuits_vulnerable, Some(0.0));
        assert_eq!(r.overall.websites_main_vulnerable, Some(0.0));
        assert_eq!(r.overall.websites_any_vulnerable, Some(0.0));
    }
}

#[test]
fn enumeration_point_masses() {
    let safe = enumeration("disjoint", ExperimentKind::E2);
    assert_eq!(safe.overall.cdf, vec![CdfPoint { value: 1.0, cumulative: 1.0 }]);
    assert_eq!(safe.overall.five_percent, Some(0.0));
    let doomed = enumeration("bottleneck", ExperimentKind::E2);
    assert_eq!(doomed.overall.cdf, vec![CdfPoint { value: 0.0, cumulative: 1.0 }]);
    assert_eq!(doomed.overall.five_percent, Some(1.0));
    assert_eq!(doomed.overall.no_safe, Some(1.0));
}

#[test]
fn astoria_avoids_vulnerable_circuits_on_fixture() {
    let astoria = live("as30", SelectorKind::Astoria, 5, None);
    assert_eq!(astoria.overall.circuits_vulnerable, Some(0.0));
    assert_eq!(astoria.overall.websites_any_vulnerable, Some(0.0));
    let vanilla = live("as30", SelectorKind::Vanilla, 5, None);
    assert!(vanilla.overall.circuits_vulnerable.unwrap() > 0.0);
}

#[test]
fn fractions_are_bounded_and_cdf_monotone() {
    let r = live("as30", SelectorKind::Vanilla, 9, None);
    let m = &r.overall;
    for f in [m.circuits_vulnerable, m.websites_any_vulnerable, m.websites_main_vulnerable] {
        assert!((0.0..=1.0).contains(&f.unwrap()));
    }
    assert!(m.websites_main_vulnerable <= m.websites_any_vulnerable);
    let e = enumeration("as30", ExperimentKind::E2);
    for w in e.overall.cdf.windows(2) {
        assert!(w[0].value < w[1].value && w[0].cumulative <= w[1].cumulative);
    }
    assert_eq!(e.overall.cdf.last().unwrap().cumulative, 1.0);
}

#[test]
fn worker_count_does_not_change_results() {
    let one = live("as30", SelectorKind::Vanilla, 3, Some(1));
    let four = live("as30", SelectorKind::Vanilla, 3, Some(4));
    assert_eq!(one, four);
    assert_eq!(one.circuits, four.circuits);
    let other_seed = live("as30", SelectorKind::Vanilla, 4, Some(1));
    assert_ne!(one.circuits, other_seed.circuits);
}

#[test]
fn guard_set_size_ordering() {
    let r = enumeration("guards", ExperimentKind::E5);
    let means: Vec<f64> = r.guard_sizes.iter().map(|g| g.summary.mean.unwrap()).collect();
    assert_eq!(means.len(), 3);
    assert!(means[0] <= means[1] && means[1] <= means[2], "{means:?}");
    assert!((means[2] - 2.0 / 3.0).abs() < 1e-12);
}

#[test]
fn load_balance_shares_sum_to_one() {
    let r = live("as30", SelectorKind::Vanilla, 2, None);
    let lb = r.load_balance.unwrap();
    let emp: f64 = lb.relays.iter().map(|x| x.empirical).sum();
    let perfect: f64 = lb.relays.iter().map(|x| x.perfect).sum();
    assert!((emp - 1.0).abs() < 1e-9 && (perfect - 1.0).abs() < 1e-9);
    let dec: f64 = lb.deciles.iter().map(|d| d.empirical).sum();
    assert!((dec - 1.0).abs() < 1e-9);
    assert!((0.0..=1.0).contains(&lb.total_variation));
}

#[test]
fn unknown_destination_is_rejected() {
    let i = inputs("as30");
    let sites = load_traces("site,dst_asn,is_main\nx,999,1\n".as_bytes()).unwrap();
    let config = ExperimentConfig::new(ExperimentKind::E1);
    let err = run_live_style(&config, &i.bundle, &i.consensus, &sites, &i.clients).unwrap_err();
    assert!(matches!(err, HarnessError::UnknownAs(a) if a == asn(999)));
    let e2 = ExperimentConfig::new(ExperimentKind::E2);
    assert!(matches!(
        run_live_style(&e2, &i.bundle, &i.consensus, &i.sites, &i.clients),
        Err(HarnessError::Config(_))
    ));
}

fn row(src: u32, entry: u32, exit: u32, dst: u32, vulnerable: bool) -> CircuitLogRow {
    CircuitLogRow {
        client_asn: asn(src),
        site: "s".into(),
        dst_asn: asn(dst),
        entry_fp: "E".into(),
        middle_fp: "M".into(),
        exit_fp: "X".into(),
        entry_asn: asn(entry),
        exit_asn: asn(exit),
        provenance: Provenance::Vanilla,
        vulnerable: Some(vulnerable),
        attackers: Vec::new(),
    }
}

#[test]
fn tightness_estimates() {
    let empty = estimate_tightness(
        &[],
        &load_fixture_bundle("bottleneck"),
        &ThreatConfig::default(),
        AdversaryMode::SingleAs,
        100,
    )
    .unwrap();
    assert!(empty.cdf.is_empty() && empty.fractions.is_empty());

    let all = estimate_tightness(
        &[row(100, 201, 301, 401, true), row(100, 202, 302, 401, true)],
        &load_fixture_bundle("bottleneck"),
        &ThreatConfig::default(),
        AdversaryMode::SingleAs,
        100,
    )
    .unwrap();
    assert_eq!(all.fractions, vec![1.0, 1.0]);

    // Client reaches its guard through AS10 or AS11; the destination leg
    // only through AS10, so half of the client-leg paths are exposed.
    let diamond = AsGraph::from_edges(
        [(10, 100), (11, 100), (10, 201), (11, 201), (10, 301), (10, 401), (1, 10), (1, 11)]
            .map(|(p, c)| (asn(p), asn(c), RelKind::ProviderCustomer)),
    )
    .unwrap();
    let half = estimate_tightness(
        &[row(100, 201, 301, 401, true), row(100, 201, 301, 401, false)],
        &TopologyBundle::new(diamond),
        &ThreatConfig::default(),
        AdversaryMode::SingleAs,
        100,
    )
    .unwrap();
    assert_eq!(half.fractions, vec![0.5]);
}

#[test]
fn circuit_log_layout() {
    let r = live("bottleneck", SelectorKind::Vanilla, 1, None);
    let mut buf = Vec::new();
    write_circuit_log(&r.circuits, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "client_asn,site,dst_asn,entry_fp,middle_fp,exit_fp,provenance,vulnerable,attackers"
    );
    let first: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(first[0], "100");
    assert_eq!(first[6], "vanilla");
    assert_eq!(first[7], "true");
    assert!(first[8].split(';').any(|a| a == "AS50"));
}
