//! Small whole-network runs under the shipped scenarios, plus scenario
//! validation.

use aot_core::params::NetworkParams;
use aot_core::Topology;
use aot_sim::adversary::{Scenario, ScenarioError};
use aot_sim::scenarios::{self, BUILTIN};
use aot_sim::world::{Sim, SimConfig, TransportKind};

fn small(seed: u64) -> SimConfig {
    SimConfig {
        messages: 120,
        seed,
        ..SimConfig::default()
    }
}

fn run(cfg: SimConfig, name: &str) -> Sim {
    let scenario = scenarios::builtin(name).unwrap_or_else(Scenario::honest);
    scenarios::run(cfg, scenario).expect("valid setup").0
}

/// Every measured message arrives and nothing is misdelivered. Resends
/// may still surface as duplicates, which the receiver recognizes.
fn assert_clean(sim: &Sim) {
    let s = sim.summary();
    assert_eq!(s.measured_delivered, s.measured_sent, "{s:?}");
    assert_eq!(s.cross_deliveries, 0);
    assert!(
        sim.conservation().iter().all(|l| l.starts_with("ok")),
        "{:?}",
        sim.conservation()
    );
}

#[test]
fn honest_run_delivers_everything() {
    let sim = run(small(1), "honest");
    assert_clean(&sim);
    let s = sim.summary();
    assert_eq!(s.measured_sent, 120);
    assert_eq!(s.duplicate_deliveries, 0);
    assert!(s.dwell_ms.max < sim.config().params.tau_ms as f64);
    assert_eq!(s.verdicts.len(), 0);
}

#[test]
fn same_seed_same_log() {
    let r = scenarios::determinism(SimConfig {
        messages: 60,
        seed: 5,
        ..SimConfig::default()
    })
    .unwrap();
    assert!(r.identical, "{r:?}");
    assert!(r.lines[0] > 0);
}

/// One message a second, so the outages below fall inside the traffic.
fn slow(seed: u64) -> SimConfig {
    SimConfig {
        send_rate_per_s: 1.0,
        ..small(seed)
    }
}

#[test]
fn level3_crash_fails_over() {
    let sim = run(slow(2), "failover");
    assert_clean(&sim);
    assert!(sim.summary().failovers > 0);
}

#[test]
fn level1_outage_is_routed_around() {
    let sim = run(slow(3), "offline-l1");
    assert_clean(&sim);
    assert!(sim
        .summary()
        .resends
        .get("Transport")
        .is_some_and(|&n| n > 0));
}

#[test]
fn garbage_from_controlled_clients_is_their_fault() {
    let sim = run(small(4), "sender-input-error");
    assert_clean(&sim);
    let audits = &sim.metrics.audits;
    assert!(!audits.is_empty());
    for a in audits {
        assert_eq!(a.verdict, "sender_input_error", "{a:?}");
        assert_eq!(a.blamed, None);
    }
}

#[test]
fn tcp_transport_matches_in_process() {
    let cfg = SimConfig {
        messages: 40,
        ..small(6)
    };
    let tcp = run(
        SimConfig {
            transport: TransportKind::Tcp,
            ..cfg.clone()
        },
        "honest",
    );
    assert_eq!(tcp.transport_name(), "tcp");
    assert_clean(&tcp);
    let local = run(cfg, "honest");
    assert_eq!(
        tcp.summary().measured_delivered,
        local.summary().measured_delivered
    );
}

#[test]
fn builtin_scenarios_parse_and_validate() {
    let (topo, _) = Topology::generate(&NetworkParams::default(), 1);
    assert!(BUILTIN.len() >= 8);
    for (name, text) in BUILTIN {
        let s = Scenario::from_toml(text).unwrap();
        assert_eq!(s.name, *name);
        s.validate(210, &topo).unwrap();
    }
}

#[test]
fn invalid_scenarios_are_rejected() {
    let (topo, _) = Topology::generate(&NetworkParams::default(), 1);
    let check = |text: &str| Scenario::from_toml(text).and_then(|s| s.validate(10, &topo));
    assert!(matches!(
        check("[[action]]\ndo = \"no_such_thing\""),
        Err(ScenarioError::Parse(_))
    ));
    assert!(matches!(
        check("[[action]]\ndo = \"offline\"\nnodes = [77]"),
        Err(ScenarioError::UnknownNode(77))
    ));
    assert!(matches!(
        check("[[action]]\ndo = \"control_clients\"\nclients = [12]"),
        Err(ScenarioError::UnknownClient(12))
    ));
    let all: Vec<String> = (0..10).map(|c| c.to_string()).collect();
    assert!(matches!(
        check(&format!(
            "[[action]]\ndo = \"control_clients\"\nclients = [{}]",
            all.join(",")
        )),
        Err(ScenarioError::AllClients(10))
    ));
    let corrupt =
        "[[action]]\ndo = \"corrupt\"\nnodes = [3]\nkinds = [\"alter_tag\"]\nprobability = 1.5";
    assert!(matches!(check(corrupt), Err(ScenarioError::Probability(_))));
    // a scenario that fails validation stops the run before it starts
    let bad = Scenario::from_toml("[[action]]\ndo = \"offline\"\nnodes = [77]").unwrap();
    assert!(Sim::new(small(1), bad).is_err());
}
