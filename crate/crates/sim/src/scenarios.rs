//! Canned experiments. Each builds a network, runs it under one scenario
//! and reports what the harness measured.

use serde::Serialize;
use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use aot_core::analysis::receiver_anonymity_bound;
use aot_core::faults::FaultKind;
use aot_core::params::{Level, NetworkParams, HOUR_MS, MINUTE_MS, SECOND_MS};
use aot_core::protocol::envelope::open_payload;
use aot_core::protocol::NodeId;

use crate::adversary::{Action, Scenario, TimedAction};
use crate::frame::FrameKind;
use crate::metrics::Summary;
use crate::world::{Sim, SimConfig, SimError};

/// Scenario files shipped with the crate, by name.
pub const BUILTIN: &[(&str, &str)] = &[
    ("blending", include_str!("../../../scenarios/blending.toml")),
    ("replay", include_str!("../../../scenarios/replay.toml")),
    ("resend", include_str!("../../../scenarios/resend.toml")),
    (
        "tamper-l2",
        include_str!("../../../scenarios/tamper-l2.toml"),
    ),
    ("failover", include_str!("../../../scenarios/failover.toml")),
    (
        "offline-l1",
        include_str!("../../../scenarios/offline-l1.toml"),
    ),
    (
        "sender-input-error",
        include_str!("../../../scenarios/sender-input-error.toml"),
    ),
    (
        "partition",
        include_str!("../../../scenarios/partition.toml"),
    ),
];

pub fn builtin(name: &str) -> Option<Scenario> {
    BUILTIN
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| Scenario::from_toml(text).expect("shipped scenarios parse"))
}

#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub scenario: String,
    pub wall_ms: u128,
    pub summary: Summary,
}

/// Runs `cfg` under `scenario` until the measured messages resolve.
pub fn run(cfg: SimConfig, scenario: Scenario) -> Result<(Sim, RunReport), SimError> {
    let name = scenario.name.clone();
    let start = Instant::now();
    let mut sim = Sim::new(cfg, scenario)?;
    sim.run();
    let report = RunReport {
        scenario: name,
        wall_ms: start.elapsed().as_millis(),
        summary: sim.summary(),
    };
    Ok((sim, report))
}

#[derive(Clone, Debug, Serialize)]
pub struct BlendingReport {
    pub dummy_requests: bool,
    pub target_published: bool,
    pub target_node: Option<u16>,
    pub published_at_ms: Option<u64>,
    pub window_ms: u64,
    pub receiver: u32,
    pub receiver_in_set: bool,
    /// Distinct honest clients that opened an OT session with the target's
    /// node while the target was on its board.
    pub set: Vec<u32>,
    /// OT sessions those clients opened there in the same window.
    pub requests: usize,
    /// `HU/(T2·Q3)`.
    pub formula: f64,
    /// The same count for request gaps uniform on `[1 s, T2]`.
    pub formula_uniform: f64,
    pub delivered: bool,
    pub wall_ms: u128,
}

pub const BLENDING_HONEST: u32 = 200;

/// Parameters of the blending experiment: 200 honest clients, τ = 60 s,
/// T2 = 20 min and a one-hour board lifetime.
pub fn blending_config(seed: u64, dummies: bool) -> SimConfig {
    let params = NetworkParams {
        tau_ms: 60 * SECOND_MS,
        gamma: 64,
        zeta: 64,
        t2_ms: 20 * MINUTE_MS,
        h_ms: HOUR_MS,
        users: BLENDING_HONEST as usize,
        ..SimConfig::default().params
    };
    SimConfig {
        params,
        clients: BLENDING_HONEST as usize + 10,
        messages: 0,
        background: false,
        seed,
        dummy_requests: dummies,
        self_verify: dummies,
        // nothing but the target gets through, so acks never arrive
        ack_timeout_ms: Some(4 * HOUR_MS),
        max_time_ms: 3 * HOUR_MS,
        ..SimConfig::default()
    }
}

/// Client 0 sends one message to client 1 while the adversary drops every
/// other honest submission and floods the network with its own traffic.
/// The observed set is every honest client that retrieved from the
/// target's node while the target was listed.
pub fn blending(seed: u64, dummies: bool) -> Result<BlendingReport, SimError> {
    let start = Instant::now();
    let cfg = blending_config(seed, dummies);
    let bound = receiver_anonymity_bound(&cfg.params);
    let h = cfg.params.h_ms;
    let mut sim = Sim::new(cfg, builtin("blending").expect("shipped"))?;
    let (sender, receiver) = (0, 1);
    sim.run_until(5 * MINUTE_MS);
    let msg_id = sim
        .send_message(sender, receiver, true)
        .map_err(|e| SimError::Setup(e.to_string()))?;
    let tag = sim.tags_of(sender, msg_id)[0];
    let deadline = sim.now() + 30 * MINUTE_MS;
    while sim.published(&tag).is_none() && sim.now() < deadline {
        let t = sim.now() + 10 * SECOND_MS;
        sim.run_until(t);
    }
    let published = sim.published(&tag);
    let (set, requests) = match published {
        Some((node, at)) => {
            sim.run_until(at + h);
            let set = sim.adversary().requesters(node, at, at + h);
            let requests = sim
                .adversary()
                .observations
                .iter()
                .filter(|o| o.kind == FrameKind::OtOpen)
                .filter(|o| o.to == crate::frame::Endpoint::Node(node))
                .filter(|o| (at..=at + h).contains(&o.at_ms))
                .filter(|o| matches!(o.from, crate::frame::Endpoint::Client(c) if !sim.adversary().controls(c)))
                .count();
            (set, requests)
        }
        None => (BTreeSet::new(), 0),
    };
    Ok(BlendingReport {
        dummy_requests: dummies,
        target_published: published.is_some(),
        target_node: published.map(|(n, _)| n.0),
        published_at_ms: published.map(|(_, t)| t),
        window_ms: h,
        receiver,
        receiver_in_set: set.contains(&receiver),
        set: set.into_iter().collect(),
        requests,
        formula: bound.dummy_requests,
        formula_uniform: bound.dummy_requests_uniform,
        delivered: sim.metrics.measured_delivered == 1,
        wall_ms: start.elapsed().as_millis(),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct ReplayReport {
    pub injected: u64,
    pub dropped_as_replay: u64,
    pub dropped_other: u64,
    pub accepted: u64,
    /// Injected envelopes still inside Level 1 when the run ended.
    pub pending: u64,
    pub captured_tags: usize,
    /// Captured tags that appeared on a board more than once.
    pub posted_twice: usize,
    pub measured_delivered: u64,
    pub measured_sent: u64,
    pub wall_ms: u128,
}

/// Honest traffic while the adversary re-submits 1000 captured envelopes
/// within the replay window.
pub fn replay(seed: u64) -> Result<ReplayReport, SimError> {
    let start = Instant::now();
    let mut cfg = SimConfig {
        seed,
        settle_ms: 12 * MINUTE_MS,
        ..SimConfig::default()
    };
    cfg.params.zeta = 64;
    cfg.params.gamma = 64;
    let mut sim = Sim::new(cfg, builtin("replay").expect("shipped"))?;
    sim.run();
    let o = sim.replay_outcomes.clone();
    let injected = sim.metrics.replays_injected;
    let tags = sim.replayed_tags();
    let posted_twice = tags
        .iter()
        .filter(|t| sim.metrics.postings.get(*t).copied().unwrap_or(0) > 1)
        .count();
    Ok(ReplayReport {
        injected,
        dropped_as_replay: o.dropped_as_replay,
        dropped_other: o.dropped_other,
        accepted: o.accepted,
        pending: injected.saturating_sub(o.dropped_as_replay + o.dropped_other + o.accepted),
        captured_tags: tags.len(),
        posted_twice,
        measured_delivered: sim.metrics.measured_delivered,
        measured_sent: sim.metrics.measured_sent,
        wall_ms: start.elapsed().as_millis(),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct ResendReport {
    pub link_drops: u64,
    /// Attempts after the first whose envelope reached Level 1.
    pub resends: usize,
    pub resends_published: usize,
    pub replay_drops: u64,
    /// Messages abandoned after the last attempt. Losing several messages
    /// of one pair in a row moves the sender's counter beyond the
    /// receiver's search window.
    pub measured_gave_up: u64,
    pub measured_delivered: u64,
    pub measured_sent: u64,
    pub wall_ms: u128,
}

/// Lossy submission links for two minutes force resends, which carry the
/// same payload under a fresh tag and timestamp.
pub fn resend(seed: u64) -> Result<ResendReport, SimError> {
    let start = Instant::now();
    let cfg = SimConfig {
        seed,
        settle_ms: 2 * MINUTE_MS,
        ..SimConfig::default()
    };
    let mut sim = Sim::new(cfg, builtin("resend").expect("shipped"))?;
    sim.run();
    let mut resends = 0;
    let mut published = 0;
    for (_, tags) in sim.sent_tags() {
        for t in tags.iter().skip(1).filter(|t| sim.reached_l1(t)) {
            resends += 1;
            if sim.published(t).is_some() {
                published += 1;
            }
        }
    }
    Ok(ResendReport {
        link_drops: sim.adversary().dropped,
        resends,
        resends_published: published,
        replay_drops: sim.metrics.l2_drops.get("replay").copied().unwrap_or(0),
        measured_gave_up: sim.metrics.measured_gave_up,
        measured_delivered: sim.metrics.measured_delivered,
        measured_sent: sim.metrics.measured_sent,
        wall_ms: start.elapsed().as_millis(),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct TamperReport {
    pub node: u16,
    pub kind: FaultKind,
    /// Deviations applied to client messages.
    pub faults: usize,
    /// Those for which an audit about the same message blamed the node.
    pub attributed: usize,
    pub audits: usize,
    pub verdicts: BTreeMap<String, u64>,
    /// Audits that blamed a node that was never corrupted.
    pub honest_blamed: usize,
    pub wall_ms: u128,
}

/// How long the tampering node deviates, and how long the run goes on
/// afterwards so that every deviation is noticed and audited.
pub const TAMPER_ACTIVE_MS: u64 = 300 * SECOND_MS;
pub const TAMPER_TAIL_MS: u64 = 300 * SECOND_MS;

/// The first node of `level` applies `kind` to each real message with
/// probability `p`; clients verify their own postings.
pub fn tamper(seed: u64, level: Level, kind: FaultKind, p: f64) -> Result<TamperReport, SimError> {
    let start = Instant::now();
    let mut cfg = SimConfig {
        seed,
        messages: 0,
        background: true,
        verify_on_post: true,
        ..SimConfig::default()
    };
    cfg.params.zeta = 64;
    cfg.params.gamma = 64;
    let (topology, _) = aot_core::params::Topology::generate(&cfg.params, seed);
    let node = match level {
        Level::L1 => topology.l1[0].id,
        Level::L2 => topology.l2[0].id,
        Level::L3 => topology.l3[0].id,
    };
    let scenario = Scenario {
        name: format!("tamper-{level:?}-{kind:?}").to_lowercase(),
        description: String::new(),
        actions: vec![TimedAction {
            at_ms: 0,
            until_ms: Some(TAMPER_ACTIVE_MS),
            action: Action::Corrupt {
                nodes: vec![node.0],
                kinds: vec![kind],
                probability: p,
            },
        }],
    };
    let mut sim = Sim::new(cfg, scenario)?;
    sim.run_until(TAMPER_ACTIVE_MS + TAMPER_TAIL_MS);
    Ok(tamper_report(&sim, node, kind, start.elapsed()))
}

fn tamper_report(sim: &Sim, node: NodeId, kind: FaultKind, wall: Duration) -> TamperReport {
    let m = &sim.metrics;
    let faults: Vec<_> = m.faults.iter().filter(|f| f.client_message).collect();
    let blamed: BTreeSet<[u8; 32]> = m
        .audits
        .iter()
        .filter(|a| a.blamed == Some(node.0))
        .filter_map(|a| a.subject)
        .collect();
    let attributed = faults.iter().filter(|f| blamed.contains(&f.tag)).count();
    let mut verdicts = BTreeMap::new();
    for a in &m.audits {
        *verdicts.entry(a.verdict.clone()).or_insert(0) += 1;
    }
    TamperReport {
        node: node.0,
        kind,
        faults: faults.len(),
        attributed,
        audits: m.audits.len(),
        verdicts,
        honest_blamed: m
            .audits
            .iter()
            .filter(|a| a.blamed.is_some_and(|b| b != node.0))
            .count(),
        wall_ms: wall.as_millis(),
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct HandshakeReport {
    pub pairs: usize,
    pub completed: usize,
    /// Responders that accepted a handshake from the right initiator.
    pub accepted: usize,
    /// Handshake blobs found in Level-3 repositories.
    pub blobs: usize,
    /// Blobs exactly one client could open, namely the other party of a
    /// handshake pair.
    pub blobs_opened_by_addressee_only: usize,
    /// Frame kinds whose sizes differ between retrieval purposes.
    pub shape_mismatches: Vec<String>,
    pub purposes: Vec<String>,
    pub wall_ms: u128,
}

/// 50 pairs without a shared secret run the in-band handshake at once.
pub fn handshake(seed: u64) -> Result<HandshakeReport, SimError> {
    let start = Instant::now();
    let pairs = 50u32;
    let cfg = SimConfig {
        seed,
        clients: 2 * pairs as usize,
        messages: 0,
        background: true,
        ..SimConfig::default()
    };
    let mut sim = Sim::new(cfg, Scenario::honest())?;
    sim.run_until(SECOND_MS);
    for i in 0..pairs {
        sim.start_handshake(i, i + pairs)
            .map_err(|e| SimError::Setup(e.to_string()))?;
    }
    let completed = |sim: &Sim| {
        sim.handshake_events
            .iter()
            .filter(|(c, p, s)| *s == "completed" && *c < pairs && *p == Some(c + pairs))
            .count()
    };
    let deadline = 30 * MINUTE_MS;
    while completed(&sim) < pairs as usize && sim.now() < deadline {
        let t = sim.now() + 10 * SECOND_MS;
        sim.run_until(t);
    }
    let accepted = sim
        .handshake_events
        .iter()
        .filter(|(c, p, s)| *s == "accepted" && *c >= pairs && *p == Some(c - pairs))
        .count();

    let hs = sim.handshake_tag();
    let linked = |a: u32, b: u32| a.abs_diff(b) == pairs;
    let mut blobs = 0;
    let mut good = 0;
    for l3 in sim.topology().l3_ids() {
        let node = sim.level3(l3).expect("listed");
        for e in node.repository().filter(|e| e.tag == hs) {
            blobs += 1;
            let openers: Vec<(u32, Option<u32>)> = sim
                .client_keys()
                .iter()
                .enumerate()
                .filter_map(|(i, kp)| {
                    open_payload(kp, &e.blob.m)
                        .ok()
                        .map(|(from, _)| (i as u32, sim.client_of(&from)))
                })
                .collect();
            if let [(to, Some(from))] = openers[..] {
                if linked(to, from) {
                    good += 1;
                }
            }
        }
    }

    let mut by_kind: BTreeMap<FrameKind, BTreeMap<&str, &BTreeSet<usize>>> = BTreeMap::new();
    for ((purpose, kind), sizes) in &sim.transcript_shapes {
        by_kind.entry(*kind).or_default().insert(purpose, sizes);
    }
    let purposes: BTreeSet<String> = sim
        .transcript_shapes
        .keys()
        .map(|(p, _)| p.clone())
        .collect();
    let shape_mismatches = by_kind
        .iter()
        .filter(|(_, m)| {
            m.len() != purposes.len()
                || m.values().any(|s| s.len() != 1)
                || m.values().collect::<BTreeSet<_>>().len() != 1
        })
        .map(|(k, m)| format!("{k:?}: {m:?}"))
        .collect();
    Ok(HandshakeReport {
        pairs: pairs as usize,
        completed: completed(&sim),
        accepted,
        blobs,
        blobs_opened_by_addressee_only: good,
        shape_mismatches,
        purposes: purposes.into_iter().collect(),
        wall_ms: start.elapsed().as_millis(),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct DeterminismReport {
    pub digests: [String; 2],
    pub lines: [usize; 2],
    pub identical: bool,
}

/// Two runs from the same seed.
pub fn determinism(cfg: SimConfig) -> Result<DeterminismReport, SimError> {
    let once = |cfg: SimConfig| -> Result<(String, Vec<String>), SimError> {
        let mut sim = Sim::new(
            SimConfig {
                keep_log: true,
                ..cfg
            },
            Scenario::honest(),
        )?;
        sim.run();
        let log = sim.event_log();
        Ok((crate::metrics::hex(&log.digest()), log.lines().to_vec()))
    };
    let (d1, l1) = once(cfg.clone())?;
    let (d2, l2) = once(cfg)?;
    Ok(DeterminismReport {
        identical: d1 == d2 && l1 == l2,
        lines: [l1.len(), l2.len()],
        digests: [d1, d2],
    })
}
