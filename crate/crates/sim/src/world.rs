//! The simulated network: nodes, clients, links, adversary and auditor
//! driven by one deterministic event queue.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Exp};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet};

use aot_core::audit::{
    AuditDirectory, Auditor, Evidence, L1HopRecord, L2HopRecord, L3HopRecord, Verdict,
};
use aot_core::client::{Client, ClientAction, ClientConfig, ClientEvent, ACK_FLAG};
use aot_core::crypto::sealed::random_box;
use aot_core::crypto::{keygen, ot_decrypt_with_key, GroupElement, KeyPair, Tag};
use aot_core::division::{combine_division, DivisionContribution};
use aot_core::faults::{FaultKind, FaultPlan};
use aot_core::level1::{Flush, Level1Node, SenderReport};
use aot_core::level2::{DropCause, Level2Node};
use aot_core::level3::Level3Node;
use aot_core::params::{Level, NetworkParams, ParamError, Topology, MINUTE_MS};
use aot_core::protocol::{
    BoardEntry, Bucket, DeliveryBlob, Envelope, NodeId, SignedContainer, Submission, TaggedMessage,
    Wire, ENVELOPE_INNER_LEN,
};
use aot_core::ProtocolError;

use crate::adversary::{Action, Adversary, LinkVerdict, Scenario, ScenarioError};
use crate::engine::{EventQueue, Priority};
use crate::frame::{Endpoint, Frame, FrameKind};
use crate::metrics::{hex, short, AuditRecord, EventLog, FaultRecord, Metrics, Record, Summary};
use crate::transport::{InProcess, Tcp, Transport};

#[derive(Clone, Copy, PartialEq, Eq, Debug, Default)]
pub enum TransportKind {
    #[default]
    InProcess,
    Tcp,
}

#[derive(Clone, Debug)]
pub struct SimConfig {
    pub params: NetworkParams,
    pub clients: usize,
    /// Preshared peers per client; rounded down to an even number.
    pub peers_per_client: usize,
    /// Measured messages to send.
    pub messages: usize,
    /// Aggregate send rate of all honest clients.
    pub send_rate_per_s: f64,
    /// Keep sending unmeasured messages after the measured ones so partly
    /// filled containers and batches keep flushing.
    pub background: bool,
    pub latency_ms: u64,
    pub jitter_ms: u64,
    pub transport: TransportKind,
    pub seed: u64,
    /// Hard stop in virtual time.
    pub max_time_ms: u64,
    /// Extra virtual time after every measured message resolved.
    pub settle_ms: u64,
    pub dummy_requests: bool,
    pub self_verify: bool,
    pub verify_on_post: bool,
    pub max_attempts: u32,
    pub post_timeout_ms: Option<u64>,
    pub ack_timeout_ms: Option<u64>,
    pub l2_receipt_timeout_ms: u64,
    /// Fill Level-3 repositories with dummies so early steps publish full
    /// lists.
    pub prefill: bool,
    /// Keep event log lines in memory, not only their hash.
    pub keep_log: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        let params = NetworkParams {
            beta1: 4,
            beta2: 8,
            ..NetworkParams::default()
        };
        Self {
            params,
            clients: 100,
            peers_per_client: 4,
            messages: 1000,
            send_rate_per_s: 5.0,
            background: true,
            latency_ms: 10,
            jitter_ms: 5,
            transport: TransportKind::InProcess,
            seed: 1,
            max_time_ms: 4 * 60 * MINUTE_MS,
            settle_ms: 0,
            dummy_requests: true,
            self_verify: true,
            verify_on_post: false,
            max_attempts: 5,
            post_timeout_ms: None,
            ack_timeout_ms: None,
            l2_receipt_timeout_ms: 2_000,
            prefill: true,
            keep_log: false,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("invalid parameters: {0}")]
    InvalidConfig(#[from] ParamError),
    #[error("invalid scenario: {0}")]
    Scenario(#[from] ScenarioError),
    #[error("invalid simulation setup: {0}")]
    Setup(String),
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        self.params.validate()?;
        if self.clients < 2 {
            return Err(SimError::Setup("need at least two clients".into()));
        }
        if self.peers_per_client < 2 || self.peers_per_client >= self.clients {
            return Err(SimError::Setup(format!(
                "peers per client must be in [2, {})",
                self.clients
            )));
        }
        if !(self.send_rate_per_s > 0.0 && self.send_rate_per_s.is_finite()) {
            return Err(SimError::Setup("send rate must be positive".into()));
        }
        if self.jitter_ms > self.latency_ms {
            return Err(SimError::Setup("jitter exceeds latency".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum Ev {
    Deliver {
        from: Endpoint,
        to: Endpoint,
        frame: Frame,
    },
    Step(NodeId),
    ClientPoll(u32),
    Workload,
    L2Poll(NodeId),
    Replay(Submission),
    Flood(usize),
    Garbage {
        left: usize,
    },
    ActionStart(usize),
    ActionEnd(usize),
}

/// What the harness knows about one application message.
#[derive(Clone, Debug)]
struct MsgInfo {
    sender: u32,
    receiver: u32,
    measured: bool,
    delivered: bool,
    first_post_ms: Option<u64>,
}

/// Where a submitted envelope came from.
#[derive(Clone, Copy, Debug)]
struct Origin {
    client: u32,
    attempt: Option<(GroupElement, u64)>,
    tag: Tag,
}

/// Stage counters for the message conservation check.
#[derive(Clone, Debug, Default)]
struct Flow {
    submits_sent: u64,
    submits_at_l1: u64,
    l1_accepted: u64,
    l1_rejected: u64,
    submits_dropped: u64,
    submits_unreachable: u64,
    flushed_entries: u64,
    entries_at_l2: u64,
    entries_fresh: u64,
    entries_duplicate: u64,
    entries_rejected: u64,
    entries_dropped: u64,
    entries_unreachable: u64,
    l2_accepted: u64,
    l2_dropped: u64,
    batched_real: u64,
    real_digests: BTreeSet<[u8; 32]>,
    real_received: BTreeSet<[u8; 32]>,
    real_published: BTreeSet<[u8; 32]>,
    in_mix: i64,
}

pub struct Sim {
    cfg: SimConfig,
    topology: Topology,
    l1: BTreeMap<NodeId, Level1Node>,
    l2: BTreeMap<NodeId, Level2Node>,
    l3: BTreeMap<NodeId, Level3Node>,
    clients: Vec<Client>,
    client_keys: Vec<KeyPair>,
    client_index: BTreeMap<GroupElement, u32>,
    honest_peers: Vec<Vec<u32>>,
    auditor: Auditor,
    adversary: Adversary,
    queue: EventQueue<Ev>,
    transport: Box<dyn Transport>,
    rng: ChaCha20Rng,
    pub metrics: Metrics,
    log: EventLog,
    offline: BTreeSet<NodeId>,
    poll_at: Vec<Option<u64>>,
    l2_poll_at: BTreeMap<NodeId, u64>,
    workload_scheduled: bool,
    stopping: bool,
    next_seq: u64,
    messages: BTreeMap<u64, MsgInfo>,
    by_msg_id: BTreeMap<(u32, u64), u64>,
    sent_tags: BTreeMap<(u32, u64), Vec<Tag>>,
    origins: BTreeMap<[u8; 32], Origin>,
    container_tags: BTreeMap<([u8; 32], usize), Tag>,
    client_tags: BTreeSet<[u8; 32]>,
    /// First publication of every client tag: node and time.
    published: BTreeMap<[u8; 32], (NodeId, u64)>,
    /// Tags accepted by some Level-1 node.
    l1_tags: BTreeSet<[u8; 32]>,
    /// Frame sizes of OT sessions by purpose and frame kind.
    pub transcript_shapes: BTreeMap<(String, FrameKind), BTreeSet<usize>>,
    ticket_purpose: BTreeMap<(u32, u64), String>,
    hs_tag: Tag,
    flow: Flow,
    /// Envelopes the adversary re-injected.
    replayed: BTreeSet<[u8; 32]>,
    pub replay_outcomes: ReplayOutcomes,
    /// `(client, peer client, stage)` for every handshake event.
    pub handshake_events: Vec<(u32, Option<u32>, &'static str)>,
}

/// What Level 2 did with re-injected envelopes.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ReplayOutcomes {
    pub dropped_as_replay: u64,
    pub dropped_other: u64,
    pub accepted: u64,
}

struct Directory<'a> {
    l1: &'a BTreeMap<NodeId, Level1Node>,
    l2: &'a mut BTreeMap<NodeId, Level2Node>,
    l3: &'a BTreeMap<NodeId, Level3Node>,
    offline: &'a BTreeSet<NodeId>,
}

impl AuditDirectory for Directory<'_> {
    fn l1_by_envelope(&mut self, l1: NodeId, d: &[u8; 32]) -> Option<L1HopRecord> {
        if self.offline.contains(&l1) {
            return None;
        }
        self.l1.get(&l1)?.audit_by_envelope(d)
    }

    fn l1_by_output(&mut self, l1: NodeId, c: &[u8; 32], position: usize) -> Option<L1HopRecord> {
        if self.offline.contains(&l1) {
            return None;
        }
        self.l1.get(&l1)?.audit_by_output(c, position)
    }

    fn l2_by_input(&mut self, l2: NodeId, c: &[u8; 32], position: usize) -> Option<L2HopRecord> {
        if self.offline.contains(&l2) {
            return None;
        }
        self.l2.get_mut(&l2)?.audit_by_input(c, position)
    }

    fn l3_by_bucket(
        &mut self,
        l3: NodeId,
        origin_l2: NodeId,
        round: u64,
        position: usize,
    ) -> Option<L3HopRecord> {
        if self.offline.contains(&l3) {
            return None;
        }
        self.l3
            .get(&l3)?
            .audit_by_bucket(origin_l2, round, position)
    }
}

fn drop_label(c: &DropCause) -> &'static str {
    match c {
        DropCause::Integrity => "integrity",
        DropCause::WrongNode => "wrong_node",
        DropCause::Stale => "stale",
        DropCause::Replay { .. } => "replay",
    }
}

fn verdict_label(v: &Verdict) -> &'static str {
    match v {
        Verdict::Malicious { .. } => "malicious",
        Verdict::SenderInputError => "sender_input_error",
        Verdict::Inconclusive { .. } => "inconclusive",
        Verdict::Unfounded => "unfounded",
    }
}

fn fault_label(k: FaultKind) -> String {
    serde_json::to_value(k)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

fn body_of(seq: u64, sender: u32, receiver: u32) -> Vec<u8> {
    let mut b = seq.to_be_bytes().to_vec();
    b.extend_from_slice(&sender.to_be_bytes());
    b.extend_from_slice(&receiver.to_be_bytes());
    b
}

fn parse_body(b: &[u8]) -> Option<(u64, u32, u32)> {
    if b.len() != 16 {
        return None;
    }
    Some((
        u64::from_be_bytes(b[..8].try_into().ok()?),
        u32::from_be_bytes(b[8..12].try_into().ok()?),
        u32::from_be_bytes(b[12..].try_into().ok()?),
    ))
}

impl Sim {
    pub fn new(cfg: SimConfig, scenario: Scenario) -> Result<Self, SimError> {
        cfg.validate()?;
        let params = cfg.params.clone();
        let (topology, node_keys) = Topology::generate(&params, cfg.seed);
        scenario.validate(cfg.clients, &topology)?;
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
        let mut log = EventLog::new(cfg.keep_log);

        // initiation: Level-3 nodes jointly draw the partition seed
        let keys: BTreeMap<NodeId, KeyPair> = node_keys.iter().cloned().collect();
        let contributions: Vec<DivisionContribution> = topology
            .l3
            .iter()
            .map(|n| DivisionContribution::new(n.id, keys[&n.id].clone(), &mut rng))
            .collect();
        let commits: Vec<_> = contributions.iter().map(|c| c.commit()).collect();
        let reveals: Vec<_> = contributions.iter().map(|c| c.reveal()).collect();
        let l3_keys = topology.l3.iter().map(|n| (n.id, n.public)).collect();
        let division = combine_division(&l3_keys, &commits, &reveals);
        let xor = division.xor;

        let mut l1 = BTreeMap::new();
        for n in &topology.l1 {
            l1.insert(
                n.id,
                Level1Node::new(
                    n.id,
                    keys[&n.id].clone(),
                    params.beta1,
                    topology.clone(),
                    rng.gen(),
                ),
            );
        }
        let mut l2 = BTreeMap::new();
        for n in &topology.l2 {
            let mut node = Level2Node::new(
                n.id,
                keys[&n.id].clone(),
                params.clone(),
                topology.clone(),
                xor,
                rng.gen(),
            );
            node.receipt_timeout_ms = cfg.l2_receipt_timeout_ms;
            l2.insert(n.id, node);
        }
        let mut l3 = BTreeMap::new();
        for n in &topology.l3 {
            let mut node = Level3Node::new(
                n.id,
                keys[&n.id].clone(),
                params.clone(),
                topology.clone(),
                rng.gen(),
            );
            if cfg.prefill {
                node.prefill(params.q2, 0);
            }
            l3.insert(n.id, node);
        }

        let adversary = Adversary::new(scenario, topology.clone(), rng.gen());
        let mut client_keys = Vec::with_capacity(cfg.clients);
        let mut clients = Vec::with_capacity(cfg.clients);
        let mut client_index = BTreeMap::new();
        for i in 0..cfg.clients as u32 {
            let mut s = cfg.seed.to_be_bytes().to_vec();
            s.extend_from_slice(b"client");
            s.extend_from_slice(&i.to_be_bytes());
            let kp = keygen(&s);
            let mut cc = ClientConfig::for_params(&params);
            cc.dummy_requests = cfg.dummy_requests;
            cc.self_verify = cfg.self_verify;
            cc.verify_on_post = cfg.verify_on_post;
            cc.max_attempts = cfg.max_attempts;
            if let Some(t) = cfg.post_timeout_ms {
                cc.post_timeout_ms = t;
            }
            if let Some(t) = cfg.ack_timeout_ms {
                cc.ack_timeout_ms = t;
            }
            if adversary.controls(i) {
                cc.dummy_requests = false;
                cc.self_verify = false;
                cc.verify_on_post = false;
                cc.max_attempts = 1;
            }
            client_index.insert(kp.public, i);
            clients.push(Client::new(
                kp.clone(),
                topology.clone(),
                params.clone(),
                cc,
                rng.gen(),
            ));
            client_keys.push(kp);
        }
        let hs_tag = aot_core::crypto::kdf::handshake_tag(&clients[0].config().network_id);

        // preshared pairs on a ring, plus a ring among controlled clients
        let n = cfg.clients;
        let mut pairs = BTreeSet::new();
        for i in 0..n {
            for k in 1..=cfg.peers_per_client / 2 {
                let j = (i + k) % n;
                pairs.insert((i.min(j), i.max(j)));
            }
        }
        let controlled: Vec<u32> = adversary.controlled().iter().copied().collect();
        for w in controlled.windows(2) {
            pairs.insert((w[0] as usize, w[1] as usize));
        }
        for &(a, b) in &pairs {
            let sigma: [u8; 32] = Sha256::new()
                .chain_update(b"aot-sim/sigma")
                .chain_update(cfg.seed.to_be_bytes())
                .chain_update((a as u64).to_be_bytes())
                .chain_update((b as u64).to_be_bytes())
                .finalize()
                .into();
            let (pa, pb) = (client_keys[a].public, client_keys[b].public);
            clients[a].add_pair(pb, sigma);
            clients[b].add_pair(pa, sigma);
        }
        let mut honest_peers = vec![Vec::new(); n];
        for &(a, b) in &pairs {
            let (ca, cb) = (adversary.controls(a as u32), adversary.controls(b as u32));
            if !ca && !cb {
                honest_peers[a].push(b as u32);
                honest_peers[b].push(a as u32);
            }
        }

        let transport: Box<dyn Transport> = match cfg.transport {
            TransportKind::InProcess => Box::new(InProcess),
            TransportKind::Tcp => {
                let mut k: BTreeMap<Endpoint, KeyPair> = node_keys
                    .iter()
                    .map(|(id, kp)| (Endpoint::Node(*id), kp.clone()))
                    .collect();
                for (i, kp) in client_keys.iter().enumerate() {
                    k.insert(Endpoint::Client(i as u32), kp.clone());
                }
                Box::new(Tcp::new(k))
            }
        };

        log.push(Record::Setup {
            t: 0,
            clients: n,
            l1: topology.l1.iter().map(|n| n.id.0).collect(),
            l2: topology.l2.iter().map(|n| n.id.0).collect(),
            l3: topology.l3.iter().map(|n| n.id.0).collect(),
            xor: hex(&xor),
            flagged: division.flagged.iter().map(|n| n.0).collect(),
        });

        let auditor = Auditor::new(topology.clone(), params.clone(), xor);
        let mut sim = Self {
            poll_at: vec![None; n],
            cfg,
            topology,
            l1,
            l2,
            l3,
            clients,
            client_keys,
            client_index,
            honest_peers,
            auditor,
            adversary,
            queue: EventQueue::new(),
            transport,
            rng,
            metrics: Metrics::default(),
            log,
            offline: BTreeSet::new(),
            l2_poll_at: BTreeMap::new(),
            workload_scheduled: false,
            stopping: false,
            next_seq: 1,
            messages: BTreeMap::new(),
            by_msg_id: BTreeMap::new(),
            sent_tags: BTreeMap::new(),
            origins: BTreeMap::new(),
            container_tags: BTreeMap::new(),
            client_tags: BTreeSet::new(),
            published: BTreeMap::new(),
            l1_tags: BTreeSet::new(),
            transcript_shapes: BTreeMap::new(),
            ticket_purpose: BTreeMap::new(),
            hs_tag,
            flow: Flow::default(),
            replayed: BTreeSet::new(),
            replay_outcomes: ReplayOutcomes::default(),
            handshake_events: Vec::new(),
        };
        sim.schedule_start();
        Ok(sim)
    }

    fn schedule_start(&mut self) {
        let step = self.cfg.params.step_ms();
        for id in self.topology.l3_ids() {
            self.queue.schedule(step, Priority::Step, Ev::Step(id));
        }
        for i in 0..self.clients.len() as u32 {
            self.poll_at[i as usize] = Some(0);
            self.queue.schedule(0, Priority::Timer, Ev::ClientPoll(i));
        }
        if self.cfg.messages > 0 || self.cfg.background {
            self.workload_scheduled = true;
            self.queue.schedule(0, Priority::Timer, Ev::Workload);
        }
        let actions = self.adversary.scenario().actions.clone();
        for (i, a) in actions.iter().enumerate() {
            match a.action {
                Action::Corrupt { .. } | Action::Offline { .. } | Action::Flood { .. } => {
                    self.queue
                        .schedule(a.at_ms, Priority::Timer, Ev::ActionStart(i));
                    if let Some(u) = a.until_ms {
                        self.queue.schedule(u, Priority::Timer, Ev::ActionEnd(i));
                    }
                }
                Action::InjectGarbage { count } if count > 0 => {
                    self.queue
                        .schedule(a.at_ms, Priority::Timer, Ev::Garbage { left: count });
                }
                _ => {}
            }
        }
    }

    pub fn now(&self) -> u64 {
        self.queue.now()
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn adversary(&self) -> &Adversary {
        &self.adversary
    }

    pub fn client(&self, i: u32) -> &Client {
        &self.clients[i as usize]
    }

    pub fn client_keys(&self) -> &[KeyPair] {
        &self.client_keys
    }

    pub fn client_of(&self, pk: &GroupElement) -> Option<u32> {
        self.client_index.get(pk).copied()
    }

    pub fn level3(&self, id: NodeId) -> Option<&Level3Node> {
        self.l3.get(&id)
    }

    pub fn level2(&self, id: NodeId) -> Option<&Level2Node> {
        self.l2.get(&id)
    }

    pub fn handshake_tag(&self) -> Tag {
        self.hs_tag
    }

    /// First publication of a tag: node and virtual time.
    pub fn published(&self, tag: &Tag) -> Option<(NodeId, u64)> {
        self.published.get(&tag.0).copied()
    }

    /// Every tag used for a message, in attempt order.
    pub fn tags_of(&self, client: u32, msg_id: u64) -> &[Tag] {
        self.sent_tags
            .get(&(client, msg_id))
            .map_or(&[], Vec::as_slice)
    }

    /// Every `(client, msg_id)` with the tags of its attempts.
    pub fn sent_tags(&self) -> impl Iterator<Item = (&(u32, u64), &Vec<Tag>)> {
        self.sent_tags.iter()
    }

    /// Tags of the envelopes the adversary captured and re-injected.
    pub fn replayed_tags(&self) -> BTreeSet<[u8; 32]> {
        self.replayed
            .iter()
            .filter_map(|d| self.origins.get(d))
            .map(|o| o.tag.0)
            .collect()
    }

    pub fn reached_l1(&self, tag: &Tag) -> bool {
        self.l1_tags.contains(&tag.0)
    }

    pub fn event_log(&self) -> &EventLog {
        &self.log
    }

    fn record(&mut self, r: Record) {
        self.log.push(r);
    }

    fn latency(&mut self) -> u64 {
        let j = self.cfg.jitter_ms;
        self.cfg.latency_ms - j + self.rng.gen_range(0..=2 * j)
    }

    /// Puts a frame on a link: the adversary sees it first, then the
    /// transport carries it.
    fn send(&mut self, from: Endpoint, to: Endpoint, frame: Frame) {
        let now = self.now();
        let kind = frame.kind();
        let mut replays = Vec::new();
        let verdict = self.adversary.on_frame(now, from, to, &frame, &mut replays);
        for (d, sub) in replays {
            self.queue
                .schedule(now + d, Priority::Timer, Ev::Replay(sub));
        }
        let label = format!("{kind:?}");
        Metrics::bump(&mut self.metrics.frames, &label);
        *self.metrics.frame_bytes.entry(label).or_insert(0) += frame.wire_len() as u64;
        let delay = match verdict {
            LinkVerdict::Drop => {
                self.metrics.link_drops += 1;
                self.count_lost(&frame, false);
                self.record(Record::LinkDrop {
                    t: now,
                    from: from.label(),
                    to: to.label(),
                    kind: format!("{kind:?}"),
                    cause: "adversary".into(),
                });
                return;
            }
            LinkVerdict::Delay(d) => d,
            LinkVerdict::Pass => 0,
        };
        let frame = match self.transport.carry(from, to, frame) {
            Ok(f) => f,
            Err(e) => {
                self.record(Record::LinkDrop {
                    t: now,
                    from: from.label(),
                    to: to.label(),
                    kind: format!("{kind:?}"),
                    cause: e.to_string(),
                });
                return;
            }
        };
        let at = now + self.latency() + delay;
        self.queue
            .schedule(at, Priority::Delivery, Ev::Deliver { from, to, frame });
    }

    fn count_lost(&mut self, frame: &Frame, unreachable: bool) {
        match frame {
            Frame::Submit(_) if unreachable => self.flow.submits_unreachable += 1,
            Frame::Submit(_) => self.flow.submits_dropped += 1,
            Frame::Container(c) if unreachable => {
                self.flow.entries_unreachable += c.entries.len() as u64
            }
            Frame::Container(c) => self.flow.entries_dropped += c.entries.len() as u64,
            _ => {}
        }
    }

    /// Runs every event up to and including `t`.
    pub fn run_until(&mut self, t: u64) {
        while let Some(next) = self.queue.peek_time() {
            if next > t {
                break;
            }
            let (_, ev) = self.queue.pop().expect("peeked");
            self.handle(ev);
        }
    }

    fn measured_resolved(&self) -> bool {
        self.metrics.measured_sent as usize >= self.cfg.messages
            && self.metrics.measured_acked + self.metrics.measured_gave_up
                >= self.metrics.measured_sent
    }

    /// Runs until every measured message is acknowledged or abandoned, then
    /// `settle_ms` more, or until `max_time_ms`.
    pub fn run(&mut self) {
        while let Some(next) = self.queue.peek_time() {
            if next > self.cfg.max_time_ms {
                break;
            }
            if self.measured_resolved() {
                let end = (self.now() + self.cfg.settle_ms).min(self.cfg.max_time_ms);
                self.run_until(end);
                break;
            }
            let (_, ev) = self.queue.pop().expect("peeked");
            self.handle(ev);
        }
        self.stopping = true;
    }

    fn handle(&mut self, ev: Ev) {
        let now = self.now();
        match ev {
            Ev::Deliver { from, to, frame } => self.deliver(from, to, frame),
            Ev::Step(id) => self.step(id),
            Ev::ClientPoll(c) => {
                if self.poll_at[c as usize] == Some(now) {
                    self.poll_at[c as usize] = None;
                    self.clients[c as usize].poll(now);
                    self.drain(c);
                }
            }
            Ev::Workload => self.workload(),
            Ev::L2Poll(id) => {
                if self.l2_poll_at.get(&id) == Some(&now) {
                    self.l2_poll_at.remove(&id);
                    self.l2_poll(id);
                }
            }
            Ev::Replay(sub) => self.replay(sub),
            Ev::Flood(i) => self.flood(i),
            Ev::Garbage { left } => self.garbage(left),
            Ev::ActionStart(i) => self.action(i, true),
            Ev::ActionEnd(i) => self.action(i, false),
        }
    }

    fn action(&mut self, i: usize, start: bool) {
        let now = self.now();
        let a = self.adversary.scenario().actions[i].clone();
        match a.action {
            Action::Corrupt {
                nodes,
                kinds,
                probability,
            } => {
                for n in nodes {
                    let id = NodeId(n);
                    let plan = start.then(|| FaultPlan {
                        kinds: kinds.clone(),
                        probability,
                    });
                    match self.topology.level_of(id) {
                        Some(Level::L1) => self.l1.get_mut(&id).expect("listed").set_fault(plan),
                        Some(Level::L2) => self.l2.get_mut(&id).expect("listed").set_fault(plan),
                        Some(Level::L3) => self.l3.get_mut(&id).expect("listed").set_fault(plan),
                        None => {}
                    }
                    self.record(Record::NodeState {
                        t: now,
                        node: n,
                        state: if start { "corrupt" } else { "honest" }.into(),
                    });
                }
            }
            Action::Offline { nodes } => {
                for n in nodes {
                    let id = NodeId(n);
                    if start {
                        self.offline.insert(id);
                    } else if self.offline.remove(&id)
                        && self.topology.level_of(id) == Some(Level::L3)
                    {
                        let step = self.cfg.params.step_ms();
                        let next = (now / step + 1) * step;
                        self.queue.schedule(next, Priority::Step, Ev::Step(id));
                    }
                    self.record(Record::NodeState {
                        t: now,
                        node: n,
                        state: if start { "offline" } else { "online" }.into(),
                    });
                }
            }
            Action::Flood { .. } if start => self.flood(i),
            _ => {}
        }
    }

    /// Sends one application message; returns its message id.
    pub fn send_message(
        &mut self,
        sender: u32,
        receiver: u32,
        measured: bool,
    ) -> Result<u64, ProtocolError> {
        let now = self.now();
        let seq = self.next_seq;
        self.next_seq += 1;
        let peer = self.client_keys[receiver as usize].public;
        let msg_id =
            self.clients[sender as usize].send(&peer, &body_of(seq, sender, receiver), now)?;
        self.messages.insert(
            seq,
            MsgInfo {
                sender,
                receiver,
                measured,
                delivered: false,
                first_post_ms: None,
            },
        );
        self.by_msg_id.insert((sender, msg_id), seq);
        if measured {
            self.metrics.measured_sent += 1;
        } else {
            self.metrics.background_sent += 1;
        }
        self.drain(sender);
        Ok(msg_id)
    }

    /// Starts a handshake from `a` to `b`, who share no secret yet.
    pub fn start_handshake(&mut self, a: u32, b: u32) -> Result<(), ProtocolError> {
        let now = self.now();
        let peer = self.client_keys[b as usize].public;
        self.clients[a as usize].handshake_initiate(&peer, now)?;
        self.drain(a);
        Ok(())
    }

    fn workload(&mut self) {
        let now = self.now();
        let measured = (self.metrics.measured_sent as usize) < self.cfg.messages;
        if !measured && (!self.cfg.background || self.stopping) {
            self.workload_scheduled = false;
            return;
        }
        let senders: Vec<u32> = (0..self.clients.len() as u32)
            .filter(|&c| !self.honest_peers[c as usize].is_empty())
            .collect();
        if let Some(&s) = senders.choose(&mut self.rng) {
            let r = *self.honest_peers[s as usize]
                .choose(&mut self.rng)
                .expect("nonempty");
            let _ = self.send_message(s, r, measured);
        }
        let gap = Exp::new(self.cfg.send_rate_per_s)
            .expect("validated rate")
            .sample(&mut self.rng);
        self.queue.schedule(
            now + (gap * 1000.0).ceil() as u64,
            Priority::Timer,
            Ev::Workload,
        );
    }

    fn flood(&mut self, i: usize) {
        let now = self.now();
        let a = &self.adversary.scenario().actions[i];
        let Action::Flood { rate_per_s } = a.action else {
            return;
        };
        if !a.active(now) {
            return;
        }
        let controlled: Vec<u32> = self.adversary.controlled().iter().copied().collect();
        if controlled.len() >= 2 {
            let k = self.rng.gen_range(0..controlled.len() - 1);
            let _ = self.send_message(controlled[k], controlled[k + 1], false);
        }
        let gap = Exp::new(rate_per_s.max(1e-9))
            .expect("positive")
            .sample(&mut self.rng);
        self.queue.schedule(
            now + (gap * 1000.0).ceil() as u64,
            Priority::Timer,
            Ev::Flood(i),
        );
    }

    /// A controlled client submits an envelope that won't open.
    fn garbage(&mut self, left: usize) {
        let now = self.now();
        let controlled: Vec<u32> = self.adversary.controlled().iter().copied().collect();
        let Some(&c) = controlled.choose(&mut self.rng) else {
            return;
        };
        let l2 = self
            .topology
            .l2
            .choose(&mut self.rng)
            .expect("Level-2 nodes")
            .id;
        let l1 = self
            .topology
            .l1
            .choose(&mut self.rng)
            .expect("Level-1 nodes")
            .id;
        let env = Envelope {
            inner: random_box(ENVELOPE_INNER_LEN, &mut self.rng),
            l2_hint: l2,
        };
        let sub = Submission::new(env, &self.client_keys[c as usize]);
        self.metrics.garbage_injected += 1;
        self.flow.submits_sent += 1;
        self.record(Record::Inject {
            t: now,
            client: c,
            kind: "garbage".into(),
        });
        self.send(Endpoint::Client(c), Endpoint::Node(l1), Frame::Submit(sub));
        if left > 1 {
            self.queue
                .schedule(now + 100, Priority::Timer, Ev::Garbage { left: left - 1 });
        }
    }

    /// Re-injects a captured submission, re-signed by a controlled client
    /// when there is one.
    fn replay(&mut self, sub: Submission) {
        let now = self.now();
        let controlled: Vec<u32> = self.adversary.controlled().iter().copied().collect();
        let (client, sub) = match controlled.choose(&mut self.rng) {
            Some(&c) => (
                c,
                Submission::new(sub.envelope, &self.client_keys[c as usize]),
            ),
            None => (self.client_of(&sub.sender_pk).unwrap_or(0), sub),
        };
        let l1 = self
            .topology
            .l1
            .choose(&mut self.rng)
            .expect("Level-1 nodes")
            .id;
        self.replayed.insert(sub.envelope.digest());
        self.metrics.replays_injected += 1;
        self.flow.submits_sent += 1;
        self.record(Record::Replay {
            t: now,
            client,
            l1: l1.0,
        });
        self.send(
            Endpoint::Client(client),
            Endpoint::Node(l1),
            Frame::Submit(sub),
        );
    }

    fn deliver(&mut self, from: Endpoint, to: Endpoint, frame: Frame) {
        let now = self.now();
        if let Endpoint::Node(n) = to {
            if self.offline.contains(&n) {
                self.unreachable(from, to, frame);
                return;
            }
        }
        match (to, frame) {
            (Endpoint::Node(l1), Frame::Submit(sub)) => self.at_l1(l1, from, sub),
            (Endpoint::Client(c), Frame::L1Receipt(r)) => {
                let attempt = self
                    .origins
                    .get(&r.envelope_digest)
                    .filter(|o| o.client == c)
                    .and_then(|o| o.attempt);
                if let Some((peer, counter)) = attempt {
                    self.clients[c as usize].on_l1_receipt(&peer, counter, r);
                }
            }
            (Endpoint::Node(l2), Frame::Container(c)) => self.at_l2(l2, from, c),
            (Endpoint::Node(l1), Frame::ContainerReceipt(r)) => {
                if let Some(n) = self.l1.get_mut(&l1) {
                    n.on_container_receipt(r);
                }
            }
            (Endpoint::Node(l3), Frame::Bucket(b)) => self.at_l3(l3, from, b),
            (Endpoint::Node(l2), Frame::BucketReceipt(r)) => {
                if let Some(n) = self.l2.get_mut(&l2) {
                    n.on_bucket_receipt(r);
                }
            }
            (Endpoint::Client(c), Frame::Board(rows)) => {
                if let Endpoint::Node(l3) = from {
                    self.clients[c as usize].on_board(l3, &rows, now);
                    self.drain(c);
                }
            }
            (Endpoint::Node(l3), Frame::OtOpen { ticket }) => {
                let Some(node) = self.l3.get_mut(&l3) else {
                    return;
                };
                let offer = node.ot_init();
                self.send(to, from, Frame::OtOffer { ticket, offer });
            }
            (Endpoint::Client(c), Frame::OtOffer { ticket, offer }) => {
                let f = Frame::OtOffer { ticket, offer };
                self.shape(c, ticket, FrameKind::OtOffer, &f);
                let Frame::OtOffer { offer, .. } = f else {
                    unreachable!("built above")
                };
                match self.clients[c as usize].ot_request(ticket, &offer, now) {
                    Some(request) => {
                        let f = Frame::OtRequest { ticket, request };
                        self.shape(c, ticket, FrameKind::OtRequest, &f);
                        self.send(to, from, f);
                    }
                    None => {
                        // the client closes the session it won't use
                        if let Some(n) = self.l3.get_mut(&offer.node) {
                            n.ot_cancel(offer.session);
                        }
                        self.ticket_purpose.remove(&(c, ticket));
                    }
                }
                self.drain(c);
            }
            (Endpoint::Node(l3), Frame::OtRequest { ticket, request }) => {
                let Some(node) = self.l3.get_mut(&l3) else {
                    return;
                };
                match node.ot_respond(&request) {
                    Ok(response) => self.send(to, from, Frame::OtResponse { ticket, response }),
                    Err(e) => {
                        Metrics::bump(&mut self.metrics.l3_rejects, "ot_session");
                        self.record(Record::L3Reject {
                            t: now,
                            node: l3.0,
                            reason: e.to_string(),
                        });
                    }
                }
            }
            (Endpoint::Client(c), Frame::OtResponse { ticket, response }) => {
                let f = Frame::OtResponse { ticket, response };
                self.shape(c, ticket, FrameKind::OtResponse, &f);
                let Frame::OtResponse { response, .. } = f else {
                    unreachable!("built above")
                };
                self.ticket_purpose.remove(&(c, ticket));
                self.clients[c as usize].ot_response(ticket, response, now);
                self.drain(c);
            }
            (
                Endpoint::Node(l1),
                Frame::Report {
                    receipt,
                    expected_tag,
                },
            ) => {
                let Some(node) = self.l1.get_mut(&l1) else {
                    return;
                };
                let report = SenderReport {
                    receipt,
                    expected_tag,
                    posted: false,
                };
                if let Some(ev) = node.record_sender_report(report, now) {
                    self.audit(ev, to.label());
                }
            }
            (to, f) => self.record(Record::LinkDrop {
                t: now,
                from: from.label(),
                to: to.label(),
                kind: format!("{:?}", f.kind()),
                cause: "unexpected".into(),
            }),
        }
    }

    fn shape(&mut self, c: u32, ticket: u64, kind: FrameKind, f: &Frame) {
        if let Some(p) = self.ticket_purpose.get(&(c, ticket)) {
            self.transcript_shapes
                .entry((p.clone(), kind))
                .or_default()
                .insert(f.wire_len());
        }
    }

    /// A frame addressed to a crashed node. Senders notice the failed
    /// connection; node-to-node traffic is left to the protocol's timers.
    fn unreachable(&mut self, from: Endpoint, to: Endpoint, frame: Frame) {
        let now = self.now();
        self.count_lost(&frame, true);
        self.record(Record::LinkDrop {
            t: now,
            from: from.label(),
            to: to.label(),
            kind: format!("{:?}", frame.kind()),
            cause: "offline".into(),
        });
        let Endpoint::Client(c) = from else {
            return;
        };
        match frame {
            Frame::Submit(sub) => {
                let attempt = self
                    .origins
                    .get(&sub.envelope.digest())
                    .filter(|o| o.client == c)
                    .and_then(|o| o.attempt);
                if let Some((peer, counter)) = attempt {
                    self.clients[c as usize].on_submit_failed(&peer, counter, now);
                }
            }
            Frame::OtOpen { ticket } | Frame::OtRequest { ticket, .. } => {
                self.ticket_purpose.remove(&(c, ticket));
                self.clients[c as usize].ot_failed(ticket, now);
            }
            _ => {}
        }
        self.drain(c);
    }

    fn at_l1(&mut self, l1: NodeId, from: Endpoint, sub: Submission) {
        let now = self.now();
        self.flow.submits_at_l1 += 1;
        let tid = match from {
            Endpoint::Client(c) => c as u64,
            Endpoint::Node(n) => u64::from(n.0) << 32,
        };
        let digest = sub.envelope.digest();
        let Some(node) = self.l1.get_mut(&l1) else {
            return;
        };
        match node.accept(sub, tid, now) {
            Ok(out) => {
                self.flow.l1_accepted += 1;
                self.flow.in_mix += 1;
                if let Some(o) = self.origins.get(&digest) {
                    self.l1_tags.insert(o.tag.0);
                }
                self.send(Endpoint::Node(l1), from, Frame::L1Receipt(out.receipt));
                if let Some(f) = out.flush {
                    self.flushed(l1, f);
                }
            }
            Err(e) => {
                self.flow.l1_rejected += 1;
                let reason = e.to_string();
                Metrics::bump(&mut self.metrics.l1_rejects, &reason);
                self.record(Record::L1Reject {
                    t: now,
                    node: l1.0,
                    reason,
                });
            }
        }
    }

    fn flushed(&mut self, l1: NodeId, f: Flush) {
        let now = self.now();
        let c = f.container;
        let digest = c.digest();
        self.flow.flushed_entries += c.entries.len() as u64;
        self.record(Record::L1Flush {
            t: now,
            node: l1.0,
            l2: c.l2.0,
            container: short(&digest),
            entries: c.entries.len(),
        });
        for (pos, original, kind) in f.tampered {
            let tag = self.origins.get(&original).map(|o| o.tag);
            if let Some(tag) = tag {
                self.container_tags.insert((digest, pos), tag);
            }
            self.fault(l1, kind, tag);
        }
        let to = Endpoint::Node(c.l2);
        self.send(Endpoint::Node(l1), to, Frame::Container(c));
    }

    fn fault(&mut self, node: NodeId, kind: FaultKind, tag: Option<Tag>) {
        let now = self.now();
        let tag = tag.map_or([0; 32], |t| t.0);
        let client_message = self.client_tags.contains(&tag);
        self.record(Record::Fault {
            t: now,
            node: node.0,
            kind: fault_label(kind),
            tag: short(&tag),
        });
        self.metrics.faults.push(FaultRecord {
            at_ms: now,
            node: node.0,
            kind: fault_label(kind),
            tag,
            client_message,
        });
    }

    fn at_l2(&mut self, l2: NodeId, from: Endpoint, c: SignedContainer) {
        let now = self.now();
        let entries = c.entries.len() as u64;
        let l1 = c.l1;
        let replayed: Vec<bool> = c
            .entries
            .iter()
            .map(|e| !self.replayed.is_empty() && self.replayed.contains(&e.digest()))
            .collect();
        self.flow.entries_at_l2 += entries;
        let Some(node) = self.l2.get_mut(&l2) else {
            return;
        };
        match node.ingest(c, now) {
            Ok(out) => {
                self.send(
                    Endpoint::Node(l2),
                    from,
                    Frame::ContainerReceipt(out.receipt),
                );
                if out.accepted == 0 && out.drops.is_empty() && entries > 0 {
                    self.flow.entries_duplicate += entries;
                    return;
                }
                self.flow.entries_fresh += entries;
                for (i, _) in replayed.iter().enumerate().filter(|(_, r)| **r) {
                    match out.drops.iter().find(|(p, _)| *p == i) {
                        Some((_, DropCause::Replay { .. })) => {
                            self.replay_outcomes.dropped_as_replay += 1
                        }
                        Some(_) => self.replay_outcomes.dropped_other += 1,
                        None => self.replay_outcomes.accepted += 1,
                    }
                }
                self.flow.l2_accepted += out.accepted as u64;
                self.flow.l2_dropped += out.drops.len() as u64;
                self.flow.in_mix -= out.drops.len() as i64;
                self.record(Record::L2Ingest {
                    t: now,
                    node: l2.0,
                    l1: l1.0,
                    accepted: out.accepted,
                    dropped: out.drops.len(),
                });
                for (_, cause) in &out.drops {
                    let label = drop_label(cause);
                    Metrics::bump(&mut self.metrics.l2_drops, label);
                    self.record(Record::L2Drop {
                        t: now,
                        node: l2.0,
                        cause: label.into(),
                    });
                }
                for ev in out.evidence {
                    self.audit(ev, Endpoint::Node(l2).label());
                }
                for d in out.dispatches {
                    self.dispatched(l2, d);
                }
            }
            Err(e) => {
                self.flow.entries_rejected += entries;
                self.record(Record::L2Drop {
                    t: now,
                    node: l2.0,
                    cause: e.to_string(),
                });
            }
        }
    }

    fn dispatched(&mut self, l2: NodeId, d: aot_core::level2::Dispatch) {
        let now = self.now();
        let alpha = self.cfg.params.alpha;
        let active: Vec<u16> = d.buckets[..alpha].iter().map(|b| b.target_l3.0).collect();
        self.record(Record::L2Round {
            t: now,
            node: l2.0,
            round: d.round,
            active,
            buckets: d.buckets.len(),
        });
        // real buckets carry the originals; the record of tampering keeps
        // the originals, so index both
        for b in &d.buckets[..alpha] {
            for m in &b.messages {
                self.flow.real_digests.insert(m.digest());
            }
            self.flow.batched_real += b.messages.len() as u64;
        }
        for (original, kind) in d.tampered {
            self.fault(l2, kind, Some(original.tag));
        }
        for b in d.buckets {
            let to = Endpoint::Node(b.target_l3);
            self.send(Endpoint::Node(l2), to, Frame::Bucket(b));
        }
        self.arm_l2_poll(l2);
    }

    fn arm_l2_poll(&mut self, l2: NodeId) {
        let at = self.now() + self.cfg.l2_receipt_timeout_ms;
        if self.l2_poll_at.get(&l2).is_none_or(|&t| t > at) {
            self.l2_poll_at.insert(l2, at);
            self.queue.schedule(at, Priority::Timer, Ev::L2Poll(l2));
        }
    }

    fn l2_poll(&mut self, l2: NodeId) {
        let now = self.now();
        if self.offline.contains(&l2) {
            self.arm_l2_poll(l2);
            return;
        }
        let Some(node) = self.l2.get_mut(&l2) else {
            return;
        };
        let resend = node.poll_timeouts(now);
        let outstanding = node.outstanding();
        for b in resend {
            self.metrics.failovers += 1;
            self.record(Record::L2Failover {
                t: now,
                node: l2.0,
                round: b.round,
                target: b.target_l3.0,
            });
            let to = Endpoint::Node(b.target_l3);
            self.send(Endpoint::Node(l2), to, Frame::Bucket(b));
        }
        if outstanding > 0 {
            self.arm_l2_poll(l2);
        }
    }

    fn at_l3(&mut self, l3: NodeId, from: Endpoint, b: Bucket) {
        let now = self.now();
        let digests: Vec<[u8; 32]> = b.messages.iter().map(TaggedMessage::digest).collect();
        let Some(node) = self.l3.get_mut(&l3) else {
            return;
        };
        match node.receive_bucket(b, now) {
            Ok(receipt) => {
                for d in digests {
                    if self.flow.real_digests.contains(&d) {
                        self.flow.real_received.insert(d);
                    }
                }
                self.send(Endpoint::Node(l3), from, Frame::BucketReceipt(receipt));
            }
            Err(e) => {
                let reason = e.to_string();
                Metrics::bump(&mut self.metrics.l3_rejects, &reason);
                self.record(Record::L3Reject {
                    t: now,
                    node: l3.0,
                    reason,
                });
            }
        }
    }

    fn step(&mut self, l3: NodeId) {
        let now = self.now();
        if self.offline.contains(&l3) {
            // a crashed node misses its steps; it resumes when back online
            return;
        }
        let step_ms = self.cfg.params.step_ms();
        self.queue
            .schedule(now + step_ms, Priority::Step, Ev::Step(l3));
        let Some(node) = self.l3.get_mut(&l3) else {
            return;
        };
        let out = node.publication_step(now);
        let held = node.repository_len();
        let mut rows = Vec::with_capacity(out.published.len());
        for p in &out.published {
            let original = p
                .tampered
                .as_ref()
                .map_or_else(|| p.entry.blob.tagged(), |(m, _)| m.clone());
            let d = original.digest();
            if self.flow.real_digests.contains(&d) && self.flow.real_published.insert(d) {
                self.metrics.dwell_ms.push(now - p.arrived_at_ms);
                self.metrics.dwell_steps.push(p.dwell_steps);
                self.flow.in_mix -= 1;
                self.metrics
                    .in_mix_at_publish
                    .push(self.flow.in_mix.max(0) as u64);
            }
            if self.client_tags.contains(&p.entry.tag.0) {
                *self.metrics.postings.entry(p.entry.tag.0).or_insert(0) += 1;
                self.published.entry(p.entry.tag.0).or_insert((l3, now));
            }
            rows.push(BoardEntry {
                tag: p.entry.tag,
                ordinal: p.entry.ordinal,
                published_at_ms: p.entry.published_at_ms,
            });
        }
        let tampered: Vec<(Tag, FaultKind)> = out
            .published
            .iter()
            .filter_map(|p| p.tampered.as_ref().map(|(m, k)| (m.tag, *k)))
            .collect();
        for (tag, kind) in tampered {
            self.fault(l3, kind, Some(tag));
        }
        self.record(Record::L3Step {
            t: now,
            node: l3.0,
            step: out.step,
            published: rows.len(),
            held,
        });
        if rows.is_empty() {
            return;
        }
        for c in 0..self.clients.len() as u32 {
            if !self.adversary.controls(c) {
                self.send(
                    Endpoint::Node(l3),
                    Endpoint::Client(c),
                    Frame::Board(rows.clone()),
                );
            }
        }
    }

    /// Works off a client's queued actions and events, then re-arms its
    /// timer.
    fn drain(&mut self, c: u32) {
        loop {
            let actions = self.clients[c as usize].take_actions();
            let events = self.clients[c as usize].take_events();
            if actions.is_empty() && events.is_empty() {
                break;
            }
            for e in events {
                self.client_event(c, e);
            }
            for a in actions {
                self.client_action(c, a);
            }
        }
        let now = self.now();
        if let Some(d) = self.clients[c as usize].next_deadline() {
            let d = d.max(now + 1);
            if self.poll_at[c as usize].is_none_or(|t| d < t) {
                self.poll_at[c as usize] = Some(d);
                self.queue.schedule(d, Priority::Timer, Ev::ClientPoll(c));
            }
        }
    }

    fn client_action(&mut self, c: u32, a: ClientAction) {
        let me = Endpoint::Client(c);
        let honest = !self.adversary.controls(c);
        match a {
            ClientAction::Submit {
                l1,
                submission,
                tag,
                attempt,
            } => {
                let digest = submission.envelope.digest();
                self.origins.insert(
                    digest,
                    Origin {
                        client: c,
                        attempt,
                        tag,
                    },
                );
                if tag != self.hs_tag {
                    self.client_tags.insert(tag.0);
                }
                self.flow.submits_sent += 1;
                self.send(me, Endpoint::Node(l1), Frame::Submit(submission));
            }
            ClientAction::Retrieve { ticket, l3 } => {
                if !honest {
                    let now = self.now();
                    self.clients[c as usize].ot_failed(ticket, now);
                    return;
                }
                if let Some(p) = self.clients[c as usize].ticket_purpose(ticket) {
                    self.ticket_purpose
                        .insert((c, ticket), p.label().to_string());
                }
                let f = Frame::OtOpen { ticket };
                self.shape(c, ticket, FrameKind::OtOpen, &f);
                self.send(me, Endpoint::Node(l3), f);
            }
            ClientAction::Report {
                l1,
                receipt,
                expected_tag,
            } => {
                if honest {
                    self.send(
                        me,
                        Endpoint::Node(l1),
                        Frame::Report {
                            receipt,
                            expected_tag,
                        },
                    );
                }
            }
            ClientAction::File(ev) => {
                if honest {
                    self.audit(ev, me.label());
                }
            }
        }
    }

    fn client_event(&mut self, c: u32, e: ClientEvent) {
        let now = self.now();
        match e {
            ClientEvent::Sent {
                peer,
                msg_id,
                counter,
                attempt,
                tag,
                ..
            } => {
                self.sent_tags.entry((c, msg_id)).or_default().push(tag);
                let measured = self
                    .by_msg_id
                    .get(&(c, msg_id))
                    .and_then(|s| self.messages.get(s))
                    .is_some_and(|m| m.measured);
                self.record(Record::Sent {
                    t: now,
                    client: c,
                    peer: short(peer.as_bytes()),
                    msg_id,
                    counter,
                    attempt,
                    tag: short(&tag.0),
                    measured,
                });
            }
            ClientEvent::Posted {
                msg_id,
                counter,
                node,
                ordinal,
                sent_at_ms,
                ..
            } => {
                if counter & ACK_FLAG == 0 {
                    if let Some(m) = self
                        .by_msg_id
                        .get(&(c, msg_id))
                        .and_then(|s| self.messages.get_mut(s))
                    {
                        if m.first_post_ms.is_none() {
                            m.first_post_ms = Some(now);
                            if m.measured {
                                self.metrics.submit_to_publish_ms.push(now - sent_at_ms);
                            }
                        }
                    }
                }
                self.record(Record::Posted {
                    t: now,
                    client: c,
                    msg_id,
                    counter,
                    node: node.0,
                    ordinal,
                    latency_ms: now - sent_at_ms,
                });
            }
            ClientEvent::Delivered {
                peer,
                counter,
                body,
                duplicate,
                ..
            } => {
                self.metrics.deliveries += 1;
                if duplicate {
                    self.metrics.duplicate_deliveries += 1;
                }
                let from = self.client_of(&peer);
                match parse_body(&body) {
                    Some((seq, s, r)) if Some(s) == from && r == c => {
                        if let Some(m) = self.messages.get_mut(&seq) {
                            if m.sender == s && m.receiver == r && !m.delivered {
                                m.delivered = true;
                                if m.measured {
                                    self.metrics.measured_delivered += 1;
                                }
                            }
                        }
                    }
                    _ => self.metrics.cross_deliveries += 1,
                }
                self.record(Record::Delivered {
                    t: now,
                    client: c,
                    peer: short(peer.as_bytes()),
                    counter,
                    duplicate,
                });
            }
            ClientEvent::Acked {
                msg_id,
                first_sent_ms,
                ..
            } => {
                if let Some(m) = self
                    .by_msg_id
                    .get(&(c, msg_id))
                    .and_then(|s| self.messages.get(s))
                {
                    if m.measured {
                        self.metrics.measured_acked += 1;
                    }
                }
                self.record(Record::Acked {
                    t: now,
                    client: c,
                    msg_id,
                    rtt_ms: now - first_sent_ms,
                });
            }
            ClientEvent::Resent { msg_id, reason, .. } => {
                let reason = format!("{reason:?}");
                Metrics::bump(&mut self.metrics.resends, &reason);
                self.record(Record::Resent {
                    t: now,
                    client: c,
                    msg_id,
                    reason,
                });
            }
            ClientEvent::GaveUp { msg_id, .. } => {
                if let Some(m) = self
                    .by_msg_id
                    .get(&(c, msg_id))
                    .and_then(|s| self.messages.get(s))
                {
                    if m.measured {
                        self.metrics.measured_gave_up += 1;
                    }
                }
                self.record(Record::GaveUp {
                    t: now,
                    client: c,
                    msg_id,
                });
            }
            ClientEvent::FailureReported { l1, .. } => {
                self.record(Record::ClientReport {
                    t: now,
                    client: c,
                    l1: l1.0,
                });
            }
            ClientEvent::IntegrityFailure {
                counter, reason, ..
            } => {
                self.metrics.integrity_failures += 1;
                self.record(Record::IntegrityFailure {
                    t: now,
                    client: c,
                    counter,
                    reason: reason.into(),
                });
            }
            ClientEvent::RetrievalFailed {
                purpose, reason, ..
            } => {
                Metrics::bump(&mut self.metrics.retrieval_failures, reason);
                self.record(Record::RetrievalFailed {
                    t: now,
                    client: c,
                    purpose: purpose.into(),
                    reason: reason.into(),
                });
            }
            ClientEvent::Retrieved { purpose, node, .. } => {
                Metrics::bump(&mut self.metrics.retrievals, purpose);
                self.record(Record::Retrieved {
                    t: now,
                    client: c,
                    purpose: purpose.into(),
                    node: node.0,
                });
            }
            ClientEvent::HandshakeStarted { peer, .. } => {
                self.metrics.handshakes_started += 1;
                self.handshake_record(c, &peer, "started");
            }
            ClientEvent::HandshakeAccepted { peer, .. } => {
                self.metrics.handshakes_accepted += 1;
                self.handshake_record(c, &peer, "accepted");
            }
            ClientEvent::HandshakeCompleted { peer, .. } => {
                self.metrics.handshakes_completed += 1;
                self.handshake_record(c, &peer, "completed");
            }
            ClientEvent::NoticeReceived { .. }
            | ClientEvent::Verified { .. }
            | ClientEvent::EvidenceFiled { .. } => {}
        }
    }

    fn handshake_record(&mut self, c: u32, peer: &GroupElement, stage: &'static str) {
        let now = self.now();
        let p = self.client_of(peer);
        self.handshake_events.push((c, p, stage));
        self.record(Record::Handshake {
            t: now,
            client: c,
            peer: short(peer.as_bytes()),
            stage: stage.into(),
        });
    }

    /// Tag of the message a piece of evidence is about, as far as the
    /// harness can tell.
    fn subject(&self, ev: &Evidence) -> Option<[u8; 32]> {
        match ev {
            Evidence::NotPosted { expected_tag, .. } => Some(expected_tag.0),
            Evidence::AlteredDelivery { blob, .. } => Some(blob.tag.0),
            Evidence::MacFailure {
                response,
                choice,
                key,
            } => {
                let ct = response.ciphertexts.get(choice.checked_sub(1)?)?;
                let plain = ot_decrypt_with_key(
                    key,
                    &response.sender_point,
                    &response.receiver_point,
                    *choice,
                    ct,
                )
                .ok()?;
                DeliveryBlob::decode(&plain).ok().map(|b| b.tag.0)
            }
            Evidence::L2IntegrityFailure {
                container,
                position,
                ..
            } => self
                .container_tags
                .get(&(container.digest(), *position))
                .map(|t| t.0),
        }
    }

    fn audit(&mut self, ev: Evidence, filer: String) {
        let now = self.now();
        let subject = self.subject(&ev);
        let mut dir = Directory {
            l1: &self.l1,
            l2: &mut self.l2,
            l3: &self.l3,
            offline: &self.offline,
        };
        let case = self.auditor.open_case(&ev, &mut dir);
        let verdict = verdict_label(&case.verdict).to_string();
        let blamed = case.verdict.blamed().map(|n| n.0);
        self.record(Record::Audit {
            t: now,
            kind: case.kind.into(),
            filer: filer.clone(),
            verdict: verdict.clone(),
            blamed,
            tag: subject.map(|s| short(&s)),
        });
        self.metrics.audits.push(AuditRecord {
            at_ms: now,
            kind: case.kind,
            filer,
            verdict,
            blamed,
            subject,
        });
    }

    fn in_transit(&self) -> (u64, u64) {
        let mut submits = 0;
        let mut entries = 0;
        for ev in self.queue.iter() {
            if let Ev::Deliver { frame, .. } = ev {
                match frame {
                    Frame::Submit(_) => submits += 1,
                    Frame::Container(c) => entries += c.entries.len() as u64,
                    _ => {}
                }
            }
        }
        (submits, entries)
    }

    /// Checks that every message is accounted for at every stage. Returns
    /// one line per stage, prefixed `ok` or `VIOLATION`.
    pub fn conservation(&self) -> Vec<String> {
        let f = &self.flow;
        let (submits_transit, entries_transit) = self.in_transit();
        let queued: u64 = self
            .l1
            .values()
            .map(|n| {
                self.topology
                    .l2
                    .iter()
                    .map(|l2| n.queued(l2.id) as u64)
                    .sum::<u64>()
            })
            .sum();
        let buffered: u64 = self.l2.values().map(|n| n.buffered() as u64).sum();
        let mut held_real = BTreeSet::new();
        for n in self.l3.values() {
            for m in n.held() {
                let d = m.digest();
                if f.real_digests.contains(&d) {
                    held_real.insert(d);
                }
            }
        }
        let published_or_held = f.real_published.union(&held_real).count() as u64;
        let check = |name: &str, lhs: u64, rhs: Vec<(&str, u64)>| {
            let total: u64 = rhs.iter().map(|(_, v)| v).sum();
            let parts: Vec<String> = rhs.iter().map(|(k, v)| format!("{v} {k}")).collect();
            format!(
                "{} {name}: {lhs} = {}",
                if lhs == total { "ok" } else { "VIOLATION" },
                parts.join(" + ")
            )
        };
        vec![
            check(
                "submissions",
                f.submits_sent,
                vec![
                    ("at level 1", f.submits_at_l1),
                    ("dropped on link", f.submits_dropped),
                    ("to offline node", f.submits_unreachable),
                    ("in transit", submits_transit),
                ],
            ),
            check(
                "level-1 arrivals",
                f.submits_at_l1,
                vec![("accepted", f.l1_accepted), ("rejected", f.l1_rejected)],
            ),
            check(
                "level-1 accepted",
                f.l1_accepted,
                vec![("flushed", f.flushed_entries), ("queued", queued)],
            ),
            check(
                "container entries",
                f.flushed_entries,
                vec![
                    ("at level 2", f.entries_at_l2),
                    ("dropped on link", f.entries_dropped),
                    ("to offline node", f.entries_unreachable),
                    ("in transit", entries_transit),
                ],
            ),
            check(
                "level-2 arrivals",
                f.entries_at_l2,
                vec![
                    ("fresh", f.entries_fresh),
                    ("duplicate container", f.entries_duplicate),
                    ("rejected container", f.entries_rejected),
                ],
            ),
            check(
                "fresh entries",
                f.entries_fresh,
                vec![
                    ("accepted", f.l2_accepted),
                    ("dropped with cause", f.l2_dropped),
                ],
            ),
            check(
                "level-2 accepted",
                f.l2_accepted,
                vec![("batched", f.batched_real), ("buffered", buffered)],
            ),
            check(
                "real messages received at level 3",
                f.real_received.len() as u64,
                vec![("published or held", published_or_held)],
            ),
        ]
    }

    pub fn summary(&self) -> Summary {
        let mut s = self.metrics.summary(self.now());
        s.conservation = self.conservation();
        s.event_log_sha256 = hex(&self.log.digest());
        s
    }

    pub fn transport_name(&self) -> &'static str {
        self.transport.name()
    }
}
