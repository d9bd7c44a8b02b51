//! The user application as a sans-IO state machine. The caller delivers
//! board rows, receipts, OT messages and clock ticks; the client answers
//! with [`ClientAction`]s to carry out and [`ClientEvent`]s to log.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use std::collections::{BTreeMap, VecDeque};

use crate::audit::Evidence;
use crate::crypto::kdf::{handshake_secret, handshake_tag};
use crate::crypto::{
    kdf_tag, ot_receiver_choose, Direction, GroupElement, KeyPair, OtReceiverSession, SealedBox,
    Tag,
};
use crate::error::ProtocolError;
use crate::params::{NetworkParams, Topology};
use crate::protocol::{
    open_payload, seal_payload, wrap_envelope, BoardEntry, DeliveryBlob, L1Receipt, NodeId,
    OtOffer, OtRequest, OtResponse, PairState, PendingSend, SignedWire, Submission, Wire,
    PAYLOAD_X_LEN,
};

/// High bit of the counter in acknowledgment tags, keeping them disjoint
/// from data tags.
pub const ACK_FLAG: u64 = 1 << 63;

/// First byte of every non-empty application payload. An empty payload is
/// an acknowledgment.
pub const KIND_DATA: u8 = 0;
pub const KIND_NOTICE: u8 = 1;
pub const KIND_HELLO: u8 = 2;
pub const KIND_REPLY: u8 = 3;

/// Longest body [`Client::send`] accepts.
pub const MAX_BODY_LEN: usize = PAYLOAD_X_LEN - 1;

/// Tag under which `acker` acknowledges the peer's message `counter`.
pub fn ack_tag(sigma: &[u8; 32], counter: u64, acker: Direction) -> Tag {
    kdf_tag(sigma, ACK_FLAG | counter, acker)
}

#[derive(Clone, Debug)]
pub struct ClientConfig {
    pub network_id: Vec<u8>,
    /// How long after submission the sender waits to see its tag posted.
    pub post_timeout_ms: u64,
    /// How long after posting the sender waits for an acknowledgment.
    pub ack_timeout_ms: u64,
    /// Attempts per message before giving up.
    pub max_attempts: u32,
    pub dummy_requests: bool,
    pub self_verify: bool,
    /// Also verify every message as soon as its tag is posted.
    pub verify_on_post: bool,
}

impl ClientConfig {
    pub fn for_params(params: &NetworkParams) -> Self {
        Self {
            network_id: b"aot".to_vec(),
            post_timeout_ms: 10 * params.tau_ms,
            ack_timeout_ms: 20 * params.tau_ms,
            max_attempts: 5,
            dummy_requests: true,
            self_verify: true,
            verify_on_post: false,
        }
    }
}

/// Why the client wants an OT session.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Purpose {
    Deliver { peer: GroupElement, counter: u64 },
    HandshakeReply { peer: GroupElement },
    SelfVerify { peer: GroupElement, counter: u64 },
    Handshake,
    Dummy,
}

impl Purpose {
    pub fn label(&self) -> &'static str {
        match self {
            Purpose::Deliver { .. } => "deliver",
            Purpose::HandshakeReply { .. } => "handshake_reply",
            Purpose::SelfVerify { .. } => "self_verify",
            Purpose::Handshake => "handshake",
            Purpose::Dummy => "dummy",
        }
    }
}

#[derive(Clone, Debug)]
pub enum ClientAction {
    /// Hand `submission` to Level-1 node `l1`. `attempt` names the tracked
    /// message, `None` for fire-and-forget traffic.
    Submit {
        l1: NodeId,
        submission: Submission,
        tag: Tag,
        attempt: Option<(GroupElement, u64)>,
    },
    /// Run OT session `ticket` with Level-3 node `l3`.
    Retrieve {
        ticket: u64,
        l3: NodeId,
    },
    /// Tell `l1` that a receipted message never appeared.
    Report {
        l1: NodeId,
        receipt: L1Receipt,
        expected_tag: Tag,
    },
    File(Evidence),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ResendReason {
    NotPosted,
    NoAck,
    Transport,
}

#[derive(Clone, Debug)]
pub enum ClientEvent {
    Sent {
        peer: GroupElement,
        msg_id: u64,
        counter: u64,
        attempt: u32,
        tag: Tag,
        at_ms: u64,
    },
    Posted {
        peer: GroupElement,
        msg_id: u64,
        counter: u64,
        node: NodeId,
        ordinal: u64,
        sent_at_ms: u64,
        at_ms: u64,
    },
    Delivered {
        peer: GroupElement,
        counter: u64,
        body: Vec<u8>,
        duplicate: bool,
        at_ms: u64,
    },
    Acked {
        peer: GroupElement,
        msg_id: u64,
        first_sent_ms: u64,
        at_ms: u64,
    },
    Resent {
        peer: GroupElement,
        msg_id: u64,
        reason: ResendReason,
        at_ms: u64,
    },
    GaveUp {
        peer: GroupElement,
        msg_id: u64,
        at_ms: u64,
    },
    FailureReported {
        l1: NodeId,
        at_ms: u64,
    },
    /// A retrieved blob failed its signature check or did not open.
    IntegrityFailure {
        peer: Option<GroupElement>,
        counter: u64,
        reason: &'static str,
        at_ms: u64,
    },
    NoticeReceived {
        peer: GroupElement,
        counter: u64,
        at_ms: u64,
    },
    Verified {
        peer: GroupElement,
        counter: u64,
        at_ms: u64,
    },
    EvidenceFiled {
        kind: &'static str,
        at_ms: u64,
    },
    RetrievalFailed {
        purpose: &'static str,
        reason: &'static str,
        at_ms: u64,
    },
    Retrieved {
        purpose: &'static str,
        node: NodeId,
        at_ms: u64,
    },
    HandshakeStarted {
        peer: GroupElement,
        at_ms: u64,
    },
    HandshakeAccepted {
        peer: GroupElement,
        at_ms: u64,
    },
    HandshakeCompleted {
        peer: GroupElement,
        at_ms: u64,
    },
}

#[derive(Clone, Debug)]
struct Outgoing {
    peer: GroupElement,
    m: SealedBox,
    attempts: u32,
    first_sent_ms: u64,
    counters: Vec<u64>,
}

#[derive(Clone, Debug)]
struct SentRecord {
    tag: Tag,
    m: SealedBox,
    envelope_digest: [u8; 32],
    l1: NodeId,
    receipt: Option<L1Receipt>,
    posted: Option<(NodeId, u64)>,
    sent_at_ms: u64,
}

#[derive(Clone, Copy, Debug)]
enum Watch {
    Data { peer: GroupElement, counter: u64 },
    Reply { peer: GroupElement },
}

struct Retrieval {
    l3: NodeId,
    ordinal: Option<u64>,
    purpose: Purpose,
    session: Option<OtReceiverSession>,
    offer: Option<OtOffer>,
}

pub struct Client {
    keys: KeyPair,
    topology: Topology,
    params: NetworkParams,
    config: ClientConfig,
    hs_tag: Tag,
    pairs: BTreeMap<GroupElement, PairState>,
    nonces: BTreeMap<GroupElement, VecDeque<[u8; 24]>>,
    handshakes: BTreeMap<GroupElement, [u8; 32]>,
    watch: BTreeMap<Tag, Watch>,
    watch_dirty: bool,
    own_tags: BTreeMap<Tag, (GroupElement, u64)>,
    ack_tags: BTreeMap<Tag, u64>,
    /// Post deadlines of our own acknowledgments, keyed like `sent_log`.
    ack_watch: BTreeMap<(GroupElement, u64), u64>,
    attempt_msg: BTreeMap<(GroupElement, u64), u64>,
    outgoing: BTreeMap<u64, Outgoing>,
    sent_log: BTreeMap<(GroupElement, u64), SentRecord>,
    verifiable: VecDeque<(GroupElement, u64)>,
    cursors: BTreeMap<NodeId, u64>,
    retrievals: BTreeMap<u64, Retrieval>,
    next_ticket: u64,
    next_msg_id: u64,
    next_dummy_at: Option<u64>,
    next_verify_at: Option<u64>,
    actions: Vec<ClientAction>,
    events: Vec<ClientEvent>,
    rng: ChaCha20Rng,
}

const NONCE_MEMORY: usize = 64;
const VERIFIABLE_MEMORY: usize = 64;

impl Client {
    pub fn new(
        keys: KeyPair,
        topology: Topology,
        params: NetworkParams,
        config: ClientConfig,
        seed: u64,
    ) -> Self {
        Self {
            hs_tag: handshake_tag(&config.network_id),
            keys,
            topology,
            params,
            config,
            pairs: BTreeMap::new(),
            nonces: BTreeMap::new(),
            handshakes: BTreeMap::new(),
            watch: BTreeMap::new(),
            watch_dirty: true,
            own_tags: BTreeMap::new(),
            ack_tags: BTreeMap::new(),
            ack_watch: BTreeMap::new(),
            attempt_msg: BTreeMap::new(),
            outgoing: BTreeMap::new(),
            sent_log: BTreeMap::new(),
            verifiable: VecDeque::new(),
            cursors: BTreeMap::new(),
            retrievals: BTreeMap::new(),
            next_ticket: 1,
            next_msg_id: 1,
            next_dummy_at: None,
            next_verify_at: None,
            actions: Vec::new(),
            events: Vec::new(),
            rng: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    pub fn public(&self) -> GroupElement {
        self.keys.public
    }

    pub fn config(&self) -> &ClientConfig {
        &self.config
    }

    pub fn config_mut(&mut self) -> &mut ClientConfig {
        &mut self.config
    }

    pub fn pair(&self, peer: &GroupElement) -> Option<&PairState> {
        self.pairs.get(peer)
    }

    /// Installs a pair whose secret was agreed out of band.
    pub fn add_pair(&mut self, peer: GroupElement, sigma: [u8; 32]) {
        self.pairs
            .insert(peer, PairState::new(&self.keys.public, peer, sigma));
        self.watch_dirty = true;
    }

    pub fn cursor(&self, l3: NodeId) -> u64 {
        self.cursors.get(&l3).copied().unwrap_or(0)
    }

    pub fn in_flight(&self) -> usize {
        self.outgoing.len()
    }

    /// Why ticket `ticket` was opened, while it is open.
    pub fn ticket_purpose(&self, ticket: u64) -> Option<&Purpose> {
        self.retrievals.get(&ticket).map(|r| &r.purpose)
    }

    pub fn take_actions(&mut self) -> Vec<ClientAction> {
        std::mem::take(&mut self.actions)
    }

    pub fn take_events(&mut self) -> Vec<ClientEvent> {
        std::mem::take(&mut self.events)
    }

    fn random_l1(&mut self, avoid: Option<NodeId>) -> NodeId {
        let choices: Vec<NodeId> = self
            .topology
            .l1
            .iter()
            .map(|n| n.id)
            .filter(|id| Some(*id) != avoid)
            .collect();
        let pool = if choices.is_empty() {
            self.topology.l1.iter().map(|n| n.id).collect()
        } else {
            choices
        };
        *pool
            .choose(&mut self.rng)
            .expect("topology has Level-1 nodes")
    }

    /// Wraps `m` under `tag` for a random Level-2 node and queues the
    /// submission to a random Level-1 node.
    fn submit(
        &mut self,
        m: SealedBox,
        tag: Tag,
        attempt: Option<(GroupElement, u64)>,
        avoid_l1: Option<NodeId>,
        now_ms: u64,
    ) -> ([u8; 32], NodeId) {
        let l2 = self
            .topology
            .l2
            .choose(&mut self.rng)
            .expect("topology has Level-2 nodes")
            .clone();
        let env = wrap_envelope(m, tag, l2.id, &l2.public, now_ms / 1000, &mut self.rng);
        let digest = env.digest();
        let l1 = self.random_l1(avoid_l1);
        self.actions.push(ClientAction::Submit {
            l1,
            submission: Submission::new(env, &self.keys),
            tag,
            attempt,
        });
        (digest, l1)
    }

    /// Sends `body` to `peer`; returns the message id.
    pub fn send(
        &mut self,
        peer: &GroupElement,
        body: &[u8],
        now_ms: u64,
    ) -> Result<u64, ProtocolError> {
        let mut x = Vec::with_capacity(body.len() + 1);
        x.push(KIND_DATA);
        x.extend_from_slice(body);
        self.send_kind(peer, x, now_ms)
    }

    fn send_kind(
        &mut self,
        peer: &GroupElement,
        x: Vec<u8>,
        now_ms: u64,
    ) -> Result<u64, ProtocolError> {
        if !self.pairs.contains_key(peer) {
            return Err(ProtocolError::NoSharedSecret);
        }
        let m = seal_payload(&self.keys, peer, &x, &mut self.rng)?;
        let msg_id = self.next_msg_id;
        self.next_msg_id += 1;
        self.outgoing.insert(
            msg_id,
            Outgoing {
                peer: *peer,
                m,
                attempts: 0,
                first_sent_ms: now_ms,
                counters: Vec::new(),
            },
        );
        self.dispatch_attempt(msg_id, None, now_ms);
        Ok(msg_id)
    }

    fn dispatch_attempt(&mut self, msg_id: u64, avoid_l1: Option<NodeId>, now_ms: u64) {
        let out = self.outgoing.get_mut(&msg_id).expect("live message");
        out.attempts += 1;
        let (peer, m, attempt) = (out.peer, out.m.clone(), out.attempts);
        let pair = self.pairs.get_mut(&peer).expect("pair checked at send");
        let counter = pair.next_out;
        pair.next_out += 1;
        let tag = kdf_tag(&pair.sigma, counter, pair.direction);
        let ack = ack_tag(&pair.sigma, counter, pair.direction.flip());
        let (envelope_digest, l1) =
            self.submit(m.clone(), tag, Some((peer, counter)), avoid_l1, now_ms);
        let pending = PendingSend {
            counter,
            tag,
            m: m.clone(),
            envelope_digest,
            l1,
            sent_at_ms: now_ms,
            post_deadline_ms: now_ms + self.config.post_timeout_ms,
            ack_deadline_ms: u64::MAX,
            posted: None,
            attempt,
        };
        self.pairs
            .get_mut(&peer)
            .expect("pair checked at send")
            .pending
            .insert(counter, pending);
        self.own_tags.insert(tag, (peer, counter));
        self.ack_tags.insert(ack, msg_id);
        self.attempt_msg.insert((peer, counter), msg_id);
        self.outgoing
            .get_mut(&msg_id)
            .expect("live")
            .counters
            .push(counter);
        self.sent_log.insert(
            (peer, counter),
            SentRecord {
                tag,
                m,
                envelope_digest,
                l1,
                receipt: None,
                posted: None,
                sent_at_ms: now_ms,
            },
        );
        self.events.push(ClientEvent::Sent {
            peer,
            msg_id,
            counter,
            attempt,
            tag,
            at_ms: now_ms,
        });
    }

    fn resend(&mut self, peer: GroupElement, counter: u64, reason: ResendReason, now_ms: u64) {
        let Some(pending) = self
            .pairs
            .get_mut(&peer)
            .and_then(|p| p.pending.remove(&counter))
        else {
            return;
        };
        let Some(&msg_id) = self.attempt_msg.get(&(peer, counter)) else {
            return;
        };
        let Some(out) = self.outgoing.get(&msg_id) else {
            return;
        };
        if out.attempts >= self.config.max_attempts {
            self.finish(msg_id);
            self.events.push(ClientEvent::GaveUp {
                peer,
                msg_id,
                at_ms: now_ms,
            });
            return;
        }
        let avoid = (reason == ResendReason::Transport).then_some(pending.l1);
        self.events.push(ClientEvent::Resent {
            peer,
            msg_id,
            reason,
            at_ms: now_ms,
        });
        self.dispatch_attempt(msg_id, avoid, now_ms);
    }

    /// Forgets every attempt of a message.
    fn finish(&mut self, msg_id: u64) -> Option<Outgoing> {
        let out = self.outgoing.remove(&msg_id)?;
        let pair = self.pairs.get_mut(&out.peer);
        if let Some(pair) = pair {
            for c in &out.counters {
                if let Some(p) = pair.pending.remove(c) {
                    self.own_tags.remove(&p.tag);
                }
                self.ack_tags
                    .remove(&ack_tag(&pair.sigma, *c, pair.direction.flip()));
                self.own_tags
                    .remove(&kdf_tag(&pair.sigma, *c, pair.direction));
            }
        }
        for c in &out.counters {
            self.attempt_msg.remove(&(out.peer, *c));
        }
        Some(out)
    }

    /// Records the Level-1 receipt for a submission. Acknowledgments are
    /// keyed by `ACK_FLAG | counter`.
    pub fn on_l1_receipt(&mut self, peer: &GroupElement, counter: u64, receipt: L1Receipt) -> bool {
        let Some(pk) = self.topology.public_key(receipt.l1) else {
            return false;
        };
        let Some(rec) = self.sent_log.get_mut(&(*peer, counter)) else {
            return false;
        };
        if receipt.l1 != rec.l1
            || receipt.envelope_digest != rec.envelope_digest
            || !receipt.verify_sig(pk)
        {
            return false;
        }
        rec.receipt = Some(receipt);
        true
    }

    /// The Level-1 node could not be reached; resend through another one.
    pub fn on_submit_failed(&mut self, peer: &GroupElement, counter: u64, now_ms: u64) {
        self.resend(*peer, counter, ResendReason::Transport, now_ms);
    }

    fn rebuild_watch(&mut self) {
        if !self.watch_dirty {
            return;
        }
        self.watch.clear();
        let xi = self.params.xi;
        for (peer, pair) in &self.pairs {
            let c = pair.next_in;
            for counter in c.saturating_sub(xi).max(1)..=c + xi {
                let tag = kdf_tag(&pair.sigma, counter, pair.direction.flip());
                self.watch.insert(
                    tag,
                    Watch::Data {
                        peer: *peer,
                        counter,
                    },
                );
            }
        }
        for (peer, sigma) in &self.handshakes {
            let dir = Direction::of_sender(peer, &self.keys.public);
            self.watch
                .insert(kdf_tag(sigma, 1, dir), Watch::Reply { peer: *peer });
        }
        self.watch_dirty = false;
    }

    fn schedule(&mut self, l3: NodeId, ordinal: Option<u64>, purpose: Purpose) -> u64 {
        let ticket = self.next_ticket;
        self.next_ticket += 1;
        self.retrievals.insert(
            ticket,
            Retrieval {
                l3,
                ordinal,
                purpose,
                session: None,
                offer: None,
            },
        );
        self.actions.push(ClientAction::Retrieve { ticket, l3 });
        ticket
    }

    /// Processes board rows of `l3`, in ordinal order.
    pub fn on_board(&mut self, l3: NodeId, entries: &[BoardEntry], now_ms: u64) {
        self.rebuild_watch();
        for e in entries {
            let cursor = self.cursors.entry(l3).or_insert(0);
            if e.ordinal < *cursor {
                continue;
            }
            *cursor = e.ordinal + 1;
            if let Some(&(peer, counter)) = self.own_tags.get(&e.tag) {
                self.on_posted(peer, counter, l3, e.ordinal, now_ms);
            } else if let Some(&msg_id) = self.ack_tags.get(&e.tag) {
                if let Some(out) = self.finish(msg_id) {
                    self.events.push(ClientEvent::Acked {
                        peer: out.peer,
                        msg_id,
                        first_sent_ms: out.first_sent_ms,
                        at_ms: now_ms,
                    });
                }
            } else if e.tag == self.hs_tag {
                self.schedule(l3, Some(e.ordinal), Purpose::Handshake);
            } else if let Some(w) = self.watch.get(&e.tag).copied() {
                let purpose = match w {
                    Watch::Data { peer, counter } => Purpose::Deliver { peer, counter },
                    Watch::Reply { peer } => Purpose::HandshakeReply { peer },
                };
                self.schedule(l3, Some(e.ordinal), purpose);
            }
        }
    }

    fn on_posted(
        &mut self,
        peer: GroupElement,
        counter: u64,
        l3: NodeId,
        ordinal: u64,
        now_ms: u64,
    ) {
        let msg_id = self.attempt_msg.get(&(peer, counter)).copied();
        let mut sent_at_ms = now_ms;
        if let Some(p) = self
            .pairs
            .get_mut(&peer)
            .and_then(|p| p.pending.get_mut(&counter))
        {
            if p.posted.is_some() {
                return;
            }
            p.posted = Some((l3, ordinal));
            p.ack_deadline_ms = now_ms + self.config.ack_timeout_ms;
            sent_at_ms = p.sent_at_ms;
        }
        if counter & ACK_FLAG != 0 {
            self.ack_watch.remove(&(peer, counter));
            if let Some(rec) = self.sent_log.get(&(peer, counter)) {
                self.own_tags.remove(&rec.tag);
            }
        }
        if let Some(rec) = self.sent_log.get_mut(&(peer, counter)) {
            rec.posted = Some((l3, ordinal));
            sent_at_ms = rec.sent_at_ms;
        }
        self.verifiable.push_back((peer, counter));
        while self.verifiable.len() > VERIFIABLE_MEMORY {
            self.verifiable.pop_front();
        }
        self.events.push(ClientEvent::Posted {
            peer,
            msg_id: msg_id.unwrap_or(0),
            counter,
            node: l3,
            ordinal,
            sent_at_ms,
            at_ms: now_ms,
        });
        if self.config.verify_on_post {
            self.schedule(l3, Some(ordinal), Purpose::SelfVerify { peer, counter });
        }
    }

    /// Chooses the OT index for an open ticket. `None` drops the ticket,
    /// e.g. when the wanted ordinal has left the node's OT window.
    pub fn ot_request(&mut self, ticket: u64, offer: &OtOffer, now_ms: u64) -> Option<OtRequest> {
        let r = self.retrievals.get_mut(&ticket)?;
        let n = offer.n as usize;
        let choice = match r.ordinal {
            _ if offer.node != r.l3 => None,
            Some(o) if r.purpose != Purpose::Dummy => offer.choice_for(o),
            _ => Some(self.rng.gen_range(1..=n.max(1))),
        };
        let session =
            choice.and_then(|c| ot_receiver_choose(n, &offer.sender_point, c, &mut self.rng).ok());
        let Some((point, session)) = session else {
            let r = self.retrievals.remove(&ticket).expect("present");
            self.events.push(ClientEvent::RetrievalFailed {
                purpose: r.purpose.label(),
                reason: "outside OT window",
                at_ms: now_ms,
            });
            return None;
        };
        r.session = Some(session);
        r.offer = Some(offer.clone());
        Some(OtRequest {
            session: offer.session,
            receiver_point: point,
        })
    }

    /// The node did not answer; the ticket is dropped.
    pub fn ot_failed(&mut self, ticket: u64, now_ms: u64) {
        if let Some(r) = self.retrievals.remove(&ticket) {
            self.events.push(ClientEvent::RetrievalFailed {
                purpose: r.purpose.label(),
                reason: "transport",
                at_ms: now_ms,
            });
        }
    }

    pub fn ot_response(&mut self, ticket: u64, response: OtResponse, now_ms: u64) {
        let Some(r) = self.retrievals.remove(&ticket) else {
            return;
        };
        let (Some(session), Some(offer)) = (r.session, r.offer) else {
            return;
        };
        let label = r.purpose.label();
        let fail = |events: &mut Vec<ClientEvent>, reason| {
            events.push(ClientEvent::RetrievalFailed {
                purpose: label,
                reason,
                at_ms: now_ms,
            })
        };
        let Some(pk) = self.topology.public_key(r.l3).copied() else {
            return;
        };
        if response.node != r.l3
            || response.session != offer.session
            || response.sender_point != offer.sender_point
            || response.receiver_point != session.receiver_point()
            || !response.verify_sig(&pk)
        {
            fail(&mut self.events, "unsigned response");
            return;
        }
        let Ok(plain) = session.recover(&response.ciphertexts) else {
            fail(&mut self.events, "OT decryption");
            return;
        };
        self.events.push(ClientEvent::Retrieved {
            purpose: label,
            node: r.l3,
            at_ms: now_ms,
        });
        let blob = DeliveryBlob::decode(&plain)
            .ok()
            .filter(|b| b.node == r.l3 && b.verify_sig(&pk));
        match r.purpose {
            Purpose::Dummy => {}
            Purpose::Handshake => {
                if let Some(blob) = blob {
                    self.accept_hello(&blob, now_ms);
                }
            }
            Purpose::Deliver { peer, counter } => {
                self.deliver(peer, counter, blob, false, now_ms);
            }
            Purpose::HandshakeReply { peer } => {
                self.deliver(peer, 1, blob, true, now_ms);
            }
            Purpose::SelfVerify { peer, counter } => {
                self.check_own(peer, counter, blob, &response, &session, now_ms);
            }
        }
    }

    fn integrity_failure(
        &mut self,
        peer: GroupElement,
        counter: u64,
        reason: &'static str,
        now_ms: u64,
    ) {
        self.events.push(ClientEvent::IntegrityFailure {
            peer: Some(peer),
            counter,
            reason,
            at_ms: now_ms,
        });
        if self.pairs.contains_key(&peer) {
            let mut x = vec![KIND_NOTICE];
            x.extend_from_slice(&counter.to_be_bytes());
            let _ = self.send_kind(&peer, x, now_ms);
        }
    }

    fn deliver(
        &mut self,
        peer: GroupElement,
        counter: u64,
        blob: Option<DeliveryBlob>,
        reply: bool,
        now_ms: u64,
    ) {
        let Some(blob) = blob else {
            self.integrity_failure(peer, counter, "signature", now_ms);
            return;
        };
        let sigma = if reply {
            self.handshakes.get(&peer).copied()
        } else {
            self.pairs.get(&peer).map(|p| p.sigma)
        };
        let Some(sigma) = sigma else {
            return;
        };
        let dir = Direction::of_sender(&peer, &self.keys.public);
        if blob.tag != kdf_tag(&sigma, counter, dir) {
            self.integrity_failure(peer, counter, "tag", now_ms);
            return;
        }
        let payload = match open_payload(&self.keys, &blob.m) {
            Ok((sender, p)) if sender == peer => p,
            _ => {
                self.integrity_failure(peer, counter, "open", now_ms);
                return;
            }
        };
        if reply {
            if payload.x.first() != Some(&KIND_REPLY) {
                return;
            }
            self.handshakes.remove(&peer);
            self.add_pair(peer, sigma);
            self.events.push(ClientEvent::HandshakeCompleted {
                peer,
                at_ms: now_ms,
            });
        }
        let pair = self.pairs.get_mut(&peer).expect("pair exists");
        if counter >= pair.next_in {
            pair.next_in = counter + 1;
            self.watch_dirty = true;
        }
        let seen = self.nonces.entry(peer).or_default();
        let duplicate = seen.contains(&payload.nonce);
        if !duplicate {
            seen.push_back(payload.nonce);
            if seen.len() > NONCE_MEMORY {
                seen.pop_front();
            }
        }
        let Some((&kind, body)) = payload.x.split_first() else {
            // acknowledgments are recognised by tag and never retrieved
            return;
        };
        self.send_ack(peer, counter, now_ms);
        if duplicate {
            self.events.push(ClientEvent::Delivered {
                peer,
                counter,
                body: body.to_vec(),
                duplicate: true,
                at_ms: now_ms,
            });
            return;
        }
        match kind {
            KIND_DATA => self.events.push(ClientEvent::Delivered {
                peer,
                counter,
                body: body.to_vec(),
                duplicate: false,
                at_ms: now_ms,
            }),
            KIND_NOTICE if body.len() == 8 => {
                let failed = u64::from_be_bytes(body.try_into().expect("8 bytes"));
                self.events.push(ClientEvent::NoticeReceived {
                    peer,
                    counter: failed,
                    at_ms: now_ms,
                });
                if let Some(&(l3, ordinal)) = self
                    .sent_log
                    .get(&(peer, failed))
                    .and_then(|r| r.posted.as_ref())
                {
                    self.schedule(
                        l3,
                        Some(ordinal),
                        Purpose::SelfVerify {
                            peer,
                            counter: failed,
                        },
                    );
                }
            }
            _ => {}
        }
    }

    /// Acknowledgments are never acknowledged or resent, but like every
    /// message they are checked for posting and may be self-verified.
    fn send_ack(&mut self, peer: GroupElement, counter: u64, now_ms: u64) {
        let Some(pair) = self.pairs.get(&peer) else {
            return;
        };
        let tag = ack_tag(&pair.sigma, counter, pair.direction);
        let Ok(m) = seal_payload(&self.keys, &peer, &[], &mut self.rng) else {
            return;
        };
        let key = (peer, ACK_FLAG | counter);
        let (envelope_digest, l1) = self.submit(m.clone(), tag, Some(key), None, now_ms);
        self.own_tags.insert(tag, key);
        self.ack_watch
            .insert(key, now_ms + self.config.post_timeout_ms);
        self.sent_log.insert(
            key,
            SentRecord {
                tag,
                m,
                envelope_digest,
                l1,
                receipt: None,
                posted: None,
                sent_at_ms: now_ms,
            },
        );
    }

    fn check_own(
        &mut self,
        peer: GroupElement,
        counter: u64,
        blob: Option<DeliveryBlob>,
        response: &OtResponse,
        session: &OtReceiverSession,
        now_ms: u64,
    ) {
        let Some(rec) = self.sent_log.get(&(peer, counter)) else {
            return;
        };
        let evidence = match blob {
            None => Some(Evidence::MacFailure {
                response: response.clone(),
                choice: session.choice(),
                key: session.reveal_key(),
            }),
            Some(b) if b.tag == rec.tag && b.m != rec.m => rec
                .receipt
                .clone()
                .map(|receipt| Evidence::AlteredDelivery { receipt, blob: b }),
            Some(b) if b.tag == rec.tag => {
                self.events.push(ClientEvent::Verified {
                    peer,
                    counter,
                    at_ms: now_ms,
                });
                None
            }
            Some(_) => None,
        };
        if let Some(ev) = evidence {
            self.events.push(ClientEvent::EvidenceFiled {
                kind: ev.kind(),
                at_ms: now_ms,
            });
            self.actions.push(ClientAction::File(ev));
        }
    }

    /// Starts a handshake with `peer`; the pair exists once the reply is
    /// retrieved.
    pub fn handshake_initiate(
        &mut self,
        peer: &GroupElement,
        now_ms: u64,
    ) -> Result<(), ProtocolError> {
        let mut r = [0u8; 32];
        self.rng.fill(&mut r);
        let mut x = Vec::with_capacity(73);
        x.push(KIND_HELLO);
        x.extend_from_slice(peer.as_bytes());
        x.extend_from_slice(&r);
        x.extend_from_slice(&(now_ms / 1000).to_be_bytes());
        let m = seal_payload(&self.keys, peer, &x, &mut self.rng)?;
        self.handshakes.insert(*peer, handshake_secret(&r));
        self.watch_dirty = true;
        let tag = self.hs_tag;
        self.submit(m, tag, None, None, now_ms);
        self.events.push(ClientEvent::HandshakeStarted {
            peer: *peer,
            at_ms: now_ms,
        });
        Ok(())
    }

    fn accept_hello(&mut self, blob: &DeliveryBlob, now_ms: u64) {
        if blob.tag != self.hs_tag {
            return;
        }
        // every client fetches every hello; only the addressee can open it
        let Ok((sender, payload)) = open_payload(&self.keys, &blob.m) else {
            return;
        };
        let x = &payload.x;
        if x.len() != 73 || x[0] != KIND_HELLO || &x[1..33] != self.keys.public.as_bytes() {
            return;
        }
        if self.pairs.contains_key(&sender) || sender == self.keys.public {
            return;
        }
        let sigma = handshake_secret(&x[33..65]);
        self.add_pair(sender, sigma);
        self.events.push(ClientEvent::HandshakeAccepted {
            peer: sender,
            at_ms: now_ms,
        });
        let _ = self.send_kind(&sender, vec![KIND_REPLY], now_ms);
    }

    fn draw_interval(&mut self, max_ms: u64) -> u64 {
        self.rng.gen_range(1000.min(max_ms)..=max_ms.max(1))
    }

    /// Fires every timer due at `now_ms`: dummy requests, self-verification,
    /// and post/ack deadlines.
    pub fn poll(&mut self, now_ms: u64) {
        if self.config.dummy_requests {
            match self.next_dummy_at {
                None => {
                    let d = self.draw_interval(self.params.t2_ms);
                    self.next_dummy_at = Some(now_ms + d);
                }
                Some(t) if t <= now_ms => {
                    let l3 = self
                        .topology
                        .l3
                        .choose(&mut self.rng)
                        .expect("topology has Level-3 nodes")
                        .id;
                    self.schedule(l3, None, Purpose::Dummy);
                    let d = self.draw_interval(self.params.t2_ms);
                    self.next_dummy_at = Some(now_ms + d);
                }
                _ => {}
            }
        }
        if self.config.self_verify {
            match self.next_verify_at {
                None => {
                    let d = self.draw_interval(self.params.t1_ms);
                    self.next_verify_at = Some(now_ms + d);
                }
                Some(t) if t <= now_ms => {
                    let pick = (!self.verifiable.is_empty())
                        .then(|| self.verifiable[self.rng.gen_range(0..self.verifiable.len())]);
                    if let Some((peer, counter)) = pick {
                        if let Some(&(l3, ordinal)) = self
                            .sent_log
                            .get(&(peer, counter))
                            .and_then(|r| r.posted.as_ref())
                        {
                            self.schedule(l3, Some(ordinal), Purpose::SelfVerify { peer, counter });
                        }
                    }
                    let d = self.draw_interval(self.params.t1_ms);
                    self.next_verify_at = Some(now_ms + d);
                }
                _ => {}
            }
        }
        let mut overdue = Vec::new();
        for (peer, pair) in &self.pairs {
            for (c, p) in &pair.pending {
                if p.posted.is_none() && p.post_deadline_ms <= now_ms {
                    overdue.push((*peer, *c, ResendReason::NotPosted));
                } else if p.posted.is_some() && p.ack_deadline_ms <= now_ms {
                    overdue.push((*peer, *c, ResendReason::NoAck));
                }
            }
        }
        for (peer, counter, reason) in overdue {
            if reason == ResendReason::NotPosted {
                let rec = self.sent_log.get(&(peer, counter));
                if let Some(receipt) = rec.and_then(|r| r.receipt.clone()) {
                    let l1 = receipt.l1;
                    self.actions.push(ClientAction::Report {
                        l1,
                        expected_tag: rec.expect("present").tag,
                        receipt,
                    });
                    self.events
                        .push(ClientEvent::FailureReported { l1, at_ms: now_ms });
                }
            }
            self.resend(peer, counter, reason, now_ms);
        }
        let lost: Vec<(GroupElement, u64)> = self
            .ack_watch
            .iter()
            .filter(|(_, &d)| d <= now_ms)
            .map(|(k, _)| *k)
            .collect();
        for key in lost {
            self.ack_watch.remove(&key);
            if let Some(rec) = self.sent_log.get(&key) {
                self.own_tags.remove(&rec.tag);
                if let Some(receipt) = rec.receipt.clone() {
                    let l1 = receipt.l1;
                    self.actions.push(ClientAction::Report {
                        l1,
                        expected_tag: rec.tag,
                        receipt,
                    });
                    self.events
                        .push(ClientEvent::FailureReported { l1, at_ms: now_ms });
                }
            }
        }
        let cutoff = now_ms.saturating_sub(self.params.h_ms);
        self.sent_log.retain(|_, r| r.sent_at_ms >= cutoff);
    }

    /// Earliest time at which [`poll`](Self::poll) has work, if any.
    pub fn next_deadline(&self) -> Option<u64> {
        let pending = self
            .pairs
            .values()
            .flat_map(|p| p.pending.values())
            .map(|p| {
                if p.posted.is_none() {
                    p.post_deadline_ms
                } else {
                    p.ack_deadline_ms
                }
            });
        pending
            .chain(self.ack_watch.values().copied())
            .chain(self.next_dummy_at)
            .chain(self.next_verify_at)
            .min()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::keygen;

    fn client(seed: u8) -> (Client, NetworkParams) {
        let params = NetworkParams::default();
        let (topo, _) = Topology::generate(&params, 1);
        let c = Client::new(
            keygen(&[seed; 4]),
            topo,
            params.clone(),
            ClientConfig::for_params(&params),
            seed as u64,
        );
        (c, params)
    }

    #[test]
    fn ack_tags_disjoint_from_data_tags() {
        let s = [4u8; 32];
        for c in 1..50 {
            for d in [Direction::Zero, Direction::One] {
                assert_ne!(ack_tag(&s, c, d), kdf_tag(&s, c, d));
                assert_ne!(ack_tag(&s, c, d), kdf_tag(&s, c, d.flip()));
            }
        }
    }

    #[test]
    fn send_needs_pair() {
        let (mut a, _) = client(1);
        let (b, _) = client(2);
        assert_eq!(
            a.send(&b.public(), b"hi", 0),
            Err(ProtocolError::NoSharedSecret)
        );
        a.add_pair(b.public(), [9; 32]);
        assert!(a.send(&b.public(), b"hi", 0).is_ok());
        assert!(matches!(
            a.take_actions()[..],
            [ClientAction::Submit { .. }]
        ));
    }

    #[test]
    fn window_matches_counter_plus_one() {
        let (mut a, _) = client(1);
        let (mut b, _) = client(2);
        a.add_pair(b.public(), [9; 32]);
        b.add_pair(a.public(), [9; 32]);
        // a's counters 1 and 2 are lost; 3 must still match at b
        let pair = a.pair(&b.public()).unwrap().clone();
        let tag = kdf_tag(&pair.sigma, 3, pair.direction);
        b.on_board(
            NodeId(9),
            &[BoardEntry {
                tag,
                ordinal: 0,
                published_at_ms: 0,
            }],
            0,
        );
        assert!(matches!(
            b.take_actions()[..],
            [ClientAction::Retrieve { .. }]
        ));
    }

    #[test]
    fn own_tag_marks_posted_and_ack_clears() {
        let (mut a, _) = client(1);
        let (b, _) = client(2);
        a.add_pair(b.public(), [9; 32]);
        a.send(&b.public(), b"hi", 0).unwrap();
        let pair = a.pair(&b.public()).unwrap().clone();
        let tag = kdf_tag(&pair.sigma, 1, pair.direction);
        let ack = ack_tag(&pair.sigma, 1, pair.direction.flip());
        let row = |tag, ordinal| BoardEntry {
            tag,
            ordinal,
            published_at_ms: 0,
        };
        a.on_board(NodeId(9), &[row(tag, 0), row(ack, 1)], 5);
        let ev = a.take_events();
        assert!(ev.iter().any(|e| matches!(e, ClientEvent::Posted { .. })));
        assert!(ev.iter().any(|e| matches!(e, ClientEvent::Acked { .. })));
        assert_eq!(a.in_flight(), 0);
    }

    #[test]
    fn unposted_message_is_reported_and_resent() {
        let (mut a, params) = client(1);
        let (b, _) = client(2);
        a.config_mut().dummy_requests = false;
        a.config_mut().self_verify = false;
        a.add_pair(b.public(), [9; 32]);
        a.send(&b.public(), b"hi", 0).unwrap();
        a.take_actions();
        a.poll(10 * params.tau_ms);
        let ev = a.take_events();
        assert!(ev.iter().any(|e| matches!(
            e,
            ClientEvent::Resent {
                reason: ResendReason::NotPosted,
                ..
            }
        )));
        assert_eq!(a.pair(&b.public()).unwrap().next_out, 3);
    }

    #[test]
    fn dummy_schedule_within_bounds() {
        let (mut a, params) = client(1);
        a.poll(0);
        let t = a.next_dummy_at.unwrap();
        assert!((1000..=params.t2_ms).contains(&t));
    }
}
