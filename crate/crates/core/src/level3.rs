//! Level-3 node: holds incoming buckets in its message repository, publishes
//! tags step by step on its bulletin board, and serves the published blobs
//! by 1-out-of-ζ oblivious transfer.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::audit::L3HopRecord;
use crate::crypto::sealed::random_box;
use crate::crypto::sign;
use crate::crypto::{KeyPair, OtSenderSession, Tag};
use crate::error::ProtocolError;
use crate::faults::{flip_random_bit, FaultKind, FaultPlan};
use crate::params::{L3Mode, NetworkParams, Topology};
use crate::protocol::{
    BoardEntry, Bucket, DeliveryBlob, NodeId, OtOffer, OtRequest, OtResponse, PublicationEntry,
    Receipt, SignedWire, TaggedMessage, Wire, PAYLOAD_LEN,
};

/// Where a repository message came from. Prefill dummies have no origin.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug)]
pub struct SlotRef {
    pub origin_l2: NodeId,
    pub round: u64,
    pub position: usize,
}

#[derive(Clone, Debug)]
struct Held {
    msg: TaggedMessage,
    slot: Option<SlotRef>,
    arrived_at_ms: u64,
    arrived_step: u64,
}

#[derive(Clone, Debug)]
struct RepoBucket {
    held: Vec<Held>,
    steps_left: usize,
}

#[derive(Clone, Debug)]
struct BucketLog {
    bucket: Bucket,
    arrived_at_ms: u64,
    /// Ordinal per position once published.
    published: Vec<Option<u64>>,
}

/// One message leaving the repository.
#[derive(Clone, Debug)]
pub struct Published {
    pub entry: PublicationEntry,
    pub slot: Option<SlotRef>,
    pub arrived_at_ms: u64,
    /// Publication steps spent in the repository, counting this one.
    pub dwell_steps: u64,
    /// Set when this node deliberately altered the blob.
    pub tampered: Option<(TaggedMessage, FaultKind)>,
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub step: u64,
    pub published: Vec<Published>,
}

pub struct Level3Node {
    id: NodeId,
    keys: KeyPair,
    params: NetworkParams,
    topology: Topology,
    mode: L3Mode,
    buckets: VecDeque<RepoBucket>,
    pool: Vec<Held>,
    /// Messages that arrived in pool mode since the last step.
    pool_inflow: usize,
    step: u64,
    repository: VecDeque<PublicationEntry>,
    board: VecDeque<BoardEntry>,
    next_ordinal: u64,
    logs: BTreeMap<(NodeId, u64), BucketLog>,
    blob_log: BTreeMap<u64, PublicationEntry>,
    sessions: BTreeMap<u64, (OtSenderSession, Vec<Vec<u8>>)>,
    /// Signed dummy blobs that pad young OT windows, made once and reused.
    padding: Vec<Vec<u8>>,
    next_session: u64,
    persist: Option<BufWriter<File>>,
    fault: Option<FaultPlan>,
    rng: ChaCha20Rng,
}

impl Level3Node {
    pub fn new(
        id: NodeId,
        keys: KeyPair,
        params: NetworkParams,
        topology: Topology,
        seed: u64,
    ) -> Self {
        Self {
            id,
            keys,
            mode: params.l3_mode,
            params,
            topology,
            buckets: VecDeque::new(),
            pool: Vec::new(),
            pool_inflow: 0,
            step: 0,
            repository: VecDeque::new(),
            board: VecDeque::new(),
            next_ordinal: 0,
            logs: BTreeMap::new(),
            blob_log: BTreeMap::new(),
            sessions: BTreeMap::new(),
            padding: Vec::new(),
            next_session: 1,
            persist: None,
            fault: None,
            rng: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn set_fault(&mut self, plan: Option<FaultPlan>) {
        self.fault = plan;
    }

    pub fn mode(&self) -> L3Mode {
        self.mode
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    fn dummy_message(&mut self) -> TaggedMessage {
        TaggedMessage {
            m: random_box(PAYLOAD_LEN, &mut self.rng),
            tag: Tag(self.rng.gen()),
        }
    }

    fn dummy_held(&mut self, now_ms: u64) -> Held {
        Held {
            msg: self.dummy_message(),
            slot: None,
            arrived_at_ms: now_ms,
            arrived_step: self.step,
        }
    }

    /// Fills the repository with dummy messages as if `feeders` Level-2
    /// nodes had been sending for a while, so the first steps publish full
    /// lists.
    pub fn prefill(&mut self, feeders: usize, now_ms: u64) {
        let per_step = self.params.draw_per_bucket();
        let lambda = self.params.lambda;
        match self.mode {
            L3Mode::Standard => {
                for steps_left in 1..lambda {
                    for _ in 0..feeders {
                        let held = (0..steps_left * per_step)
                            .map(|_| self.dummy_held(now_ms))
                            .collect();
                        self.buckets.push_back(RepoBucket { held, steps_left });
                    }
                }
            }
            L3Mode::Pool => {
                // steady-state pool minus the bucket about to arrive
                let n = feeders * per_step * lambda * (lambda - 1) / 2;
                for _ in 0..n {
                    let h = self.dummy_held(now_ms);
                    self.pool.push(h);
                }
            }
        }
    }

    /// Number of messages currently waiting for publication.
    pub fn repository_len(&self) -> usize {
        self.buckets.iter().map(|b| b.held.len()).sum::<usize>() + self.pool.len()
    }

    /// Messages waiting for publication.
    pub fn held(&self) -> impl Iterator<Item = &TaggedMessage> + '_ {
        self.buckets
            .iter()
            .flat_map(|b| b.held.iter())
            .chain(&self.pool)
            .map(|h| &h.msg)
    }

    /// Accepts a signed bucket from a Level-2 node and returns a receipt.
    pub fn receive_bucket(
        &mut self,
        bucket: Bucket,
        now_ms: u64,
    ) -> Result<Receipt, ProtocolError> {
        let pk = self
            .topology
            .l2_key(bucket.origin_l2)
            .ok_or(ProtocolError::UnknownNode(bucket.origin_l2))?;
        if bucket.target_l3 != self.id || !bucket.verify_sig(pk) {
            return Err(ProtocolError::BadSignature(bucket.origin_l2));
        }
        let digest = bucket.digest();
        let key = (bucket.origin_l2, bucket.round);
        if let Some(log) = self.logs.get(&key) {
            if log.bucket.digest() == digest {
                return Ok(Receipt::new(self.id, digest, &self.keys));
            }
            return Err(ProtocolError::DuplicateBucket {
                origin: bucket.origin_l2,
                round: bucket.round,
            });
        }
        let held: Vec<Held> = bucket
            .messages
            .iter()
            .enumerate()
            .map(|(position, msg)| Held {
                msg: msg.clone(),
                slot: Some(SlotRef {
                    origin_l2: bucket.origin_l2,
                    round: bucket.round,
                    position,
                }),
                arrived_at_ms: now_ms,
                arrived_step: self.step,
            })
            .collect();
        let n = held.len();
        match self.mode {
            L3Mode::Standard => self.buckets.push_back(RepoBucket {
                held,
                steps_left: self.params.lambda,
            }),
            L3Mode::Pool => {
                self.pool.extend(held);
                self.pool_inflow += n;
            }
        }
        self.logs.insert(
            key,
            BucketLog {
                published: vec![None; n],
                bucket,
                arrived_at_ms: now_ms,
            },
        );
        Ok(Receipt::new(self.id, digest, &self.keys))
    }

    fn draw(&mut self) -> Vec<Held> {
        let mut out = Vec::new();
        match self.mode {
            L3Mode::Standard => {
                for b in self.buckets.iter_mut() {
                    let take = b.held.len().div_ceil(b.steps_left.max(1));
                    let mut idx = sample(&mut self.rng, b.held.len(), take).into_vec();
                    idx.sort_unstable_by(|a, b| b.cmp(a));
                    for i in idx {
                        out.push(b.held.swap_remove(i));
                    }
                    b.steps_left = b.steps_left.saturating_sub(1);
                }
                self.buckets
                    .retain(|b| !b.held.is_empty() || b.steps_left > 0);
            }
            L3Mode::Pool => {
                let take = self.pool_inflow.min(self.pool.len());
                self.pool_inflow = 0;
                let mut idx = sample(&mut self.rng, self.pool.len(), take).into_vec();
                idx.sort_unstable_by(|a, b| b.cmp(a));
                for i in idx {
                    out.push(self.pool.swap_remove(i));
                }
            }
        }
        out
    }

    /// One publication step, run every τ/λ.
    pub fn publication_step(&mut self, now_ms: u64) -> StepOutput {
        self.step += 1;
        let mut drawn = self.draw();
        // publication order within a step carries no information
        for i in (1..drawn.len()).rev() {
            let j = self.rng.gen_range(0..=i);
            drawn.swap(i, j);
        }
        let mut published = Vec::with_capacity(drawn.len());
        for held in drawn {
            let mut blob = DeliveryBlob::new(self.id, &held.msg, &self.keys);
            let mut tampered = None;
            if let Some(plan) = self.fault.clone() {
                if let Some(kind) = plan.draw(&mut self.rng) {
                    flip_random_bit(&mut blob.m.body, 0, &mut self.rng);
                    if kind == FaultKind::ResignAltered {
                        blob.sig = sign::sign(&self.keys, &blob.signing_bytes());
                    }
                    tampered = Some((held.msg.clone(), kind));
                }
            }
            let entry = PublicationEntry {
                tag: held.msg.tag,
                ordinal: self.next_ordinal,
                published_at_ms: now_ms,
                blob,
            };
            self.next_ordinal += 1;
            if let Some(slot) = held.slot {
                if let Some(log) = self.logs.get_mut(&(slot.origin_l2, slot.round)) {
                    log.published[slot.position] = Some(entry.ordinal);
                }
            }
            self.append(entry.clone());
            published.push(Published {
                entry,
                slot: held.slot,
                arrived_at_ms: held.arrived_at_ms,
                dwell_steps: self.step - held.arrived_step,
                tampered,
            });
        }
        self.expire(now_ms);
        StepOutput {
            step: self.step,
            published,
        }
    }

    fn append(&mut self, entry: PublicationEntry) {
        if let Some(w) = self.persist.as_mut() {
            let bytes = entry.encode();
            // a failed write only loses the offline copy
            let _ = w
                .write_all(&(bytes.len() as u32).to_be_bytes())
                .and_then(|_| w.write_all(&bytes))
                .and_then(|_| w.flush());
        }
        self.board.push_back(BoardEntry {
            tag: entry.tag,
            ordinal: entry.ordinal,
            published_at_ms: entry.published_at_ms,
        });
        self.blob_log.insert(entry.ordinal, entry.clone());
        self.repository.push_back(entry);
        while self.repository.len() > self.params.gamma {
            self.repository.pop_front();
        }
    }

    fn expire(&mut self, now_ms: u64) {
        let cutoff = now_ms.saturating_sub(self.params.h_ms);
        while self
            .repository
            .front()
            .is_some_and(|e| e.published_at_ms < cutoff)
        {
            self.repository.pop_front();
        }
        while self
            .board
            .front()
            .is_some_and(|e| e.published_at_ms < cutoff)
        {
            self.board.pop_front();
        }
        while let Some(entry) = self.blob_log.first_entry() {
            if entry.get().published_at_ms >= cutoff {
                break;
            }
            entry.remove();
        }
        self.logs.retain(|_, l| l.arrived_at_ms >= cutoff);
    }

    /// Board rows with ordinal at least `from`.
    pub fn board_read(&self, from: u64) -> Vec<BoardEntry> {
        let start = self.board.partition_point(|e| e.ordinal < from);
        self.board.range(start..).copied().collect()
    }

    pub fn next_ordinal(&self) -> u64 {
        self.next_ordinal
    }

    pub fn repository(&self) -> impl Iterator<Item = &PublicationEntry> {
        self.repository.iter()
    }

    /// Opens an OT session over the ζ most recent blobs, padded with signed
    /// dummy blobs while the repository is young.
    pub fn ot_init(&mut self) -> OtOffer {
        let zeta = self.params.zeta;
        let skip = self.repository.len().saturating_sub(zeta);
        let mut strings: Vec<Vec<u8>> = self
            .repository
            .iter()
            .skip(skip)
            .map(|e| e.blob.encode())
            .collect();
        let real_count = strings.len();
        let first_ordinal = self
            .repository
            .get(skip)
            .map_or(self.next_ordinal, |e| e.ordinal);
        let missing = zeta - strings.len();
        while self.padding.len() < missing {
            let msg = self.dummy_message();
            let blob = DeliveryBlob::new(self.id, &msg, &self.keys).encode();
            self.padding.push(blob);
        }
        strings.extend_from_slice(&self.padding[..missing]);
        let session = self.next_session;
        self.next_session += 1;
        let ot = OtSenderSession::new(zeta, &mut self.rng);
        let offer = OtOffer {
            node: self.id,
            session,
            first_ordinal,
            n: zeta as u32,
            real_count: real_count as u32,
            sender_point: ot.sender_point(),
        };
        self.sessions.insert(session, (ot, strings));
        offer
    }

    /// Answers an OT request and forgets the session.
    pub fn ot_respond(&mut self, request: &OtRequest) -> Result<OtResponse, ProtocolError> {
        let (ot, strings) = self
            .sessions
            .remove(&request.session)
            .ok_or(ProtocolError::UnknownSession(request.session))?;
        let ciphertexts = ot.respond(&request.receiver_point, &strings)?;
        let mut resp = OtResponse {
            node: self.id,
            session: request.session,
            sender_point: ot.sender_point(),
            receiver_point: request.receiver_point,
            ciphertexts,
            sig: sign::Signature([0; 64]),
        };
        resp.sig = sign::sign(&self.keys, &resp.signing_bytes());
        Ok(resp)
    }

    /// Forgets a session the client abandoned.
    pub fn ot_cancel(&mut self, session: u64) -> bool {
        self.sessions.remove(&session).is_some()
    }

    pub fn open_sessions(&self) -> usize {
        self.sessions.len()
    }

    /// Hash of everything the node keeps: repository, board, logs, open
    /// sessions and counters.
    pub fn state_digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(b"aot/l3/state");
        h.update(self.step.to_be_bytes());
        h.update(self.next_ordinal.to_be_bytes());
        h.update(self.next_session.to_be_bytes());
        for b in &self.buckets {
            h.update((b.steps_left as u64).to_be_bytes());
            for m in &b.held {
                h.update(m.msg.digest());
            }
        }
        for m in &self.pool {
            h.update(m.msg.digest());
        }
        for e in &self.repository {
            h.update(e.encode());
        }
        for e in &self.board {
            h.update(e.encode());
        }
        for (k, (ot, strings)) in &self.sessions {
            h.update(k.to_be_bytes());
            h.update(ot.sender_point().as_bytes());
            for s in strings {
                h.update(s);
            }
        }
        for ((origin, round), log) in &self.logs {
            h.update(origin.0.to_be_bytes());
            h.update(round.to_be_bytes());
            h.update(log.bucket.digest());
            for p in &log.published {
                h.update(p.map_or(u64::MAX, |o| o).to_be_bytes());
            }
        }
        h.finalize().into()
    }

    /// Audit lookup for one bucket slot.
    pub fn audit_by_bucket(
        &self,
        origin_l2: NodeId,
        round: u64,
        position: usize,
    ) -> Option<L3HopRecord> {
        let log = self.logs.get(&(origin_l2, round))?;
        let ordinal = *log.published.get(position)?;
        Some(L3HopRecord {
            bucket: log.bucket.clone(),
            position,
            publication: ordinal.and_then(|o| self.blob_log.get(&o).cloned()),
            pending: ordinal.is_none(),
        })
    }

    /// Appends every future publication to `path` as length-prefixed
    /// encoded entries.
    pub fn persist_to(&mut self, path: &Path) -> std::io::Result<()> {
        let f = OpenOptions::new().create(true).append(true).open(path)?;
        self.persist = Some(BufWriter::new(f));
        Ok(())
    }

    /// Reloads the publication repository and board from a file written by
    /// [`persist_to`](Self::persist_to), e.g. after a restart.
    pub fn restore_from(&mut self, path: &Path, now_ms: u64) -> Result<usize, ProtocolError> {
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|_| ProtocolError::Wire(crate::protocol::WireError::Malformed("log file")))?;
        let mut rest = bytes.as_slice();
        let mut count = 0;
        while rest.len() >= 4 {
            let len = u32::from_be_bytes(rest[..4].try_into().expect("4 bytes")) as usize;
            if rest.len() < 4 + len {
                // a torn final record from a crash is ignored
                break;
            }
            let entry = PublicationEntry::decode(&rest[4..4 + len])?;
            rest = &rest[4 + len..];
            if entry.ordinal < self.next_ordinal {
                continue;
            }
            self.next_ordinal = entry.ordinal + 1;
            self.board.push_back(BoardEntry {
                tag: entry.tag,
                ordinal: entry.ordinal,
                published_at_ms: entry.published_at_ms,
            });
            self.blob_log.insert(entry.ordinal, entry.clone());
            self.repository.push_back(entry);
            while self.repository.len() > self.params.gamma {
                self.repository.pop_front();
            }
            count += 1;
        }
        self.expire(now_ms);
        Ok(count)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::ot_receiver_choose;
    use crate::protocol::SignedWire;

    fn setup(mode: L3Mode, lambda: usize) -> (Level3Node, KeyPair, NetworkParams) {
        let params = NetworkParams {
            lambda,
            beta2: 8,
            alpha: 2,
            zeta: 16,
            gamma: 16,
            tau_ms: 4000,
            l3_mode: mode,
            ..Default::default()
        };
        let (topo, keys) = Topology::generate(&params, 5);
        let l2 = keys
            .iter()
            .find(|(id, _)| topo.l2_key(*id).is_some())
            .unwrap()
            .1
            .clone();
        let (l3_id, l3_keys) = keys
            .iter()
            .find(|(id, _)| topo.l3_ids().contains(id))
            .cloned()
            .unwrap();
        (
            Level3Node::new(l3_id, l3_keys, params.clone(), topo, 1),
            l2,
            params,
        )
    }

    fn bucket(node: &Level3Node, l2: &KeyPair, round: u64, n: usize, seed: u64) -> Bucket {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut b = Bucket {
            round,
            origin_l2: NodeId(3),
            target_l3: node.id,
            messages: (0..n)
                .map(|_| TaggedMessage {
                    m: random_box(PAYLOAD_LEN, &mut rng),
                    tag: Tag(rng.gen()),
                })
                .collect(),
            sig: sign::Signature([0; 64]),
        };
        b.sig = sign::sign(l2, &b.signing_bytes());
        b
    }

    #[test]
    fn bucket_drains_over_lambda_steps() {
        let (mut node, l2, params) = setup(L3Mode::Standard, 4);
        node.receive_bucket(bucket(&node, &l2, 1, params.bucket_size(), 1), 0)
            .unwrap();
        let mut seen = 0;
        for _ in 0..4 {
            let out = node.publication_step(0);
            assert_eq!(out.published.len(), params.draw_per_bucket());
            seen += out.published.len();
        }
        assert_eq!(seen, params.bucket_size());
        assert_eq!(node.repository_len(), 0);
    }

    #[test]
    fn lambda_one_publishes_whole_bucket() {
        let (mut node, l2, params) = setup(L3Mode::Standard, 1);
        node.receive_bucket(bucket(&node, &l2, 1, params.bucket_size(), 1), 0)
            .unwrap();
        assert_eq!(
            node.publication_step(0).published.len(),
            params.bucket_size()
        );
    }

    #[test]
    fn prefill_gives_full_first_steps() {
        let (mut node, l2, params) = setup(L3Mode::Standard, 4);
        node.prefill(1, 0);
        assert_eq!(node.repository_len(), params.draw_per_bucket() * 6);
        node.receive_bucket(bucket(&node, &l2, 1, params.bucket_size(), 1), 0)
            .unwrap();
        assert_eq!(node.repository_len(), params.beta2 * 5 / 4);
        let out = node.publication_step(0);
        assert_eq!(out.published.len(), params.bucket_size());
    }

    #[test]
    fn rejects_foreign_signature() {
        let (mut node, _, params) = setup(L3Mode::Standard, 4);
        let b = bucket(
            &node,
            &crate::crypto::keygen(b"stranger"),
            1,
            params.bucket_size(),
            1,
        );
        assert!(node.receive_bucket(b, 0).is_err());
    }

    #[test]
    fn ot_recovers_published_blob() {
        let (mut node, l2, params) = setup(L3Mode::Standard, 1);
        node.receive_bucket(bucket(&node, &l2, 1, params.bucket_size(), 1), 0)
            .unwrap();
        let out = node.publication_step(0);
        let target = &out.published[2].entry;
        let offer = node.ot_init();
        assert_eq!(offer.real_count as usize, params.bucket_size());
        let choice = offer.choice_for(target.ordinal).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let (point, recv) = ot_receiver_choose(16, &offer.sender_point, choice, &mut rng).unwrap();
        let resp = node
            .ot_respond(&OtRequest {
                session: offer.session,
                receiver_point: point,
            })
            .unwrap();
        assert!(resp.verify_sig(&node.keys.public));
        let blob = DeliveryBlob::decode(&recv.recover(&resp.ciphertexts).unwrap()).unwrap();
        assert_eq!(blob, target.blob);
        assert!(blob.verify_sig(&node.keys.public));
        assert_eq!(node.open_sessions(), 0);
    }

    #[test]
    fn state_independent_of_choice() {
        let digests: Vec<[u8; 32]> = [1usize, 7, 16]
            .iter()
            .map(|&choice| {
                let (mut node, l2, params) = setup(L3Mode::Standard, 1);
                node.receive_bucket(bucket(&node, &l2, 1, params.bucket_size(), 1), 0)
                    .unwrap();
                node.publication_step(0);
                let offer = node.ot_init();
                let mut rng = ChaCha20Rng::seed_from_u64(choice as u64);
                let (point, _) =
                    ot_receiver_choose(16, &offer.sender_point, choice, &mut rng).unwrap();
                node.ot_respond(&OtRequest {
                    session: offer.session,
                    receiver_point: point,
                })
                .unwrap();
                node.state_digest()
            })
            .collect();
        assert!(digests.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn repository_capped_at_gamma() {
        let (mut node, l2, params) = setup(L3Mode::Standard, 1);
        for r in 1..=5 {
            node.receive_bucket(bucket(&node, &l2, r, params.bucket_size(), r), 0)
                .unwrap();
            node.publication_step(0);
        }
        assert_eq!(node.repository().count(), params.gamma);
        assert_eq!(node.board_read(0).len(), 20);
        assert_eq!(node.board_read(18).len(), 2);
    }

    #[test]
    fn persisted_log_restores() {
        let dir = std::env::temp_dir().join(format!("aot-l3-{}", std::process::id()));
        let _ = std::fs::remove_file(&dir);
        let (mut node, l2, params) = setup(L3Mode::Standard, 1);
        node.persist_to(&dir).unwrap();
        node.receive_bucket(bucket(&node, &l2, 1, params.bucket_size(), 1), 0)
            .unwrap();
        node.publication_step(0);
        let (mut fresh, _, _) = setup(L3Mode::Standard, 1);
        assert_eq!(fresh.restore_from(&dir, 0).unwrap(), params.bucket_size());
        assert_eq!(fresh.board_read(0), node.board_read(0));
        std::fs::remove_file(&dir).unwrap();
    }
}
