//! Level-2 node: opens envelopes, drops replays and stale messages, shuffles
//! β2-message batches under a committed permutation, adds dummy messages,
//! and dispatches buckets according to the round's division.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::audit::{Evidence, L2Disposition, L2HopRecord};
use crate::crypto::sealed::{prove_decryption, random_box};
use crate::crypto::sign::{self, Signature};
use crate::crypto::{commit_perm, KeyPair, PermOpening, Permutation, Tag};
use crate::division::{compute_partition, RoundPartition};
use crate::error::ProtocolError;
use crate::faults::{flip_random_bit, FaultKind, FaultPlan};
use crate::params::{NetworkParams, Topology};
use crate::protocol::{
    open_envelope, Batch, Bucket, CommitScope, CommitmentNotice, NodeId, Receipt, SignedContainer,
    SignedWire, TaggedMessage, PAYLOAD_LEN,
};

/// Exact record of recently seen `(payload hash, tag)` pairs.
#[derive(Clone, Debug, Default)]
pub struct ReplayCache {
    window_ms: u64,
    seen: BTreeMap<([u8; 32], Tag), (u64, InputRef)>,
    order: VecDeque<(u64, [u8; 32], Tag)>,
}

impl ReplayCache {
    pub fn new(window_ms: u64) -> Self {
        Self {
            window_ms,
            ..Default::default()
        }
    }

    fn key(msg: &TaggedMessage) -> ([u8; 32], Tag) {
        (msg.m.digest(), msg.tag)
    }

    pub fn evict(&mut self, now_ms: u64) {
        while let Some(&(t, h, tag)) = self.order.front() {
            if now_ms.saturating_sub(t) <= self.window_ms {
                break;
            }
            self.order.pop_front();
            if self
                .seen
                .get(&(h, tag))
                .is_some_and(|(seen_at, _)| *seen_at == t)
            {
                self.seen.remove(&(h, tag));
            }
        }
    }

    /// Earlier occurrence of `msg` within the window, if any.
    pub fn lookup(&self, msg: &TaggedMessage) -> Option<InputRef> {
        self.seen.get(&Self::key(msg)).map(|(_, r)| *r)
    }

    pub fn insert(&mut self, msg: &TaggedMessage, at: InputRef, now_ms: u64) {
        let (h, tag) = Self::key(msg);
        self.seen.insert((h, tag), (now_ms, at));
        self.order.push_back((now_ms, h, tag));
    }

    pub fn len(&self) -> usize {
        self.seen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seen.is_empty()
    }
}

/// A position in a received Level-1 container.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug, Serialize, Deserialize)]
pub struct InputRef {
    pub container: [u8; 32],
    pub position: usize,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum DropCause {
    Integrity,
    WrongNode,
    /// Timestamp outside the replay window.
    Stale,
    Replay {
        earlier: InputRef,
    },
}

#[derive(Clone, Debug)]
pub struct BatchRecord {
    pub round: u64,
    pub inputs: Vec<(TaggedMessage, InputRef)>,
    pub opening: PermOpening,
    pub notice: CommitmentNotice,
    pub output: Vec<TaggedMessage>,
    pub partition: RoundPartition,
    /// Real buckets by block index.
    pub real: Vec<Bucket>,
    pub dummy: Vec<Bucket>,
}

#[derive(Clone, Debug)]
pub struct Dispatch {
    pub notice: CommitmentNotice,
    pub round: u64,
    /// α real buckets followed by ρ dummy buckets.
    pub buckets: Vec<Bucket>,
    /// Messages this node deliberately altered (original, kind).
    pub tampered: Vec<(TaggedMessage, FaultKind)>,
}

#[derive(Clone, Debug)]
pub struct IngestOutput {
    pub receipt: Receipt,
    pub accepted: usize,
    pub drops: Vec<(usize, DropCause)>,
    pub evidence: Vec<Evidence>,
    pub dispatches: Vec<Dispatch>,
}

#[derive(Clone, Debug)]
struct Outstanding {
    bucket: Bucket,
    deadline_ms: u64,
    round: u64,
    block: Option<usize>,
    tried: BTreeSet<NodeId>,
}

pub struct Level2Node {
    id: NodeId,
    keys: KeyPair,
    params: NetworkParams,
    topology: Topology,
    l3_ids: Vec<NodeId>,
    xor: [u8; 32],
    replay: ReplayCache,
    buffer: Vec<(TaggedMessage, InputRef)>,
    next_round: u64,
    containers: BTreeMap<[u8; 32], SignedContainer>,
    dispositions: BTreeMap<InputRef, L2Disposition>,
    batches: BTreeMap<u64, BatchRecord>,
    bucket_index: BTreeMap<[u8; 32], (u64, Option<usize>)>,
    receipts: BTreeMap<[u8; 32], Receipt>,
    outstanding: BTreeMap<[u8; 32], Outstanding>,
    pending_manual: BTreeMap<u64, Vec<(TaggedMessage, InputRef)>>,
    /// How long to wait for a Level-3 receipt before failing over.
    pub receipt_timeout_ms: u64,
    fault: Option<FaultPlan>,
    rng: ChaCha20Rng,
}

impl Level2Node {
    pub fn new(
        id: NodeId,
        keys: KeyPair,
        params: NetworkParams,
        topology: Topology,
        xor: [u8; 32],
        seed: u64,
    ) -> Self {
        let mut l3_ids = topology.l3_ids();
        l3_ids.sort();
        Self {
            id,
            keys,
            replay: ReplayCache::new(params.replay_window_ms),
            params,
            topology,
            l3_ids,
            xor,
            buffer: Vec::new(),
            next_round: 1,
            containers: BTreeMap::new(),
            dispositions: BTreeMap::new(),
            batches: BTreeMap::new(),
            bucket_index: BTreeMap::new(),
            receipts: BTreeMap::new(),
            outstanding: BTreeMap::new(),
            pending_manual: BTreeMap::new(),
            receipt_timeout_ms: 2_000,
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

    pub fn buffered(&self) -> usize {
        self.buffer.len()
    }

    pub fn replay_cache(&self) -> &ReplayCache {
        &self.replay
    }

    pub fn current_round(&self) -> u64 {
        self.next_round
    }

    pub fn batch(&self, round: u64) -> Option<&BatchRecord> {
        self.batches.get(&round)
    }

    /// Opens every envelope of a Level-1 container, keeps the valid fresh
    /// ones, and seals and dispatches every batch that fills.
    pub fn ingest(
        &mut self,
        container: SignedContainer,
        now_ms: u64,
    ) -> Result<IngestOutput, ProtocolError> {
        let l1_pk = self
            .topology
            .l1
            .iter()
            .find(|n| n.id == container.l1)
            .map(|n| n.public)
            .ok_or(ProtocolError::UnknownNode(container.l1))?;
        if !container.verify_sig(&l1_pk) || container.l2 != self.id {
            return Err(ProtocolError::BadSignature(container.l1));
        }
        let digest = container.digest();
        let receipt = Receipt::new(self.id, digest, &self.keys);
        if self.containers.contains_key(&digest) {
            // a container replayed as a whole is acknowledged but not reprocessed
            return Ok(IngestOutput {
                receipt,
                accepted: 0,
                drops: Vec::new(),
                evidence: Vec::new(),
                dispatches: Vec::new(),
            });
        }
        self.replay.evict(now_ms);
        let mut drops = Vec::new();
        let mut evidence = Vec::new();
        let mut accepted = 0;
        for (position, env) in container.entries.iter().enumerate() {
            let at = InputRef {
                container: digest,
                position,
            };
            let inner = match open_envelope(self.id, &self.keys, env) {
                Ok(inner) => inner,
                Err(ProtocolError::WrongNode { .. }) => {
                    drops.push((position, DropCause::WrongNode));
                    self.dispositions
                        .insert(at, L2Disposition::Dropped(DropCause::WrongNode));
                    continue;
                }
                Err(_) => {
                    drops.push((position, DropCause::Integrity));
                    self.dispositions
                        .insert(at, L2Disposition::Dropped(DropCause::Integrity));
                    evidence.push(Evidence::L2IntegrityFailure {
                        l2: self.id,
                        container: container.clone(),
                        position,
                        proof: prove_decryption(&self.keys, &env.inner, &mut self.rng).ok(),
                    });
                    continue;
                }
            };
            let ts_ms = inner.ts.saturating_mul(1000);
            let window = self.params.replay_window_ms;
            if ts_ms.saturating_add(window) < now_ms || ts_ms > now_ms.saturating_add(window) {
                drops.push((position, DropCause::Stale));
                self.dispositions
                    .insert(at, L2Disposition::Dropped(DropCause::Stale));
                continue;
            }
            let msg = TaggedMessage {
                m: inner.m,
                tag: inner.tag,
            };
            if let Some(earlier) = self.replay.lookup(&msg) {
                let cause = DropCause::Replay { earlier };
                drops.push((position, cause));
                self.dispositions.insert(at, L2Disposition::Dropped(cause));
                continue;
            }
            self.replay.insert(&msg, at, now_ms);
            self.dispositions.insert(at, L2Disposition::Buffered);
            self.buffer.push((msg, at));
            accepted += 1;
        }
        self.containers.insert(digest, container);

        let mut dispatches = Vec::new();
        while self.buffer.len() >= self.params.beta2 {
            let (batch, record_inputs, opening) = self.seal_batch_inner();
            dispatches.push(self.dispatch_inner(batch, record_inputs, opening, now_ms));
        }
        Ok(IngestOutput {
            receipt,
            accepted,
            drops,
            evidence,
            dispatches,
        })
    }

    fn seal_batch_inner(&mut self) -> (Batch, Vec<(TaggedMessage, InputRef)>, PermOpening) {
        let inputs: Vec<(TaggedMessage, InputRef)> =
            self.buffer.drain(..self.params.beta2).collect();
        let msgs: Vec<TaggedMessage> = inputs.iter().map(|(m, _)| m.clone()).collect();
        let perm = Permutation::random(msgs.len(), &mut self.rng);
        let (commitment, opening) = commit_perm(&perm, &mut self.rng);
        let round = self.next_round;
        self.next_round += 1;
        (
            Batch {
                round,
                messages: perm.apply(&msgs),
                perm_commitment: commitment,
            },
            inputs,
            opening,
        )
    }

    /// Shuffles exactly β2 buffered messages into a batch, if enough are
    /// buffered. The batch is not dispatched.
    pub fn seal_batch(&mut self) -> Option<(Batch, PermOpening)> {
        if self.buffer.len() < self.params.beta2 {
            return None;
        }
        let (batch, inputs, opening) = self.seal_batch_inner();
        // keep the inputs so an explicit dispatch can be audited
        self.pending_manual.insert(batch.round, inputs);
        Some((batch, opening))
    }

    /// `ρβ2/α` random messages shaped exactly like real ones.
    pub fn make_dummies(&mut self, count: usize) -> Vec<TaggedMessage> {
        (0..count)
            .map(|_| TaggedMessage {
                m: random_box(PAYLOAD_LEN, &mut self.rng),
                tag: Tag(self.rng.gen()),
            })
            .collect()
    }

    pub fn partition(&self, round: u64) -> RoundPartition {
        compute_partition(
            round,
            &self.xor,
            &self.l3_ids,
            self.params.alpha,
            self.params.beta2,
        )
    }

    fn sign_bucket(&self, round: u64, target: NodeId, messages: Vec<TaggedMessage>) -> Bucket {
        let mut b = Bucket {
            round,
            origin_l2: self.id,
            target_l3: target,
            messages,
            sig: Signature([0; 64]),
        };
        b.sig = sign::sign(&self.keys, &b.signing_bytes());
        b
    }

    /// Splits a sealed batch into real buckets for the active nodes and adds
    /// one dummy bucket per passive node.
    pub fn dispatch(&mut self, batch: Batch, opening: PermOpening, now_ms: u64) -> Dispatch {
        let inputs = self
            .pending_manual
            .remove(&batch.round)
            .expect("batch produced by seal_batch");
        self.dispatch_inner(batch, inputs, opening, now_ms)
    }

    fn dispatch_inner(
        &mut self,
        batch: Batch,
        inputs: Vec<(TaggedMessage, InputRef)>,
        opening: PermOpening,
        now_ms: u64,
    ) -> Dispatch {
        let round = batch.round;
        let partition = self.partition(round);
        let mut notice = CommitmentNotice {
            node: self.id,
            scope: CommitScope::Batch,
            seq: round,
            commitment: batch.perm_commitment,
            sig: Signature([0; 64]),
        };
        notice.sig = sign::sign(&self.keys, &notice.signing_bytes());

        let mut tampered = Vec::new();
        let mut real = Vec::new();
        for (block_index, block) in partition.blocks.iter().enumerate() {
            let mut msgs: Vec<TaggedMessage> =
                block.iter().map(|&j| batch.messages[j].clone()).collect();
            if let Some(plan) = self.fault.clone() {
                for msg in msgs.iter_mut() {
                    let Some(kind) = plan.draw(&mut self.rng) else {
                        continue;
                    };
                    let original = msg.clone();
                    match kind {
                        FaultKind::AlterTag => msg.tag = Tag(self.rng.gen()),
                        _ => {
                            let mut body = msg.m.body.clone();
                            flip_random_bit(&mut body, 0, &mut self.rng);
                            msg.m.body = body;
                        }
                    }
                    tampered.push((original, kind));
                }
            }
            real.push(self.sign_bucket(round, partition.active[block_index], msgs));
        }
        let size = self.params.bucket_size();
        let dummy: Vec<Bucket> = partition
            .passive
            .clone()
            .into_iter()
            .map(|target| {
                let msgs = self.make_dummies(size);
                self.sign_bucket(round, target, msgs)
            })
            .collect();

        let deadline_ms = now_ms + self.receipt_timeout_ms;
        for (block, b) in real
            .iter()
            .enumerate()
            .map(|(i, b)| (Some(i), b))
            .chain(dummy.iter().map(|b| (None, b)))
        {
            let digest = b.digest();
            self.bucket_index.insert(digest, (round, block));
            self.outstanding.insert(
                digest,
                Outstanding {
                    bucket: b.clone(),
                    deadline_ms,
                    round,
                    block,
                    tried: BTreeSet::from([b.target_l3]),
                },
            );
        }

        let output = batch.messages.clone();
        let mut perm_of_output = vec![usize::MAX; output.len()];
        for (j, &i) in opening.perm.images().iter().enumerate() {
            perm_of_output[j] = i as usize;
        }
        for (block_index, block) in partition.blocks.iter().enumerate() {
            for (pos, &j) in block.iter().enumerate() {
                let input_index = perm_of_output[j];
                let (_, at) = inputs[input_index];
                self.dispositions.insert(
                    at,
                    L2Disposition::Batched {
                        round,
                        input_index,
                        output_index: j,
                        block: block_index,
                        bucket_position: pos,
                    },
                );
            }
        }
        let mut buckets = real.clone();
        buckets.extend(dummy.iter().cloned());
        self.batches.insert(
            round,
            BatchRecord {
                round,
                inputs,
                opening,
                notice: notice.clone(),
                output,
                partition,
                real,
                dummy,
            },
        );
        Dispatch {
            notice,
            round,
            buckets,
            tampered,
        }
    }

    pub fn on_bucket_receipt(&mut self, receipt: Receipt) -> bool {
        let Some(o) = self.outstanding.get(&receipt.digest) else {
            return false;
        };
        let Some(pk) = self.topology.public_key(o.bucket.target_l3) else {
            return false;
        };
        if receipt.node != o.bucket.target_l3 || !receipt.verify_sig(pk) {
            return false;
        }
        self.outstanding.remove(&receipt.digest);
        self.receipts.insert(receipt.digest, receipt);
        true
    }

    /// Re-sends every bucket whose receipt is overdue to a substitute
    /// Level-3 node. Returns the re-signed buckets to send.
    pub fn poll_timeouts(&mut self, now_ms: u64) -> Vec<Bucket> {
        let overdue: Vec<[u8; 32]> = self
            .outstanding
            .iter()
            .filter(|(_, o)| o.deadline_ms <= now_ms)
            .map(|(d, _)| *d)
            .collect();
        let mut resend = Vec::new();
        for digest in overdue {
            let o = self.outstanding.remove(&digest).expect("listed");
            let Some(&substitute) = self.l3_ids.iter().find(|id| !o.tried.contains(id)) else {
                continue;
            };
            let bucket = self.sign_bucket(o.round, substitute, o.bucket.messages.clone());
            let new_digest = bucket.digest();
            self.bucket_index.insert(new_digest, (o.round, o.block));
            if let (Some(block), Some(rec)) = (o.block, self.batches.get_mut(&o.round)) {
                rec.real[block] = bucket.clone();
            }
            let mut tried = o.tried;
            tried.insert(substitute);
            self.outstanding.insert(
                new_digest,
                Outstanding {
                    bucket: bucket.clone(),
                    deadline_ms: now_ms + self.receipt_timeout_ms,
                    round: o.round,
                    block: o.block,
                    tried,
                },
            );
            resend.push(bucket);
        }
        resend
    }

    pub fn outstanding(&self) -> usize {
        self.outstanding.len()
    }

    /// Audit lookup by a position in a received container. Produces a fresh
    /// decryption proof for that envelope.
    pub fn audit_by_input(&mut self, container: &[u8; 32], position: usize) -> Option<L2HopRecord> {
        let c = self.containers.get(container)?.clone();
        let env = c.entries.get(position)?;
        let at = InputRef {
            container: *container,
            position,
        };
        let disposition = self.dispositions.get(&at)?.clone();
        let proof = prove_decryption(&self.keys, &env.inner, &mut self.rng).ok();
        let batch = match &disposition {
            L2Disposition::Batched { round, block, .. } => {
                let rec = &self.batches[round];
                let bucket = rec.real[*block].clone();
                let receipt = self.receipts.get(&bucket.digest()).cloned();
                Some(crate::audit::L2BatchEvidence {
                    notice: rec.notice.clone(),
                    opening: rec.opening.clone(),
                    input: rec.inputs[match disposition {
                        L2Disposition::Batched { input_index, .. } => input_index,
                        _ => unreachable!(),
                    }]
                    .0
                    .clone(),
                    bucket,
                    l3_receipt: receipt,
                })
            }
            _ => None,
        };
        let earlier = match disposition {
            L2Disposition::Dropped(DropCause::Replay { earlier }) => {
                let ec = self.containers.get(&earlier.container)?.clone();
                let eproof = prove_decryption(
                    &self.keys,
                    &ec.entries[earlier.position].inner,
                    &mut self.rng,
                )
                .ok();
                Some((ec, earlier.position, eproof))
            }
            _ => None,
        };
        Some(L2HopRecord {
            container: c,
            position,
            proof,
            disposition,
            batch,
            earlier,
        })
    }
}

/// Hash used for a message in audit transcripts.
pub fn message_hash(msg: &TaggedMessage) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"aot/audit/msg");
    h.update(msg.digest());
    h.finalize().into()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{keygen, verify_perm};
    use crate::level1::Level1Node;
    use crate::protocol::{wrap_envelope, Submission};

    struct Fixture {
        params: NetworkParams,
        topo: Topology,
        l1: Level1Node,
        l2: Level2Node,
        l3_keys: BTreeMap<NodeId, KeyPair>,
        rng: ChaCha20Rng,
    }

    fn fixture() -> Fixture {
        let params = NetworkParams::default();
        let (topo, keys) = Topology::generate(&params, 8);
        let l1 = Level1Node::new(keys[0].0, keys[0].1.clone(), params.beta1, topo.clone(), 1);
        let l2 = Level2Node::new(
            keys[2].0,
            keys[2].1.clone(),
            params.clone(),
            topo.clone(),
            [5; 32],
            2,
        );
        let l3_keys = keys[4..].iter().cloned().collect();
        Fixture {
            params,
            topo,
            l1,
            l2,
            l3_keys,
            rng: ChaCha20Rng::seed_from_u64(3),
        }
    }

    impl Fixture {
        fn message(&mut self) -> TaggedMessage {
            TaggedMessage {
                m: random_box(PAYLOAD_LEN, &mut self.rng),
                tag: Tag(self.rng.gen()),
            }
        }

        /// A Level-1 container of β1 envelopes carrying `msgs`, built at
        /// `ts` seconds.
        fn container(&mut self, msgs: &[TaggedMessage], ts: u64) -> SignedContainer {
            let l2 = self.l2.id();
            let pk = *self.topo.l2_key(l2).unwrap();
            let mut out = None;
            for msg in msgs {
                let env = wrap_envelope(msg.m.clone(), msg.tag, l2, &pk, ts, &mut self.rng);
                let sub = Submission::new(env, &keygen(b"sender"));
                out = self.l1.accept(sub, 0, ts * 1000).unwrap().flush.or(out);
            }
            out.expect("β1 messages flush").container
        }
    }

    #[test]
    fn full_batch_dispatches_real_and_dummy_buckets() {
        let mut f = fixture();
        let msgs: Vec<TaggedMessage> = (0..f.params.beta2).map(|_| f.message()).collect();
        let c1 = f.container(&msgs[..4], 10);
        let c2 = f.container(&msgs[4..], 10);
        let out = f.l2.ingest(c1, 10_000).unwrap();
        assert_eq!((out.accepted, out.dispatches.len()), (4, 0));
        assert_eq!(f.l2.buffered(), 4);
        let out = f.l2.ingest(c2, 10_000).unwrap();
        assert_eq!(out.dispatches.len(), 1);
        let d = &out.dispatches[0];
        assert_eq!(d.buckets.len(), f.params.alpha + f.params.rho);
        let partition = f.l2.partition(d.round);
        let real: std::collections::HashSet<TaggedMessage> = d.buckets[..f.params.alpha]
            .iter()
            .flat_map(|b| b.messages.iter().cloned())
            .collect();
        assert_eq!(real, msgs.iter().cloned().collect());
        for (b, target) in d
            .buckets
            .iter()
            .zip(partition.active.iter().chain(&partition.passive))
        {
            assert_eq!(b.target_l3, *target);
            assert_eq!(b.messages.len(), f.params.bucket_size());
            assert!(b.verify_sig(f.topo.l2_key(f.l2.id()).unwrap()));
        }
        for b in &d.buckets[f.params.alpha..] {
            assert!(b.messages.iter().all(|m| !real.contains(m)));
        }
        let rec = f.l2.batch(d.round).unwrap();
        assert!(verify_perm(&d.notice.commitment, &rec.opening));
        assert_eq!(f.l2.outstanding(), d.buckets.len());
    }

    #[test]
    fn replayed_message_is_dropped_and_points_at_the_original() {
        let mut f = fixture();
        let msgs: Vec<TaggedMessage> = (0..4).map(|_| f.message()).collect();
        let c1 = f.container(&msgs, 10);
        let first = c1.digest();
        f.l2.ingest(c1, 10_000).unwrap();
        // the same (M, tag) re-wrapped in fresh envelopes
        let fresh: Vec<TaggedMessage> = (0..3).map(|_| f.message()).collect();
        let again = f.container(&[&msgs[1..2], &fresh[..]].concat(), 20);
        let out = f.l2.ingest(again.clone(), 20_000).unwrap();
        assert_eq!(out.accepted, 3);
        let (pos, cause) = out.drops[0];
        match cause {
            DropCause::Replay { earlier } => {
                assert_eq!(earlier.container, first);
                let rec = f.l2.audit_by_input(&again.digest(), pos).unwrap();
                assert!(rec.earlier.is_some());
            }
            other => panic!("unexpected {other:?}"),
        }
        // a whole container sent twice is acknowledged but not reprocessed
        let out = f.l2.ingest(again, 21_000).unwrap();
        assert_eq!((out.accepted, out.drops.len()), (0, 0));
    }

    #[test]
    fn stale_timestamp_is_dropped() {
        let mut f = fixture();
        let msgs: Vec<TaggedMessage> = (0..4).map(|_| f.message()).collect();
        let c = f.container(&msgs, 0);
        let late = f.params.replay_window_ms + 5_000;
        let out = f.l2.ingest(c, late).unwrap();
        assert_eq!(out.accepted, 0);
        assert!(out.drops.iter().all(|(_, d)| *d == DropCause::Stale));
    }

    #[test]
    fn foreign_container_is_refused() {
        let mut f = fixture();
        let msgs: Vec<TaggedMessage> = (0..4).map(|_| f.message()).collect();
        let mut c = f.container(&msgs, 1);
        c.seq += 1;
        assert!(f.l2.ingest(c, 1_000).is_err());
    }

    #[test]
    fn overdue_bucket_fails_over_to_an_untried_node() {
        let mut f = fixture();
        let msgs: Vec<TaggedMessage> = (0..f.params.beta2).map(|_| f.message()).collect();
        let c1 = f.container(&msgs[..4], 1);
        let c2 = f.container(&msgs[4..], 1);
        f.l2.ingest(c1, 1_000).unwrap();
        let d = f.l2.ingest(c2, 1_000).unwrap().dispatches.remove(0);
        // every bucket but the first is acknowledged
        for b in &d.buckets[1..] {
            let r = Receipt::new(b.target_l3, b.digest(), &f.l3_keys[&b.target_l3]);
            assert!(f.l2.on_bucket_receipt(r));
        }
        assert!(f.l2.poll_timeouts(1_500).is_empty());
        let resent = f.l2.poll_timeouts(1_000 + f.l2.receipt_timeout_ms);
        assert_eq!(resent.len(), 1);
        assert_ne!(resent[0].target_l3, d.buckets[0].target_l3);
        assert_eq!(resent[0].messages, d.buckets[0].messages);
        assert_eq!(f.l2.batch(d.round).unwrap().real[0], resent[0]);
    }

    #[test]
    fn replay_cache_evicts_after_window() {
        let mut f = fixture();
        let msg = f.message();
        let mut cache = ReplayCache::new(1_000);
        let at = InputRef {
            container: [0; 32],
            position: 0,
        };
        cache.insert(&msg, at, 0);
        assert_eq!(cache.lookup(&msg), Some(at));
        cache.evict(500);
        assert_eq!(cache.len(), 1);
        cache.evict(1_001);
        assert!(cache.is_empty());
    }
}
