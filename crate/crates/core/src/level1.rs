//! Level-1 node: strips sender identity, fills one container per Level-2
//! node, and forwards each full container shuffled under a committed
//! permutation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use std::collections::{BTreeMap, VecDeque};

use crate::audit::{Evidence, L1HopRecord};
use crate::crypto::sealed::random_box;
use crate::crypto::sign::{self, Signature};
use crate::crypto::{commit_perm, KeyPair, PermOpening, Permutation, Tag};
use crate::error::ProtocolError;
use crate::faults::{flip_random_bit, FaultKind, FaultPlan};
use crate::params::Topology;
use crate::protocol::{
    wrap_envelope, CommitScope, CommitmentNotice, Envelope, L1Receipt, NodeId, Receipt,
    SignedContainer, SignedWire, Submission, PAYLOAD_LEN,
};

/// Everything a Level-1 node keeps about one flushed container. The sender
/// transport ids never leave this record.
#[derive(Clone, Debug)]
pub struct ContainerRecord {
    pub inputs: Vec<Submission>,
    transport_ids: Vec<u64>,
    pub opening: PermOpening,
    pub container: SignedContainer,
    pub l2_receipt: Option<Receipt>,
}

impl ContainerRecord {
    pub fn transport_id(&self, input_index: usize) -> u64 {
        self.transport_ids[input_index]
    }
}

#[derive(Clone, Debug)]
pub struct Flush {
    pub notice: CommitmentNotice,
    pub container: SignedContainer,
    /// Positions this node deliberately corrupted, with the original
    /// envelope digest. Empty for honest nodes.
    pub tampered: Vec<(usize, [u8; 32], FaultKind)>,
}

#[derive(Clone, Debug)]
pub struct AcceptOutput {
    pub receipt: L1Receipt,
    pub flush: Option<Flush>,
}

/// A sender's outcome report for one of its messages.
#[derive(Clone, Debug)]
pub struct SenderReport {
    pub receipt: L1Receipt,
    pub expected_tag: Tag,
    pub posted: bool,
}

struct Queued {
    submission: Submission,
    transport_id: u64,
}

pub struct Level1Node {
    id: NodeId,
    keys: KeyPair,
    beta1: usize,
    topology: Topology,
    containers: BTreeMap<NodeId, Vec<Queued>>,
    next_seq: u64,
    records: BTreeMap<u64, ContainerRecord>,
    by_envelope: BTreeMap<[u8; 32], (u64, usize)>,
    by_container: BTreeMap<[u8; 32], u64>,
    failure_times: VecDeque<u64>,
    failure_count: u64,
    /// Failures within `report_window_ms` that raise an audit.
    pub report_threshold: usize,
    pub report_window_ms: u64,
    fault: Option<FaultPlan>,
    rng: ChaCha20Rng,
}

impl Level1Node {
    pub fn new(id: NodeId, keys: KeyPair, beta1: usize, topology: Topology, seed: u64) -> Self {
        Self {
            id,
            keys,
            beta1,
            topology,
            containers: BTreeMap::new(),
            next_seq: 1,
            records: BTreeMap::new(),
            by_envelope: BTreeMap::new(),
            by_container: BTreeMap::new(),
            failure_times: VecDeque::new(),
            failure_count: 0,
            report_threshold: 1,
            report_window_ms: u64::MAX,
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

    pub fn queued(&self, l2: NodeId) -> usize {
        self.containers.get(&l2).map_or(0, Vec::len)
    }

    pub fn failure_count(&self) -> u64 {
        self.failure_count
    }

    /// Accepts one submission; flushes the target container when it reaches
    /// β1 entries.
    pub fn accept(
        &mut self,
        submission: Submission,
        transport_id: u64,
        now_ms: u64,
    ) -> Result<AcceptOutput, ProtocolError> {
        let l2 = submission.envelope.l2_hint;
        if self.topology.l2_key(l2).is_none() {
            return Err(ProtocolError::UnknownNode(l2));
        }
        if !submission.verify_sig(&submission.sender_pk) {
            return Err(ProtocolError::Crypto(
                crate::crypto::CryptoError::BadSignature,
            ));
        }
        let mut receipt = L1Receipt {
            l1: self.id,
            envelope_digest: submission.envelope.digest(),
            received_at_ms: now_ms,
            sig: Signature([0; 64]),
        };
        receipt.sig = sign::sign(&self.keys, &receipt.signing_bytes());
        let queue = self.containers.entry(l2).or_default();
        queue.push(Queued {
            submission,
            transport_id,
        });
        let flush = (queue.len() >= self.beta1).then(|| self.flush(l2, now_ms));
        Ok(AcceptOutput { receipt, flush })
    }

    fn flush(&mut self, l2: NodeId, now_ms: u64) -> Flush {
        let queued = self.containers.remove(&l2).unwrap_or_default();
        debug_assert_eq!(queued.len(), self.beta1);
        let (inputs, transport_ids): (Vec<Submission>, Vec<u64>) = queued
            .into_iter()
            .map(|q| (q.submission, q.transport_id))
            .unzip();
        let perm = Permutation::random(inputs.len(), &mut self.rng);
        let (commitment, opening) = commit_perm(&perm, &mut self.rng);
        let seq = self.next_seq;
        self.next_seq += 1;

        let envelopes: Vec<Envelope> = inputs.iter().map(|s| s.envelope.clone()).collect();
        let mut entries = perm.apply(&envelopes);
        let mut tampered = Vec::new();
        if let Some(plan) = self.fault.clone() {
            let l2_pk = *self.topology.l2_key(l2).expect("checked at accept");
            for (pos, env) in entries.iter_mut().enumerate() {
                let Some(kind) = plan.draw(&mut self.rng) else {
                    continue;
                };
                let original = env.digest();
                match kind {
                    FaultKind::ReplaceEnvelope => {
                        let m = random_box(PAYLOAD_LEN, &mut self.rng);
                        let tag = Tag(self.rng.gen());
                        *env = wrap_envelope(m, tag, l2, &l2_pk, now_ms / 1000, &mut self.rng);
                    }
                    _ => {
                        let split = env.inner.key_block.len();
                        let mut joined = [env.inner.key_block.as_slice(), &env.inner.body].concat();
                        flip_random_bit(&mut joined, 0, &mut self.rng);
                        env.inner.body = joined.split_off(split);
                        env.inner.key_block = joined;
                    }
                }
                tampered.push((pos, original, kind));
            }
        }

        let mut container = SignedContainer {
            l1: self.id,
            l2,
            seq,
            flushed_at_ms: now_ms,
            commitment,
            entries,
            sig: Signature([0; 64]),
        };
        container.sig = sign::sign(&self.keys, &container.signing_bytes());
        let mut notice = CommitmentNotice {
            node: self.id,
            scope: CommitScope::Container,
            seq,
            commitment,
            sig: Signature([0; 64]),
        };
        notice.sig = sign::sign(&self.keys, &notice.signing_bytes());

        for (i, s) in inputs.iter().enumerate() {
            self.by_envelope.insert(s.envelope.digest(), (seq, i));
        }
        self.by_container.insert(container.digest(), seq);
        self.records.insert(
            seq,
            ContainerRecord {
                inputs,
                transport_ids,
                opening,
                container: container.clone(),
                l2_receipt: None,
            },
        );
        Flush {
            notice,
            container,
            tampered,
        }
    }

    /// Stores a Level-2 receipt for a forwarded container.
    pub fn on_container_receipt(&mut self, receipt: Receipt) -> bool {
        let Some(&seq) = self.by_container.get(&receipt.digest) else {
            return false;
        };
        let record = self.records.get_mut(&seq).expect("indexed");
        let Some(pk) = self.topology.l2_key(record.container.l2) else {
            return false;
        };
        if receipt.node != record.container.l2 || !receipt.verify_sig(pk) {
            return false;
        }
        record.l2_receipt = Some(receipt);
        true
    }

    /// Counts a sender's posted/not-posted report. Returns audit evidence
    /// when failures in the window reach the threshold.
    pub fn record_sender_report(&mut self, report: SenderReport, now_ms: u64) -> Option<Evidence> {
        if report.posted {
            return None;
        }
        if report.receipt.l1 != self.id || !report.receipt.verify_sig(&self.keys.public) {
            return None;
        }
        self.failure_count += 1;
        self.failure_times.push_back(now_ms);
        while self
            .failure_times
            .front()
            .is_some_and(|&t| now_ms.saturating_sub(t) > self.report_window_ms)
        {
            self.failure_times.pop_front();
        }
        (self.failure_times.len() >= self.report_threshold).then_some(Evidence::NotPosted {
            receipt: report.receipt,
            expected_tag: report.expected_tag,
        })
    }

    pub fn record(&self, seq: u64) -> Option<&ContainerRecord> {
        self.records.get(&seq)
    }

    fn hop_record(&self, seq: u64, input_index: usize) -> L1HopRecord {
        let r = &self.records[&seq];
        let output_index = r
            .opening
            .perm
            .images()
            .iter()
            .position(|&i| i as usize == input_index)
            .expect("permutation covers every input");
        L1HopRecord {
            submission: r.inputs[input_index].clone(),
            input_index,
            output_index,
            opening: r.opening.clone(),
            container: r.container.clone(),
            l2_receipt: r.l2_receipt.clone(),
        }
    }

    /// Audit lookup by the sender's envelope digest.
    pub fn audit_by_envelope(&self, digest: &[u8; 32]) -> Option<L1HopRecord> {
        let &(seq, i) = self.by_envelope.get(digest)?;
        Some(self.hop_record(seq, i))
    }

    /// Audit lookup by a position in a forwarded container.
    pub fn audit_by_output(&self, container: &[u8; 32], position: usize) -> Option<L1HopRecord> {
        let &seq = self.by_container.get(container)?;
        let r = &self.records[&seq];
        let input = *r.opening.perm.images().get(position)? as usize;
        Some(self.hop_record(seq, input))
    }
}
