//! Accountability: evidence filed against the network, the records each node
//! keeps about a message's hop, and the auditor that walks those records.
//!
//! Every node's output is signed and every shuffle is committed, so each hop
//! either opens to "signed output = committed transform of signed input" or
//! it does not. The auditor blames the first hop that provably deviates. A
//! hop that withholds its record, or whose claim can't be checked, is flagged
//! but not blamed.

use serde::{Deserialize, Serialize};

use crate::crypto::sealed::{open_with_proof, DecryptionProof};
use crate::crypto::{ot_decrypt_with_key, verify_perm, CryptoError, PermOpening, Tag};
use crate::division::compute_partition;
use crate::level2::DropCause;
use crate::params::{NetworkParams, Topology};
use crate::protocol::{
    Bucket, CommitScope, CommitmentNotice, DeliveryBlob, EnvelopeInner, L1Receipt, NodeId,
    OtResponse, PublicationEntry, Receipt, SignedContainer, SignedWire, Submission, TaggedMessage,
    Wire,
};

/// A complaint that opens an audit.
#[derive(Clone, Debug)]
pub enum Evidence {
    /// Filed by a Level-2 node: an envelope in a container would not open.
    L2IntegrityFailure {
        l2: NodeId,
        container: SignedContainer,
        position: usize,
        proof: Option<DecryptionProof>,
    },
    /// Filed by a sender: a receipted message never appeared on any board.
    NotPosted {
        receipt: L1Receipt,
        expected_tag: Tag,
    },
    /// Filed by a sender: a node-signed blob carries the sender's tag but
    /// not the sender's `M`.
    AlteredDelivery {
        receipt: L1Receipt,
        blob: DeliveryBlob,
    },
    /// Filed by a retriever: the chosen string of a signed OT response
    /// decrypts to a blob whose signature does not verify.
    MacFailure {
        response: OtResponse,
        choice: usize,
        key: [u8; 32],
    },
}

impl Evidence {
    pub fn kind(&self) -> &'static str {
        match self {
            Evidence::L2IntegrityFailure { .. } => "l2_integrity_failure",
            Evidence::NotPosted { .. } => "not_posted",
            Evidence::AlteredDelivery { .. } => "altered_delivery",
            Evidence::MacFailure { .. } => "mac_failure",
        }
    }
}

/// Level-1 record of one submission.
#[derive(Clone, Debug)]
pub struct L1HopRecord {
    pub submission: Submission,
    pub input_index: usize,
    pub output_index: usize,
    pub opening: PermOpening,
    pub container: SignedContainer,
    pub l2_receipt: Option<Receipt>,
}

/// What a Level-2 node did with one container entry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum L2Disposition {
    Buffered,
    Dropped(DropCause),
    Batched {
        round: u64,
        input_index: usize,
        output_index: usize,
        block: usize,
        bucket_position: usize,
    },
}

/// Batch-side evidence for a batched entry.
#[derive(Clone, Debug)]
pub struct L2BatchEvidence {
    pub notice: CommitmentNotice,
    pub opening: PermOpening,
    pub input: TaggedMessage,
    pub bucket: Bucket,
    pub l3_receipt: Option<Receipt>,
}

/// Level-2 record of one container entry.
#[derive(Clone, Debug)]
pub struct L2HopRecord {
    pub container: SignedContainer,
    pub position: usize,
    pub proof: Option<DecryptionProof>,
    pub disposition: L2Disposition,
    pub batch: Option<L2BatchEvidence>,
    /// For a replay drop: the earlier entry and a proof for it.
    pub earlier: Option<(SignedContainer, usize, Option<DecryptionProof>)>,
}

/// Level-3 record of one bucket slot.
#[derive(Clone, Debug)]
pub struct L3HopRecord {
    pub bucket: Bucket,
    pub position: usize,
    pub publication: Option<PublicationEntry>,
    /// Still in the repository, not yet drawn.
    pub pending: bool,
}

/// Where the auditor fetches hop records. Nodes answer from their logs;
/// `None` means the node has no record or refuses to answer.
pub trait AuditDirectory {
    fn l1_by_envelope(&mut self, l1: NodeId, envelope_digest: &[u8; 32]) -> Option<L1HopRecord>;
    fn l1_by_output(
        &mut self,
        l1: NodeId,
        container: &[u8; 32],
        position: usize,
    ) -> Option<L1HopRecord>;
    fn l2_by_input(
        &mut self,
        l2: NodeId,
        container: &[u8; 32],
        position: usize,
    ) -> Option<L2HopRecord>;
    fn l3_by_bucket(
        &mut self,
        l3: NodeId,
        origin_l2: NodeId,
        round: u64,
        position: usize,
    ) -> Option<L3HopRecord>;
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Malicious {
        node: NodeId,
        reason: String,
    },
    /// The sender's own input was faulty; no node deviated.
    SenderInputError,
    /// No provable deviation, but these hops could not be checked.
    Inconclusive {
        flagged: Vec<NodeId>,
    },
    /// Every hop is consistent.
    Unfounded,
}

impl Verdict {
    pub fn blamed(&self) -> Option<NodeId> {
        match self {
            Verdict::Malicious { node, .. } => Some(*node),
            _ => None,
        }
    }
}

/// Result of one audit.
#[derive(Clone, Debug)]
pub struct AuditCase {
    pub kind: &'static str,
    pub verdict: Verdict,
    /// Nodes whose hop was checked and found consistent, in trace order.
    pub cleared: Vec<NodeId>,
}

fn malicious(node: NodeId, reason: &str) -> Verdict {
    Verdict::Malicious {
        node,
        reason: reason.to_string(),
    }
}

fn flag(nodes: &[NodeId]) -> Verdict {
    Verdict::Inconclusive {
        flagged: nodes.to_vec(),
    }
}

enum Opened {
    Ok(EnvelopeInner),
    /// The envelope provably does not open for this node.
    Fails,
    /// The proof is missing or invalid.
    Unproven,
}

/// Third-party view of a Level-2 envelope.
fn open_entry(
    l2: NodeId,
    l2_pk: &crate::crypto::GroupElement,
    env: &crate::protocol::Envelope,
    proof: Option<&DecryptionProof>,
) -> Opened {
    let Some(proof) = proof else {
        // without a proof only a malformed ephemeral key is self-evident
        return match crate::crypto::GroupElement::from_slice(
            &env.inner.key_block[..32.min(env.inner.key_block.len())],
        ) {
            Ok(_) => Opened::Unproven,
            Err(_) => Opened::Fails,
        };
    };
    match open_with_proof(l2_pk, &env.inner, proof) {
        Err(CryptoError::BadProof) => Opened::Unproven,
        Err(_) => Opened::Fails,
        Ok((_, plain)) => match EnvelopeInner::decode(&plain) {
            Ok(inner) if inner.l2 == l2 && env.l2_hint == l2 => Opened::Ok(inner),
            _ => Opened::Fails,
        },
    }
}

pub struct Auditor {
    topology: Topology,
    params: NetworkParams,
    xor: [u8; 32],
}

struct Trail {
    cleared: Vec<NodeId>,
}

impl Auditor {
    pub fn new(topology: Topology, params: NetworkParams, xor: [u8; 32]) -> Self {
        Self {
            topology,
            params,
            xor,
        }
    }

    pub fn open_case<D: AuditDirectory>(&self, evidence: &Evidence, dir: &mut D) -> AuditCase {
        let mut trail = Trail {
            cleared: Vec::new(),
        };
        let verdict = match evidence {
            Evidence::L2IntegrityFailure {
                l2,
                container,
                position,
                proof,
            } => self.integrity_case(*l2, container, *position, proof.as_ref(), dir, &mut trail),
            Evidence::NotPosted {
                receipt,
                expected_tag,
            } => self.forward_case(receipt, Expect::Tag(*expected_tag), dir, &mut trail),
            Evidence::AlteredDelivery { receipt, blob } => {
                self.forward_case(receipt, Expect::Blob(blob), dir, &mut trail)
            }
            Evidence::MacFailure {
                response,
                choice,
                key,
            } => self.mac_case(response, *choice, key),
        };
        AuditCase {
            kind: evidence.kind(),
            verdict,
            cleared: trail.cleared,
        }
    }

    fn key(&self, node: NodeId) -> Option<&crate::crypto::GroupElement> {
        self.topology.public_key(node)
    }

    /// Checks a Level-1 record in isolation. Returns the deviation, if any.
    fn check_l1(&self, l1: NodeId, rec: &L1HopRecord) -> Result<(), Verdict> {
        let Some(pk) = self.key(l1) else {
            return Err(flag(&[l1]));
        };
        let c = &rec.container;
        if c.l1 != l1 || !c.verify_sig(pk) {
            // an unsigned container can't be pinned on this node
            return Err(flag(&[l1]));
        }
        if !rec.submission.verify_sig(&rec.submission.sender_pk) {
            return Err(flag(&[l1]));
        }
        if !verify_perm(&c.commitment, &rec.opening) || rec.opening.perm.len() != c.entries.len() {
            return Err(malicious(l1, "container commitment does not open"));
        }
        let images = rec.opening.perm.images();
        if images.get(rec.output_index).map(|&i| i as usize) != Some(rec.input_index) {
            return Err(malicious(
                l1,
                "claimed position contradicts committed permutation",
            ));
        }
        if c.entries[rec.output_index] != rec.submission.envelope {
            return Err(malicious(l1, "forwarded envelope differs from submission"));
        }
        Ok(())
    }

    fn integrity_case<D: AuditDirectory>(
        &self,
        l2: NodeId,
        container: &SignedContainer,
        position: usize,
        proof: Option<&DecryptionProof>,
        dir: &mut D,
        trail: &mut Trail,
    ) -> Verdict {
        let l1 = container.l1;
        let (Some(l1_pk), Some(l2_pk)) = (self.key(l1), self.topology.l2_key(l2)) else {
            return Verdict::Unfounded;
        };
        if container.l2 != l2 || !container.verify_sig(l1_pk) {
            return Verdict::Unfounded;
        }
        let Some(env) = container.entries.get(position) else {
            return Verdict::Unfounded;
        };
        match open_entry(l2, l2_pk, env, proof) {
            Opened::Ok(_) => return malicious(l2, "reported an envelope that opens"),
            Opened::Unproven => return flag(&[l2]),
            Opened::Fails => {}
        }
        trail.cleared.push(l2);
        let Some(rec) = dir.l1_by_output(l1, &container.digest(), position) else {
            return flag(&[l1]);
        };
        if rec.container.digest() != container.digest() || rec.output_index != position {
            return flag(&[l1]);
        }
        if let Err(v) = self.check_l1(l1, &rec) {
            return v;
        }
        trail.cleared.push(l1);
        Verdict::SenderInputError
    }

    fn forward_case<D: AuditDirectory>(
        &self,
        receipt: &L1Receipt,
        expect: Expect<'_>,
        dir: &mut D,
        trail: &mut Trail,
    ) -> Verdict {
        let l1 = receipt.l1;
        let Some(l1_pk) = self.key(l1) else {
            return Verdict::Unfounded;
        };
        if !receipt.verify_sig(l1_pk) {
            return Verdict::Unfounded;
        }
        // Level 1
        let Some(r1) = dir.l1_by_envelope(l1, &receipt.envelope_digest) else {
            return flag(&[l1]);
        };
        if r1.submission.envelope.digest() != receipt.envelope_digest {
            return flag(&[l1]);
        }
        if let Err(v) = self.check_l1(l1, &r1) {
            return v;
        }
        trail.cleared.push(l1);

        // Level 2
        let l2 = r1.container.l2;
        let Some(l2_pk) = self.topology.l2_key(l2) else {
            return flag(&[l1]);
        };
        let cdigest = r1.container.digest();
        let Some(r2) = dir.l2_by_input(l2, &cdigest, r1.output_index) else {
            return match r1.l2_receipt {
                Some(_) => flag(&[l2]),
                None => flag(&[l1, l2]),
            };
        };
        if r2.container.digest() != cdigest || r2.position != r1.output_index {
            return flag(&[l2]);
        }
        let env = &r1.submission.envelope;
        let inner = match open_entry(l2, l2_pk, env, r2.proof.as_ref()) {
            Opened::Ok(inner) => inner,
            Opened::Fails => {
                return match r2.disposition {
                    L2Disposition::Dropped(DropCause::Integrity | DropCause::WrongNode) => {
                        trail.cleared.push(l2);
                        Verdict::SenderInputError
                    }
                    _ => flag(&[l2]),
                }
            }
            Opened::Unproven => return flag(&[l2]),
        };
        let sent = TaggedMessage {
            m: inner.m.clone(),
            tag: inner.tag,
        };
        let tag_ok = match expect {
            Expect::Tag(t) => t == inner.tag,
            Expect::Blob(b) => b.tag == inner.tag,
        };
        if !tag_ok {
            // the sender's claim doesn't match what it actually sent
            return Verdict::SenderInputError;
        }
        let (round, input_index, output_index, block, bucket_position) = match r2.disposition {
            L2Disposition::Buffered => {
                trail.cleared.push(l2);
                return Verdict::Unfounded;
            }
            L2Disposition::Dropped(DropCause::Integrity | DropCause::WrongNode) => {
                return malicious(l2, "dropped an envelope that opens");
            }
            L2Disposition::Dropped(DropCause::Stale) => {
                let ts_ms = inner.ts.saturating_mul(1000);
                let flushed = r2.container.flushed_at_ms;
                let window = self.params.replay_window_ms;
                return if ts_ms.saturating_add(window) < flushed {
                    trail.cleared.push(l2);
                    Verdict::SenderInputError
                } else {
                    // arrival time isn't signed, so a late claim can't be refuted
                    flag(&[l2])
                };
            }
            L2Disposition::Dropped(DropCause::Replay { .. }) => {
                return self.check_replay(l2, l2_pk, &sent, &r2, trail);
            }
            L2Disposition::Batched {
                round,
                input_index,
                output_index,
                block,
                bucket_position,
            } => (round, input_index, output_index, block, bucket_position),
        };
        let Some(b) = &r2.batch else {
            return flag(&[l2]);
        };
        let n = &b.notice;
        if n.node != l2 || !n.verify_sig(l2_pk) || n.scope != CommitScope::Batch || n.seq != round {
            return flag(&[l2]);
        }
        if b.bucket.origin_l2 != l2 || !b.bucket.verify_sig(l2_pk) || b.bucket.round != round {
            return flag(&[l2]);
        }
        if !verify_perm(&n.commitment, &b.opening) {
            return malicious(l2, "batch commitment does not open");
        }
        if b.opening
            .perm
            .images()
            .get(output_index)
            .map(|&i| i as usize)
            != Some(input_index)
        {
            return malicious(l2, "claimed position contradicts committed permutation");
        }
        let l3_ids = self.topology.l3_ids();
        let partition = compute_partition(
            round,
            &self.xor,
            &l3_ids,
            self.params.alpha,
            b.opening.perm.len(),
        );
        if partition
            .blocks
            .get(block)
            .and_then(|bl| bl.get(bucket_position))
            != Some(&output_index)
        {
            return malicious(l2, "bucket placement contradicts the round partition");
        }
        if b.input != sent {
            return flag(&[l2]);
        }
        match b.bucket.messages.get(bucket_position) {
            Some(m) if *m == sent => {}
            _ => return malicious(l2, "signed bucket carries an altered message"),
        }
        trail.cleared.push(l2);

        // Level 3
        let l3 = b.bucket.target_l3;
        let Some(l3_pk) = self.key(l3) else {
            return flag(&[l2]);
        };
        let Some(r3) = dir.l3_by_bucket(l3, l2, round, bucket_position) else {
            return match b.l3_receipt {
                Some(_) => flag(&[l3]),
                None => flag(&[l2, l3]),
            };
        };
        if r3.bucket != b.bucket {
            if r3.bucket.origin_l2 == l2
                && r3.bucket.round == round
                && r3.bucket.target_l3 == l3
                && r3.bucket.verify_sig(l2_pk)
            {
                return malicious(l2, "signed two different buckets for one round");
            }
            return flag(&[l3]);
        }
        if r3.position != bucket_position {
            return flag(&[l3]);
        }
        if let Expect::Blob(blob) = expect {
            if blob.node == l3 && blob.verify_sig(l3_pk) && blob.tagged() != sent {
                return malicious(l3, "signed a blob that differs from the bucket message");
            }
        }
        let Some(entry) = r3.publication else {
            trail.cleared.push(l3);
            return if r3.pending {
                Verdict::Unfounded
            } else {
                flag(&[l3])
            };
        };
        let blob = &entry.blob;
        if blob.node == l3 && blob.verify_sig(l3_pk) && blob.tagged() != sent {
            return malicious(l3, "signed a blob that differs from the bucket message");
        }
        trail.cleared.push(l3);
        Verdict::Unfounded
    }

    fn check_replay(
        &self,
        l2: NodeId,
        l2_pk: &crate::crypto::GroupElement,
        sent: &TaggedMessage,
        r2: &L2HopRecord,
        trail: &mut Trail,
    ) -> Verdict {
        let Some((ec, epos, eproof)) = &r2.earlier else {
            return flag(&[l2]);
        };
        let Some(l1_pk) = self.key(ec.l1) else {
            return flag(&[l2]);
        };
        if ec.l2 != l2 || !ec.verify_sig(l1_pk) {
            return flag(&[l2]);
        }
        let Some(env) = ec.entries.get(*epos) else {
            return flag(&[l2]);
        };
        if ec.digest() == r2.container.digest() && *epos == r2.position {
            return malicious(l2, "cited the dropped entry as its own replay");
        }
        match open_entry(l2, l2_pk, env, eproof.as_ref()) {
            Opened::Ok(inner) if inner.m == sent.m && inner.tag == sent.tag => {
                trail.cleared.push(l2);
                Verdict::Unfounded
            }
            Opened::Ok(_) | Opened::Fails => {
                malicious(l2, "replay claim cites a different message")
            }
            Opened::Unproven => flag(&[l2]),
        }
    }

    fn mac_case(&self, response: &OtResponse, choice: usize, key: &[u8; 32]) -> Verdict {
        let l3 = response.node;
        let Some(pk) = self.key(l3) else {
            return Verdict::Unfounded;
        };
        if !response.verify_sig(pk) {
            return Verdict::Unfounded;
        }
        let Some(ct) = choice
            .checked_sub(1)
            .and_then(|i| response.ciphertexts.get(i))
        else {
            return Verdict::Unfounded;
        };
        let Ok(plain) = ot_decrypt_with_key(
            key,
            &response.sender_point,
            &response.receiver_point,
            choice,
            ct,
        ) else {
            // a wrong key proves nothing about the node
            return Verdict::Unfounded;
        };
        match DeliveryBlob::decode(&plain) {
            Ok(blob) if blob.node == l3 && blob.verify_sig(pk) => Verdict::Unfounded,
            _ => malicious(l3, "served a blob without a valid signature"),
        }
    }
}

#[derive(Clone, Copy)]
enum Expect<'a> {
    Tag(Tag),
    Blob(&'a DeliveryBlob),
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn only_malicious_verdicts_blame() {
        assert_eq!(malicious(NodeId(4), "x").blamed(), Some(NodeId(4)));
        assert_eq!(flag(&[NodeId(1)]).blamed(), None);
        assert_eq!(Verdict::SenderInputError.blamed(), None);
        assert_eq!(Verdict::Unfounded.blamed(), None);
    }
}
