//! Wire types for everything that crosses a trust boundary.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt;

use super::codec::{Reader, Wire, WireError, Writer};
use crate::crypto::sealed::{sealed_len, DecryptionProof, SealedBox};
use crate::crypto::sign::{self, DleqProof, Signature};
use crate::crypto::{
    Direction, GroupElement, KeyPair, PermCommitment, PermOpening, Permutation, Tag,
};
use crate::serde_via_wire;

/// Application bytes carried per message, before padding.
pub const PAYLOAD_X_LEN: usize = 256;
pub const NONCE_LEN: usize = 24;
/// Encoded [`Payload`]: version, length, padded bytes, nonce.
pub const PAYLOAD_LEN: usize = 1 + 2 + PAYLOAD_X_LEN + NONCE_LEN;
/// Encoded length of every recipient box `M`.
pub const M_LEN: usize = sealed_len(PAYLOAD_LEN);
/// Encoded [`EnvelopeInner`].
pub const ENVELOPE_INNER_LEN: usize = 1 + 4 + M_LEN + 32 + 2 + 8;
/// Encoded length of an envelope's outer box.
pub const ENVELOPE_SEALED_LEN: usize = sealed_len(ENVELOPE_INNER_LEN);
/// Encoded [`Envelope`].
pub const ENVELOPE_LEN: usize = 1 + 4 + ENVELOPE_SEALED_LEN + 2;
/// Encoded [`TaggedMessage`].
pub const TAGGED_LEN: usize = 1 + 4 + M_LEN + 32;

fn sha256(parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    h.finalize().into()
}

/// Two-byte node identifier assigned by the topology.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub u16);

impl fmt::Debug for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "N{}", self.0)
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "N{}", self.0)
    }
}

// ---- crypto values as wire fields ----

impl Wire for GroupElement {
    fn write_body(&self, w: &mut Writer) {
        w.element(self);
    }
    fn read_body(r: &mut Reader<'_>) -> Result<Self, WireError> {
        r.element()
    }
}

impl Wire for Signature {
    fn write_body(&self, w: &mut Writer) {
        w.sig(self);
    }
    fn read_body(r: &mut Reader<'_>) -> Result<Self, WireError> {
        r.sig()
    }
}

impl Wire for SealedBox {
    fn write_body(&self, w: &mut Writer) {
        w.var(&self.to_bytes());
    }
    fn read_body(r: &mut Reader<'_>) -> Result<Self, WireError> {
        SealedBox::from_bytes(r.var()?).map_err(|_| WireError::Malformed("sealed box"))
    }
}

impl Wire for PermCommitment {
    fn write_body(&self, w: &mut Writer) {
        w.raw(&self.to_bytes());
    }
    fn read_body(r: &mut Reader<'_>) -> Result<Self, WireError> {
        PermCommitment::from_bytes(&r.array()?).map_err(|_| WireError::Malformed("commitment"))
    }
}

impl Wire for PermOpening {
    fn write_body(&self, w: &mut Writer) {
        w.var(&self.to_bytes());
    }
    fn read_body(r: &mut Reader<'_>) -> Result<Self, WireError> {
        PermOpening::from_bytes(r.var()?).map_err(|_| WireError::Malformed("opening"))
    }
}

impl Wire for DecryptionProof {
    fn write_body(&self, w: &mut Writer) {
        w.raw(self.shared.as_bytes()).raw(&self.proof.to_bytes());
    }
    fn read_body(r: &mut Reader<'_>) -> Result<Self, WireError> {
        let shared = GroupElement::from_bytes(&r.array()?)
            .map_err(|_| WireError::Malformed("shared point"))?;
        let proof =
            DleqProof::from_bytes(&r.array()?).map_err(|_| WireError::Malformed("dleq proof"))?;
        Ok(Self { shared, proof })
    }
}

serde_via_wire!(
    GroupElement,
    Signature,
    SealedBox,
    PermCommitment,
    PermOpening,
    DecryptionProof
);

fn write_list<T: Wire>(w: &mut Writer, items: &[T]) {
    w.u32(items.len() as u32);
    for i in items {
        i.write_body(w);
    }
}

fn read_list<T: Wire>(r: &mut Reader<'_>) -> Result<Vec<T>, WireError> {
    let n = r.u32()? as usize;
    // each element is at least one byte; refuse absurd counts before allocating
    if n > r.remaining() {
        return Err(WireError::Malformed("list count exceeds input"));
    }
    (0..n).map(|_| T::read_body(r)).collect()
}

fn read_fixed_box(r: &mut Reader<'_>, expected: usize) -> Result<SealedBox, WireError> {
    let bytes = r.var()?;
    if bytes.len() != expected {
        return Err(WireError::LengthMismatch {
            expected,
            found: bytes.len(),
        });
    }
    SealedBox::from_bytes(bytes).map_err(|_| WireError::Malformed("sealed box"))
}

// ---- payload and messages ----

/// Plaintext sealed to the recipient: application bytes padded to a fixed
/// length, plus a fresh nonce.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Payload {
    pub x: Vec<u8>,
    pub nonce: [u8; NONCE_LEN],
}

impl Wire for Payload {
    fn write_body(&self, w: &mut Writer) {
        assert!(
            self.x.len() <= PAYLOAD_X_LEN,
            "payload exceeds padded length"
        );
        let mut padded = [0u8; PAYLOAD_X_LEN];
        padded[..self.x.len()].copy_from_slice(&self.x);
        w.u16(self.x.len() as u16).raw(&padded).raw(&self.nonce);
    }
    fn read_body(r: &mut Reader<'_>) -> Result<Self, WireError> {
        let len = r.u16()? as usize;
        if len > PAYLOAD_X_LEN {
            return Err(WireError::Malformed("payload length"));
        }
        let padded = r.take(PAYLOAD_X_LEN)?;
        if padded[len..].iter().any(|&b| b != 0) {
            return Err(WireError::Malformed("non-zero padding"));
        }
        Ok(Self {
            x: padded[..len].to_vec(),
            nonce: r.array()?,
        })
    }
}

/// `(M, tag)`, the unit that Level-2 batches and Level-3 publishes.
#[derive(Clone, PartialEq, Eq, Debug, Hash)]
pub struct TaggedMessage {
    pub m: SealedBox,
    pub tag: Tag,
}

impl TaggedMessage {
    pub fn digest(&self) -> [u8; 32] {
        sha256(&[b"aot/tagged", &self.encode()])
    }
}

impl Wire for TaggedMessage {
    fn write_body(&self, w: &mut Writer) {
        self.m.write_body(w);
        w.tag(&self.tag);
    }
    fn read_body(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(Self {
            m: read_fixed_box(r, M_LEN)?,
            tag: r.tag()?,
        })
    }
}

/// Plaintext of the Level-2 envelope: `(M, k, N2, ts)`.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct EnvelopeInner {
    pub m: SealedBox,
    pub tag: Tag,
    pub l2: NodeId,
    /// Creation time, whole seconds.
    pub ts: u64,
}

impl Wire for EnvelopeInner {
    fn write_body(&self, w: &mut Writer) {
        self.m.write_body(w);
        w.tag(&self.tag).u16(self.l2.0).u64(self.ts);
    }
    fn read_body(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(Self {
            m: read_fixed_box(r, M_LEN)?,
            tag: r.tag()?,
            l2: NodeId(r.u16()?),
            ts: r.u64()?,
        })
    }
}

/// What a sender hands to a Level-1 node.
#[derive(Clone, PartialEq, Eq, Debug, Hash)]
pub struct Envelope {
    pub inner: SealedBox,
    pub l2_hint: NodeId,
}

impl Envelope {
    pub fn digest(&self) -> [u8; 32] {
        sha256(&[b"aot/envelope", &self.encode()])
    }
}

impl Wire for Envelope {
    fn write_body(&self, w: &mut Writer) {
        self.inner.write_body(w);
        w.u16(self.l2_hint.0);
    }
    fn read_body(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(Self {
            inner: read_fixed_box(r, ENVELOPE_SEALED_LEN)?,
            l2_hint: NodeId(r.u16()?),
        })
    }
}

/// Signing helpers shared by every signed wire type: the signature covers a
/// domain string plus the encoding of all other fields.
pub trait SignedWire {
    const DOMAIN: &'static [u8];
    fn unsigned_body(&self, w: &mut Writer);
    fn signature(&self) -> &Signature;

    fn signing_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.raw(Self::DOMAIN);
        self.unsigned_body(&mut w);
        w.finish()
    }

    fn verify_sig(&self, pk: &GroupElement) -> bool {
        sign::verify(pk, &self.signing_bytes(), self.signature())
    }
}

macro_rules! signed_wire {
    ($t:ty, $domain:expr, |$s:ident, $w:ident| $body:block, |$r:ident| $read:block) => {
        impl SignedWire for $t {
            const DOMAIN: &'static [u8] = $domain;
            fn unsigned_body(&self, $w: &mut Writer) {
                let $s = self;
                $body
            }
            fn signature(&self) -> &Signature {
                &self.sig
            }
        }
        impl Wire for $t {
            fn write_body(&self, w: &mut Writer) {
                self.unsigned_body(w);
                w.sig(&self.sig);
            }
            fn read_body($r: &mut Reader<'_>) -> Result<Self, WireError> {
                $read
            }
        }
    };
}

/// A sender's signed hand-off of one envelope to a Level-1 node.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Submission {
    pub envelope: Envelope,
    pub sender_pk: GroupElement,
    pub sig: Signature,
}

impl Submission {
    pub fn new(envelope: Envelope, sender: &KeyPair) -> Self {
        let mut s = Self {
            envelope,
            sender_pk: sender.public,
            sig: Signature([0; 64]),
        };
        s.sig = sign::sign(sender, &s.signing_bytes());
        s
    }
}

signed_wire!(
    Submission,
    b"aot/submission",
    |s, w| {
        s.envelope.write_body(w);
        w.element(&s.sender_pk);
    },
    |r| {
        Ok(Submission {
            envelope: Envelope::read_body(r)?,
            sender_pk: r.element()?,
            sig: r.sig()?,
        })
    }
);

/// Level-1 acknowledgment of an accepted envelope.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct L1Receipt {
    pub l1: NodeId,
    pub envelope_digest: [u8; 32],
    pub received_at_ms: u64,
    pub sig: Signature,
}

signed_wire!(
    L1Receipt,
    b"aot/l1-receipt",
    |s, w| {
        w.u16(s.l1.0).raw(&s.envelope_digest).u64(s.received_at_ms);
    },
    |r| {
        Ok(L1Receipt {
            l1: NodeId(r.u16()?),
            envelope_digest: r.array()?,
            received_at_ms: r.u64()?,
            sig: r.sig()?,
        })
    }
);

/// A flushed Level-1 container: β1 shuffled envelopes bound for one Level-2
/// node, signed by the Level-1 node.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct SignedContainer {
    pub l1: NodeId,
    pub l2: NodeId,
    pub seq: u64,
    pub flushed_at_ms: u64,
    pub commitment: PermCommitment,
    pub entries: Vec<Envelope>,
    pub sig: Signature,
}

impl SignedContainer {
    pub fn digest(&self) -> [u8; 32] {
        sha256(&[b"aot/container", &self.encode()])
    }
}

signed_wire!(
    SignedContainer,
    b"aot/container",
    |s, w| {
        w.u16(s.l1.0).u16(s.l2.0).u64(s.seq).u64(s.flushed_at_ms);
        s.commitment.write_body(w);
        write_list(w, &s.entries);
    },
    |r| {
        Ok(SignedContainer {
            l1: NodeId(r.u16()?),
            l2: NodeId(r.u16()?),
            seq: r.u64()?,
            flushed_at_ms: r.u64()?,
            commitment: PermCommitment::read_body(r)?,
            entries: read_list(r)?,
            sig: r.sig()?,
        })
    }
);

/// Signed acknowledgment that a node received a container or bucket with the
/// given digest.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Receipt {
    pub node: NodeId,
    pub digest: [u8; 32],
    pub sig: Signature,
}

impl Receipt {
    pub fn new(node: NodeId, digest: [u8; 32], keys: &KeyPair) -> Self {
        let mut r = Self {
            node,
            digest,
            sig: Signature([0; 64]),
        };
        r.sig = sign::sign(keys, &r.signing_bytes());
        r
    }
}

signed_wire!(
    Receipt,
    b"aot/receipt",
    |s, w| {
        w.u16(s.node.0).raw(&s.digest);
    },
    |r| {
        Ok(Receipt {
            node: NodeId(r.u16()?),
            digest: r.array()?,
            sig: r.sig()?,
        })
    }
);

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum CommitScope {
    Container,
    Batch,
}

/// Permutation commitment broadcast to all nodes before the shuffled set is
/// forwarded.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct CommitmentNotice {
    pub node: NodeId,
    pub scope: CommitScope,
    pub seq: u64,
    pub commitment: PermCommitment,
    pub sig: Signature,
}

signed_wire!(
    CommitmentNotice,
    b"aot/commit-notice",
    |s, w| {
        w.u16(s.node.0)
            .u8(match s.scope {
                CommitScope::Container => 0,
                CommitScope::Batch => 1,
            })
            .u64(s.seq);
        s.commitment.write_body(w);
    },
    |r| {
        Ok(CommitmentNotice {
            node: NodeId(r.u16()?),
            scope: match r.u8()? {
                0 => CommitScope::Container,
                1 => CommitScope::Batch,
                _ => return Err(WireError::Malformed("commit scope")),
            },
            seq: r.u64()?,
            commitment: PermCommitment::read_body(r)?,
            sig: r.sig()?,
        })
    }
);

/// β2 shuffled tagged messages of one Level-2 round.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Batch {
    pub round: u64,
    pub messages: Vec<TaggedMessage>,
    pub perm_commitment: PermCommitment,
}

impl Wire for Batch {
    fn write_body(&self, w: &mut Writer) {
        w.u64(self.round);
        self.perm_commitment.write_body(w);
        write_list(w, &self.messages);
    }
    fn read_body(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(Self {
            round: r.u64()?,
            perm_commitment: PermCommitment::read_body(r)?,
            messages: read_list(r)?,
        })
    }
}

/// β2/α messages sent by one Level-2 node to one Level-3 node in a round.
/// Whether they are real or dummy is known only to the origin.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Bucket {
    pub round: u64,
    pub origin_l2: NodeId,
    pub target_l3: NodeId,
    pub messages: Vec<TaggedMessage>,
    pub sig: Signature,
}

impl Bucket {
    pub fn digest(&self) -> [u8; 32] {
        sha256(&[b"aot/bucket", &self.encode()])
    }
}

signed_wire!(
    Bucket,
    b"aot/bucket",
    |s, w| {
        w.u64(s.round).u16(s.origin_l2.0).u16(s.target_l3.0);
        write_list(w, &s.messages);
    },
    |r| {
        Ok(Bucket {
            round: r.u64()?,
            origin_l2: NodeId(r.u16()?),
            target_l3: NodeId(r.u16()?),
            messages: read_list(r)?,
            sig: r.sig()?,
        })
    }
);

/// `(M, tag)` plus the publishing node's signature over both.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct DeliveryBlob {
    pub node: NodeId,
    pub m: SealedBox,
    pub tag: Tag,
    pub sig: Signature,
}

impl DeliveryBlob {
    pub fn new(node: NodeId, msg: &TaggedMessage, keys: &KeyPair) -> Self {
        let mut b = Self {
            node,
            m: msg.m.clone(),
            tag: msg.tag,
            sig: Signature([0; 64]),
        };
        b.sig = sign::sign(keys, &b.signing_bytes());
        b
    }

    pub fn tagged(&self) -> TaggedMessage {
        TaggedMessage {
            m: self.m.clone(),
            tag: self.tag,
        }
    }
}

impl SignedWire for DeliveryBlob {
    const DOMAIN: &'static [u8] = b"aot/delivery";
    // the signature covers a digest of M and the tag; the encoding carries
    // them in full
    fn unsigned_body(&self, w: &mut Writer) {
        w.u16(self.node.0);
        w.raw(&sha256(&[&self.m.to_bytes(), &self.tag.0]));
    }
    fn signature(&self) -> &Signature {
        &self.sig
    }
}

impl Wire for DeliveryBlob {
    fn write_body(&self, w: &mut Writer) {
        w.u16(self.node.0);
        self.m.write_body(w);
        w.tag(&self.tag).sig(&self.sig);
    }
    fn read_body(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(DeliveryBlob {
            node: NodeId(r.u16()?),
            m: read_fixed_box(r, M_LEN)?,
            tag: r.tag()?,
            sig: r.sig()?,
        })
    }
}

/// Fixed length of an encoded delivery blob; every OT string has this size.
pub const DELIVERY_BLOB_LEN: usize = 1 + 2 + 4 + M_LEN + 32 + 64;

/// A row of a bulletin board with its retrievable blob.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct PublicationEntry {
    pub tag: Tag,
    pub ordinal: u64,
    pub published_at_ms: u64,
    pub blob: DeliveryBlob,
}

impl Wire for PublicationEntry {
    fn write_body(&self, w: &mut Writer) {
        w.tag(&self.tag).u64(self.ordinal).u64(self.published_at_ms);
        self.blob.write_body(w);
    }
    fn read_body(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(Self {
            tag: r.tag()?,
            ordinal: r.u64()?,
            published_at_ms: r.u64()?,
            blob: DeliveryBlob::read_body(r)?,
        })
    }
}

/// The public part of a board row: what clients poll.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct BoardEntry {
    pub tag: Tag,
    pub ordinal: u64,
    pub published_at_ms: u64,
}

impl Wire for BoardEntry {
    fn write_body(&self, w: &mut Writer) {
        w.tag(&self.tag).u64(self.ordinal).u64(self.published_at_ms);
    }
    fn read_body(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(Self {
            tag: r.tag()?,
            ordinal: r.u64()?,
            published_at_ms: r.u64()?,
        })
    }
}

/// First OT message from a Level-3 node. String `i` (1-based) of the session
/// is the blob at ordinal `first_ordinal + i - 1` for `i <= real_count`;
/// later strings are padding.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct OtOffer {
    pub node: NodeId,
    pub session: u64,
    pub first_ordinal: u64,
    pub n: u32,
    pub real_count: u32,
    pub sender_point: GroupElement,
}

impl OtOffer {
    /// 1-based OT choice for `ordinal`, if it falls inside this session.
    pub fn choice_for(&self, ordinal: u64) -> Option<usize> {
        let off = ordinal.checked_sub(self.first_ordinal)?;
        (off < self.real_count as u64).then_some(off as usize + 1)
    }
}

impl Wire for OtOffer {
    fn write_body(&self, w: &mut Writer) {
        w.u16(self.node.0)
            .u64(self.session)
            .u64(self.first_ordinal)
            .u32(self.n)
            .u32(self.real_count)
            .element(&self.sender_point);
    }
    fn read_body(r: &mut Reader<'_>) -> Result<Self, WireError> {
        let v = Self {
            node: NodeId(r.u16()?),
            session: r.u64()?,
            first_ordinal: r.u64()?,
            n: r.u32()?,
            real_count: r.u32()?,
            sender_point: r.element()?,
        };
        if v.n == 0 || v.real_count > v.n {
            return Err(WireError::Malformed("ot offer counts"));
        }
        Ok(v)
    }
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct OtRequest {
    pub session: u64,
    pub receiver_point: GroupElement,
}

impl Wire for OtRequest {
    fn write_body(&self, w: &mut Writer) {
        w.u64(self.session).element(&self.receiver_point);
    }
    fn read_body(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(Self {
            session: r.u64()?,
            receiver_point: r.element()?,
        })
    }
}

/// Second OT message: one ciphertext per string, signed by the node so a
/// retriever can later prove what it was served.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct OtResponse {
    pub node: NodeId,
    pub session: u64,
    pub sender_point: GroupElement,
    pub receiver_point: GroupElement,
    pub ciphertexts: Vec<Vec<u8>>,
    pub sig: Signature,
}

impl OtResponse {
    fn ciphertext_digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for c in &self.ciphertexts {
            h.update((c.len() as u32).to_be_bytes());
            h.update(c);
        }
        h.finalize().into()
    }
}

impl SignedWire for OtResponse {
    const DOMAIN: &'static [u8] = b"aot/ot-response";
    fn unsigned_body(&self, w: &mut Writer) {
        w.u16(self.node.0)
            .u64(self.session)
            .element(&self.sender_point)
            .element(&self.receiver_point)
            .u32(self.ciphertexts.len() as u32)
            .raw(&self.ciphertext_digest());
    }
    fn signature(&self) -> &Signature {
        &self.sig
    }
}

impl Wire for OtResponse {
    fn write_body(&self, w: &mut Writer) {
        w.u16(self.node.0)
            .u64(self.session)
            .element(&self.sender_point)
            .element(&self.receiver_point)
            .u32(self.ciphertexts.len() as u32);
        for c in &self.ciphertexts {
            w.var(c);
        }
        w.sig(&self.sig);
    }
    fn read_body(r: &mut Reader<'_>) -> Result<Self, WireError> {
        let node = NodeId(r.u16()?);
        let session = r.u64()?;
        let sender_point = r.element()?;
        let receiver_point = r.element()?;
        let n = r.u32()? as usize;
        if n > r.remaining() {
            return Err(WireError::Malformed("ciphertext count"));
        }
        let ciphertexts = (0..n)
            .map(|_| r.var().map(<[u8]>::to_vec))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            node,
            session,
            sender_point,
            receiver_point,
            ciphertexts,
            sig: r.sig()?,
        })
    }
}

/// Hash commitment to a node's division value.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct DivisionCommit {
    pub node: NodeId,
    pub commitment: [u8; 32],
    pub sig: Signature,
}

signed_wire!(
    DivisionCommit,
    b"aot/division-commit",
    |s, w| {
        w.u16(s.node.0).raw(&s.commitment);
    },
    |r| {
        Ok(DivisionCommit {
            node: NodeId(r.u16()?),
            commitment: r.array()?,
            sig: r.sig()?,
        })
    }
);

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct DivisionReveal {
    pub node: NodeId,
    pub value: [u8; 32],
    pub nonce: [u8; 32],
    pub sig: Signature,
}

signed_wire!(
    DivisionReveal,
    b"aot/division-reveal",
    |s, w| {
        w.u16(s.node.0).raw(&s.value).raw(&s.nonce);
    },
    |r| {
        Ok(DivisionReveal {
            node: NodeId(r.u16()?),
            value: r.array()?,
            nonce: r.array()?,
            sig: r.sig()?,
        })
    }
);

/// A sent message still awaiting acknowledgment.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct PendingSend {
    pub counter: u64,
    pub tag: Tag,
    /// The recipient box, kept so a resend reuses the same encrypted payload.
    pub m: SealedBox,
    pub envelope_digest: [u8; 32],
    pub l1: NodeId,
    pub sent_at_ms: u64,
    pub post_deadline_ms: u64,
    pub ack_deadline_ms: u64,
    /// Board position once the sender has seen its own tag posted.
    pub posted: Option<(NodeId, u64)>,
    pub attempt: u32,
}

impl Wire for PendingSend {
    fn write_body(&self, w: &mut Writer) {
        w.u64(self.counter).tag(&self.tag);
        self.m.write_body(w);
        w.raw(&self.envelope_digest)
            .u16(self.l1.0)
            .u64(self.sent_at_ms)
            .u64(self.post_deadline_ms)
            .u64(self.ack_deadline_ms);
        match self.posted {
            None => {
                w.u8(0);
            }
            Some((n, o)) => {
                w.u8(1).u16(n.0).u64(o);
            }
        }
        w.u32(self.attempt);
    }
    fn read_body(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(Self {
            counter: r.u64()?,
            tag: r.tag()?,
            m: read_fixed_box(r, M_LEN)?,
            envelope_digest: r.array()?,
            l1: NodeId(r.u16()?),
            sent_at_ms: r.u64()?,
            post_deadline_ms: r.u64()?,
            ack_deadline_ms: r.u64()?,
            posted: match r.u8()? {
                0 => None,
                1 => Some((NodeId(r.u16()?), r.u64()?)),
                _ => return Err(WireError::Malformed("posted flag")),
            },
            attempt: r.u32()?,
        })
    }
}

/// Per-peer state: shared secret, counters in both directions, and messages
/// awaiting acknowledgment keyed by counter.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct PairState {
    pub peer_pk: GroupElement,
    pub sigma: [u8; 32],
    /// Counter for the next message this side sends.
    pub next_out: u64,
    /// Lowest peer counter not yet received.
    pub next_in: u64,
    /// Direction of messages this side sends.
    pub direction: Direction,
    pub pending: BTreeMap<u64, PendingSend>,
}

impl PairState {
    pub fn new(own_pk: &GroupElement, peer_pk: GroupElement, sigma: [u8; 32]) -> Self {
        Self {
            direction: Direction::of_sender(own_pk, &peer_pk),
            peer_pk,
            sigma,
            next_out: 1,
            next_in: 1,
            pending: BTreeMap::new(),
        }
    }
}

impl Wire for PairState {
    fn write_body(&self, w: &mut Writer) {
        w.element(&self.peer_pk)
            .raw(&self.sigma)
            .u64(self.next_out)
            .u64(self.next_in)
            .u8(self.direction.bit());
        let pending: Vec<PendingSend> = self.pending.values().cloned().collect();
        write_list(w, &pending);
    }
    fn read_body(r: &mut Reader<'_>) -> Result<Self, WireError> {
        let peer_pk = r.element()?;
        let sigma = r.array()?;
        let next_out = r.u64()?;
        let next_in = r.u64()?;
        let direction =
            Direction::from_bit(r.u8()?).ok_or(WireError::Malformed("direction bit"))?;
        let list: Vec<PendingSend> = read_list(r)?;
        let mut pending = BTreeMap::new();
        for p in list {
            if pending.insert(p.counter, p).is_some() {
                return Err(WireError::Malformed("duplicate pending counter"));
            }
        }
        Ok(Self {
            peer_pk,
            sigma,
            next_out,
            next_in,
            direction,
            pending,
        })
    }
}

impl Wire for Permutation {
    fn write_body(&self, w: &mut Writer) {
        w.var(&self.encode());
    }
    fn read_body(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Permutation::decode(r.var()?).map_err(|_| WireError::Malformed("permutation"))
    }
}

serde_via_wire!(
    Payload,
    TaggedMessage,
    EnvelopeInner,
    Envelope,
    Submission,
    L1Receipt,
    SignedContainer,
    Receipt,
    CommitmentNotice,
    Batch,
    Bucket,
    DeliveryBlob,
    PublicationEntry,
    OtOffer,
    OtRequest,
    OtResponse,
    DivisionCommit,
    DivisionReveal,
    PendingSend,
    PairState,
);
