//! Messages carried on simulated links, their wire encoding, and the
//! authenticated link channel used by the socket transport.

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use aot_core::crypto::{GroupElement, KeyPair, Tag};
use aot_core::protocol::{
    BoardEntry, Bucket, L1Receipt, NodeId, OtOffer, OtRequest, OtResponse, Reader, Receipt,
    SignedContainer, Submission, Wire, WireError, Writer,
};

/// A party on the network.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
pub enum Endpoint {
    Client(u32),
    Node(NodeId),
}

impl Endpoint {
    fn write(&self, w: &mut Writer) {
        match self {
            Endpoint::Client(i) => w.u8(0).u32(*i),
            Endpoint::Node(n) => w.u8(1).u32(n.0 as u32),
        };
    }

    pub fn label(&self) -> String {
        match self {
            Endpoint::Client(i) => format!("c{i}"),
            Endpoint::Node(n) => format!("n{}", n.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Frame {
    Submit(Submission),
    L1Receipt(L1Receipt),
    Container(SignedContainer),
    ContainerReceipt(Receipt),
    Bucket(Bucket),
    BucketReceipt(Receipt),
    /// New board rows of the sending Level-3 node.
    Board(Vec<BoardEntry>),
    /// Asks a Level-3 node for an OT offer. `ticket` is the client's
    /// correlation id, echoed back.
    OtOpen {
        ticket: u64,
    },
    OtOffer {
        ticket: u64,
        offer: OtOffer,
    },
    OtRequest {
        ticket: u64,
        request: OtRequest,
    },
    OtResponse {
        ticket: u64,
        response: OtResponse,
    },
    /// A sender tells its Level-1 node that a receipted message was never
    /// posted.
    Report {
        receipt: L1Receipt,
        expected_tag: Tag,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameKind {
    Submit,
    L1Receipt,
    Container,
    ContainerReceipt,
    Bucket,
    BucketReceipt,
    Board,
    OtOpen,
    OtOffer,
    OtRequest,
    OtResponse,
    Report,
}

impl Frame {
    pub fn kind(&self) -> FrameKind {
        match self {
            Frame::Submit(_) => FrameKind::Submit,
            Frame::L1Receipt(_) => FrameKind::L1Receipt,
            Frame::Container(_) => FrameKind::Container,
            Frame::ContainerReceipt(_) => FrameKind::ContainerReceipt,
            Frame::Bucket(_) => FrameKind::Bucket,
            Frame::BucketReceipt(_) => FrameKind::BucketReceipt,
            Frame::Board(_) => FrameKind::Board,
            Frame::OtOpen { .. } => FrameKind::OtOpen,
            Frame::OtOffer { .. } => FrameKind::OtOffer,
            Frame::OtRequest { .. } => FrameKind::OtRequest,
            Frame::OtResponse { .. } => FrameKind::OtResponse,
            Frame::Report { .. } => FrameKind::Report,
        }
    }

    /// Encoded size in bytes, as an observer of the link would see it.
    pub fn wire_len(&self) -> usize {
        self.encode().len()
    }
}

impl Wire for Frame {
    fn write_body(&self, w: &mut Writer) {
        w.u8(self.kind() as u8);
        match self {
            Frame::Submit(s) => s.write_body(w),
            Frame::L1Receipt(r) => r.write_body(w),
            Frame::Container(c) => c.write_body(w),
            Frame::ContainerReceipt(r) | Frame::BucketReceipt(r) => r.write_body(w),
            Frame::Bucket(b) => b.write_body(w),
            Frame::Board(rows) => {
                w.u32(rows.len() as u32);
                for row in rows {
                    row.write_body(w);
                }
            }
            Frame::OtOpen { ticket } => {
                w.u64(*ticket);
            }
            Frame::OtOffer { ticket, offer } => {
                w.u64(*ticket);
                offer.write_body(w);
            }
            Frame::OtRequest { ticket, request } => {
                w.u64(*ticket);
                request.write_body(w);
            }
            Frame::OtResponse { ticket, response } => {
                w.u64(*ticket);
                response.write_body(w);
            }
            Frame::Report {
                receipt,
                expected_tag,
            } => {
                receipt.write_body(w);
                w.tag(expected_tag);
            }
        }
    }

    fn read_body(r: &mut Reader<'_>) -> Result<Self, WireError> {
        let kind = r.u8()?;
        Ok(match kind {
            0 => Frame::Submit(Submission::read_body(r)?),
            1 => Frame::L1Receipt(L1Receipt::read_body(r)?),
            2 => Frame::Container(SignedContainer::read_body(r)?),
            3 => Frame::ContainerReceipt(Receipt::read_body(r)?),
            4 => Frame::Bucket(Bucket::read_body(r)?),
            5 => Frame::BucketReceipt(Receipt::read_body(r)?),
            6 => {
                let n = r.u32()? as usize;
                if n > r.remaining() {
                    return Err(WireError::Malformed("board row count"));
                }
                let rows = (0..n)
                    .map(|_| BoardEntry::read_body(r))
                    .collect::<Result<_, _>>()?;
                Frame::Board(rows)
            }
            7 => Frame::OtOpen { ticket: r.u64()? },
            8 => Frame::OtOffer {
                ticket: r.u64()?,
                offer: OtOffer::read_body(r)?,
            },
            9 => Frame::OtRequest {
                ticket: r.u64()?,
                request: OtRequest::read_body(r)?,
            },
            10 => Frame::OtResponse {
                ticket: r.u64()?,
                response: OtResponse::read_body(r)?,
            },
            11 => Frame::Report {
                receipt: L1Receipt::read_body(r)?,
                expected_tag: r.tag()?,
            },
            _ => return Err(WireError::Malformed("frame kind")),
        })
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum LinkError {
    #[error("link frame failed authentication")]
    Auth,
    #[error("link frame out of order: expected {expected}, got {got}")]
    Sequence { expected: u64, got: u64 },
    #[error("malformed frame: {0}")]
    Wire(#[from] WireError),
}

/// Symmetric key of the link between two registered parties, derived from
/// their static keys. Stands in for a mutually authenticated TLS session.
pub fn link_key(own: &KeyPair, peer: &GroupElement) -> [u8; 32] {
    let shared = peer.mul(own.secret());
    let (lo, hi) = if own.public.as_bytes() <= peer.as_bytes() {
        (own.public, *peer)
    } else {
        (*peer, own.public)
    };
    let mut h = Sha256::new();
    h.update(b"aot/link");
    h.update(lo.as_bytes());
    h.update(hi.as_bytes());
    h.update(shared.as_bytes());
    h.finalize().into()
}

fn nonce(seq: u64) -> [u8; 12] {
    let mut n = [0u8; 12];
    n[4..].copy_from_slice(&seq.to_be_bytes());
    n
}

fn header(from: Endpoint, to: Endpoint, seq: u64) -> Vec<u8> {
    let mut w = Writer::new();
    from.write(&mut w);
    to.write(&mut w);
    w.u64(seq);
    w.finish()
}

/// One direction of a link: encrypts frames under the link key with a
/// strictly increasing sequence number bound into the nonce and AAD.
pub struct LinkSender {
    cipher: ChaCha20Poly1305,
    from: Endpoint,
    to: Endpoint,
    seq: u64,
}

impl LinkSender {
    pub fn new(key: &[u8; 32], from: Endpoint, to: Endpoint) -> Self {
        Self {
            cipher: ChaCha20Poly1305::new(Key::from_slice(key)),
            from,
            to,
            seq: 0,
        }
    }

    /// `seq ‖ ciphertext` for one frame.
    pub fn seal(&mut self, frame: &Frame) -> Vec<u8> {
        let seq = self.seq;
        self.seq += 1;
        let aad = header(self.from, self.to, seq);
        let ct = self
            .cipher
            .encrypt(
                Nonce::from_slice(&nonce(seq)),
                Payload {
                    msg: &frame.encode(),
                    aad: &aad,
                },
            )
            .expect("in-memory encryption cannot fail");
        let mut out = seq.to_be_bytes().to_vec();
        out.extend_from_slice(&ct);
        out
    }
}

pub struct LinkReceiver {
    cipher: ChaCha20Poly1305,
    from: Endpoint,
    to: Endpoint,
    next: u64,
}

impl LinkReceiver {
    pub fn new(key: &[u8; 32], from: Endpoint, to: Endpoint) -> Self {
        Self {
            cipher: ChaCha20Poly1305::new(Key::from_slice(key)),
            from,
            to,
            next: 0,
        }
    }

    pub fn open(&mut self, bytes: &[u8]) -> Result<Frame, LinkError> {
        if bytes.len() < 8 {
            return Err(LinkError::Auth);
        }
        let seq = u64::from_be_bytes(bytes[..8].try_into().expect("8 bytes"));
        if seq != self.next {
            return Err(LinkError::Sequence {
                expected: self.next,
                got: seq,
            });
        }
        let aad = header(self.from, self.to, seq);
        let plain = self
            .cipher
            .decrypt(
                Nonce::from_slice(&nonce(seq)),
                Payload {
                    msg: &bytes[8..],
                    aad: &aad,
                },
            )
            .map_err(|_| LinkError::Auth)?;
        self.next += 1;
        Ok(Frame::decode(&plain)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use aot_core::crypto::keygen;

    #[test]
    fn link_keys_agree_and_frames_roundtrip() {
        let a = keygen(b"a");
        let b = keygen(b"b");
        let k1 = link_key(&a, &b.public);
        assert_eq!(k1, link_key(&b, &a.public));
        let (from, to) = (Endpoint::Client(3), Endpoint::Node(NodeId(7)));
        let mut tx = LinkSender::new(&k1, from, to);
        let mut rx = LinkReceiver::new(&k1, from, to);
        let f = Frame::OtOpen { ticket: 42 };
        assert_eq!(rx.open(&tx.seal(&f)).unwrap(), f);
        let g = Frame::Board(vec![BoardEntry {
            tag: Tag([1; 32]),
            ordinal: 9,
            published_at_ms: 10,
        }]);
        assert_eq!(rx.open(&tx.seal(&g)).unwrap(), g);
    }

    #[test]
    fn link_rejects_tamper_replay_and_wrong_direction() {
        let key = [5u8; 32];
        let (from, to) = (Endpoint::Client(1), Endpoint::Node(NodeId(2)));
        let mut tx = LinkSender::new(&key, from, to);
        let mut rx = LinkReceiver::new(&key, from, to);
        let sealed = tx.seal(&Frame::OtOpen { ticket: 1 });
        let mut bad = sealed.clone();
        *bad.last_mut().unwrap() ^= 1;
        assert_eq!(rx.open(&bad), Err(LinkError::Auth));
        rx.open(&sealed).unwrap();
        assert!(matches!(rx.open(&sealed), Err(LinkError::Sequence { .. })));
        let mut back = LinkReceiver::new(&key, to, from);
        assert_eq!(back.open(&sealed), Err(LinkError::Auth));
    }
}
