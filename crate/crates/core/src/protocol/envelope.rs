//! Building the two nested boxes a sender submits, and opening them at
//! Level 2.

use rand::{CryptoRng, RngCore};

use super::codec::Wire;
use super::types::{Envelope, EnvelopeInner, NodeId, Payload, PAYLOAD_X_LEN};
use crate::crypto::sealed::{self, SealedBox};
use crate::crypto::{kdf_tag, GroupElement, KeyPair, Tag};
use crate::error::ProtocolError;
use crate::params::Topology;
use crate::protocol::PairState;

/// `M = E[p_B, (x, n)]`, sealed with the sender's long-term key.
pub fn seal_payload<R: RngCore + CryptoRng>(
    sender: &KeyPair,
    recipient_pk: &GroupElement,
    x: &[u8],
    rng: &mut R,
) -> Result<SealedBox, ProtocolError> {
    if x.len() > PAYLOAD_X_LEN {
        return Err(ProtocolError::PayloadTooLong {
            len: x.len(),
            max: PAYLOAD_X_LEN,
        });
    }
    let mut nonce = [0u8; 24];
    rng.fill_bytes(&mut nonce);
    let payload = Payload {
        x: x.to_vec(),
        nonce,
    };
    Ok(sealed::seal(sender, recipient_pk, &payload.encode(), rng)?)
}

/// Opens `M` and decodes the payload, returning the sealing key too.
pub fn open_payload(
    recipient: &KeyPair,
    m: &SealedBox,
) -> Result<(GroupElement, Payload), ProtocolError> {
    let (sender, plain) = sealed::open_from_any(recipient, m)?;
    Ok((sender, Payload::decode(&plain)?))
}

/// `E[p_{N2}, (M, k, N2, ts)]` sealed under a fresh key pair so that the
/// Level-2 node learns nothing about the sender.
pub fn wrap_envelope<R: RngCore + CryptoRng>(
    m: SealedBox,
    tag: Tag,
    l2: NodeId,
    l2_pk: &GroupElement,
    ts: u64,
    rng: &mut R,
) -> Envelope {
    let inner = EnvelopeInner { m, tag, l2, ts };
    let ephemeral = KeyPair::generate(rng);
    let sealed = sealed::seal(&ephemeral, l2_pk, &inner.encode(), rng)
        .expect("envelope inner is below the seal limit");
    Envelope {
        inner: sealed,
        l2_hint: l2,
    }
}

/// Builds the envelope for the pair's next outgoing counter. Returns the
/// envelope, its tag, and `M` so the caller can keep them for resends.
#[allow(clippy::too_many_arguments)]
pub fn build_envelope<R: RngCore + CryptoRng>(
    sender: &KeyPair,
    pair: &PairState,
    x: &[u8],
    topology: &Topology,
    l2: NodeId,
    now_secs: u64,
    rng: &mut R,
) -> Result<(Envelope, Tag, SealedBox), ProtocolError> {
    let l2_pk = topology.l2_key(l2).ok_or(ProtocolError::UnknownNode(l2))?;
    let m = seal_payload(sender, &pair.peer_pk, x, rng)?;
    let tag = kdf_tag(&pair.sigma, pair.next_out, pair.direction);
    let env = wrap_envelope(m.clone(), tag, l2, l2_pk, now_secs, rng);
    Ok((env, tag, m))
}

/// Level-2 side: opens the envelope and checks the embedded node id.
pub fn open_envelope(
    node: NodeId,
    keys: &KeyPair,
    env: &Envelope,
) -> Result<EnvelopeInner, ProtocolError> {
    let (_, plain) = sealed::open_from_any(keys, &env.inner)?;
    let inner = EnvelopeInner::decode(&plain)?;
    if inner.l2 != node || env.l2_hint != node {
        return Err(ProtocolError::WrongNode {
            expected: node,
            found: inner.l2,
        });
    }
    Ok(inner)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::keygen;
    use crate::params::NetworkParams;
    use crate::protocol::ENVELOPE_LEN;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn setup() -> (Topology, Vec<(NodeId, KeyPair)>, KeyPair, PairState) {
        let (topo, keys) = Topology::generate(&NetworkParams::default(), 2);
        let a = keygen(b"a");
        let b = keygen(b"b");
        let pair = PairState::new(&a.public, b.public, [3; 32]);
        (topo, keys, a, pair)
    }

    #[test]
    fn level2_opens_what_the_sender_built() {
        let (topo, keys, a, pair) = setup();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let (l2, l2_keys) = keys[2].clone();
        let (env, tag, m) = build_envelope(&a, &pair, b"hello", &topo, l2, 77, &mut rng).unwrap();
        assert_eq!(env.encode().len(), ENVELOPE_LEN);
        assert_eq!(tag, kdf_tag(&[3; 32], 1, pair.direction));
        let inner = open_envelope(l2, &l2_keys, &env).unwrap();
        assert_eq!((inner.m, inner.tag, inner.l2, inner.ts), (m, tag, l2, 77));
        let other = keys[3].clone();
        assert!(open_envelope(other.0, &other.1, &env).is_err());
    }

    #[test]
    fn mismatched_node_id_is_reported() {
        let (topo, keys, a, _) = setup();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let (l2, l2_keys) = keys[2].clone();
        let m = seal_payload(&a, &keygen(b"b").public, b"x", &mut rng).unwrap();
        let env = wrap_envelope(
            m,
            Tag([0; 32]),
            keys[3].0,
            topo.l2_key(l2).unwrap(),
            0,
            &mut rng,
        );
        assert!(matches!(
            open_envelope(l2, &l2_keys, &env),
            Err(ProtocolError::WrongNode { .. })
        ));
    }

    #[test]
    fn payload_limits() {
        let (topo, keys, a, pair) = setup();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let long = vec![0u8; PAYLOAD_X_LEN + 1];
        assert!(build_envelope(&a, &pair, &long, &topo, keys[2].0, 0, &mut rng).is_err());
        assert!(build_envelope(&a, &pair, b"x", &topo, NodeId(99), 0, &mut rng).is_err());
        let full = vec![0xab; PAYLOAD_X_LEN];
        let b = keygen(b"b");
        let m = seal_payload(&a, &b.public, &full, &mut rng).unwrap();
        let short = seal_payload(&a, &b.public, b"", &mut rng).unwrap();
        assert_eq!(m.encoded_len(), short.encoded_len());
        let (sender, payload) = open_payload(&b, &m).unwrap();
        assert_eq!((sender, payload.x), (a.public, full));
    }
}
