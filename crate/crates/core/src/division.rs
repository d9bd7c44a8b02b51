//! Active/passive division of Level-3 nodes.
//!
//! At network start every Level-3 node commits to a random value and then
//! reveals it; the XOR of all valid reveals seeds a per-round value `V_l`
//! from which every party derives the same active set and the same
//! partition of batch positions into buckets.

use rand::seq::SliceRandom;
use rand::{CryptoRng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;

use crate::crypto::kdf::{round_value, ROUND_SUBSTRING_LEN};
use crate::crypto::sign;
use crate::crypto::{GroupElement, KeyPair};
use crate::protocol::{DivisionCommit, DivisionReveal, NodeId, SignedWire};

/// Active set and bucket assignment for one Level-2 round.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct RoundPartition {
    pub round: u64,
    /// The α active nodes, in sorted-`V` order; block `i` goes to `active[i]`.
    pub active: Vec<NodeId>,
    pub passive: Vec<NodeId>,
    /// α disjoint blocks of β2/α batch positions covering `0..β2`.
    pub blocks: Vec<Vec<usize>>,
}

impl RoundPartition {
    pub fn is_active(&self, node: NodeId) -> bool {
        self.active.contains(&node)
    }
}

/// Derives the round's partition. `l3` lists every Level-3 node; its order
/// fixes which substring of `V_l` belongs to which node, so callers pass the
/// topology order (ascending id).
pub fn compute_partition(
    round: u64,
    xor_value: &[u8; 32],
    l3: &[NodeId],
    alpha: usize,
    beta2: usize,
) -> RoundPartition {
    assert!(alpha >= 1 && alpha <= l3.len(), "alpha out of range");
    assert_eq!(beta2 % alpha, 0, "alpha must divide beta2");
    let v = round_value(xor_value, round, l3.len());
    let mut keyed: Vec<([u8; ROUND_SUBSTRING_LEN], NodeId)> = l3
        .iter()
        .enumerate()
        .map(|(j, id)| {
            let sub = v[j * ROUND_SUBSTRING_LEN..(j + 1) * ROUND_SUBSTRING_LEN]
                .try_into()
                .expect("substring length");
            (sub, *id)
        })
        .collect();
    keyed.sort();
    let active = keyed[..alpha].iter().map(|(_, id)| *id).collect();
    let passive = keyed[alpha..].iter().map(|(_, id)| *id).collect();

    let mut seed_hash = Sha256::new();
    seed_hash.update(b"aot/partition");
    seed_hash.update(&v);
    let mut rng = ChaCha20Rng::from_seed(seed_hash.finalize().into());
    let mut positions: Vec<usize> = (0..beta2).collect();
    positions.shuffle(&mut rng);
    let blocks = positions
        .chunks(beta2 / alpha)
        .map(<[usize]>::to_vec)
        .collect();
    RoundPartition {
        round,
        active,
        passive,
        blocks,
    }
}

fn value_commitment(node: NodeId, value: &[u8; 32], nonce: &[u8; 32]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"aot/division/value");
    h.update(node.0.to_be_bytes());
    h.update(value);
    h.update(nonce);
    h.finalize().into()
}

/// One Level-3 node's contribution to the initiation phase.
pub struct DivisionContribution {
    node: NodeId,
    keys: KeyPair,
    value: [u8; 32],
    nonce: [u8; 32],
}

impl DivisionContribution {
    pub fn new<R: RngCore + CryptoRng>(node: NodeId, keys: KeyPair, rng: &mut R) -> Self {
        let mut value = [0u8; 32];
        let mut nonce = [0u8; 32];
        rng.fill_bytes(&mut value);
        rng.fill_bytes(&mut nonce);
        Self {
            node,
            keys,
            value,
            nonce,
        }
    }

    pub fn value(&self) -> &[u8; 32] {
        &self.value
    }

    pub fn commit(&self) -> DivisionCommit {
        let mut c = DivisionCommit {
            node: self.node,
            commitment: value_commitment(self.node, &self.value, &self.nonce),
            sig: sign::Signature([0; 64]),
        };
        c.sig = sign::sign(&self.keys, &c.signing_bytes());
        c
    }

    pub fn reveal(&self) -> DivisionReveal {
        self.reveal_value(self.value)
    }

    /// A reveal of an arbitrary value, as a misbehaving node would send.
    pub fn reveal_value(&self, value: [u8; 32]) -> DivisionReveal {
        let mut r = DivisionReveal {
            node: self.node,
            value,
            nonce: self.nonce,
            sig: sign::Signature([0; 64]),
        };
        r.sig = sign::sign(&self.keys, &r.signing_bytes());
        r
    }
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct DivisionOutcome {
    pub xor: [u8; 32],
    /// Nodes whose reveal was missing, unsigned, or did not match the
    /// commitment. Their values are excluded from the XOR.
    pub flagged: Vec<NodeId>,
}

/// Combines commitments and reveals as every participant does.
pub fn combine_division(
    keys: &BTreeMap<NodeId, GroupElement>,
    commits: &[DivisionCommit],
    reveals: &[DivisionReveal],
) -> DivisionOutcome {
    let commits: BTreeMap<NodeId, &DivisionCommit> = commits
        .iter()
        .filter(|c| keys.get(&c.node).is_some_and(|pk| c.verify_sig(pk)))
        .map(|c| (c.node, c))
        .collect();
    let reveals: BTreeMap<NodeId, &DivisionReveal> = reveals
        .iter()
        .filter(|r| keys.get(&r.node).is_some_and(|pk| r.verify_sig(pk)))
        .map(|r| (r.node, r))
        .collect();
    let mut xor = [0u8; 32];
    let mut flagged = Vec::new();
    for node in keys.keys() {
        let ok = match (commits.get(node), reveals.get(node)) {
            (Some(c), Some(r)) => value_commitment(*node, &r.value, &r.nonce) == c.commitment,
            _ => false,
        };
        if ok {
            for (x, v) in xor.iter_mut().zip(reveals[node].value) {
                *x ^= v;
            }
        } else {
            flagged.push(*node);
        }
    }
    DivisionOutcome { xor, flagged }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::keygen;

    fn setup(n: u16) -> (Vec<DivisionContribution>, BTreeMap<NodeId, GroupElement>) {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let parts: Vec<_> = (1..=n)
            .map(|i| DivisionContribution::new(NodeId(i), keygen(&[i as u8; 32]), &mut rng))
            .collect();
        let keys = parts.iter().map(|p| (p.node, p.keys.public)).collect();
        (parts, keys)
    }

    #[test]
    fn honest_nodes_agree() {
        let (parts, keys) = setup(5);
        let commits: Vec<_> = parts.iter().map(|p| p.commit()).collect();
        let reveals: Vec<_> = parts.iter().map(|p| p.reveal()).collect();
        let a = combine_division(&keys, &commits, &reveals);
        let mut rev = reveals.clone();
        rev.reverse();
        let b = combine_division(&keys, &commits, &rev);
        assert_eq!(a, b);
        assert!(a.flagged.is_empty());
    }

    #[test]
    fn single_node_xor_is_its_value() {
        let (parts, keys) = setup(1);
        let out = combine_division(&keys, &[parts[0].commit()], &[parts[0].reveal()]);
        assert_eq!(&out.xor, parts[0].value());
    }

    #[test]
    fn altered_reveal_flagged() {
        let (parts, keys) = setup(3);
        let commits: Vec<_> = parts.iter().map(|p| p.commit()).collect();
        let mut reveals: Vec<_> = parts.iter().map(|p| p.reveal()).collect();
        reveals[1] = parts[1].reveal_value([0xee; 32]);
        let out = combine_division(&keys, &commits, &reveals);
        assert_eq!(out.flagged, vec![NodeId(2)]);
        let mut expect = *parts[0].value();
        for (x, v) in expect.iter_mut().zip(parts[2].value()) {
            *x ^= v;
        }
        assert_eq!(out.xor, expect);
    }

    #[test]
    fn partition_shape() {
        let l3: Vec<NodeId> = (10..15).map(NodeId).collect();
        let p = compute_partition(1, &[7u8; 32], &l3, 2, 8);
        assert_eq!(p.active.len(), 2);
        assert_eq!(p.passive.len(), 3);
        assert_eq!(p.blocks.len(), 2);
        let mut all: Vec<usize> = p.blocks.concat();
        all.sort();
        assert_eq!(all, (0..8).collect::<Vec<_>>());
        assert_eq!(p, compute_partition(1, &[7u8; 32], &l3, 2, 8));
    }
}
