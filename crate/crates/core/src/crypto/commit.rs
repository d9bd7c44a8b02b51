//! Pedersen commitments to permutations.
//!
//! A permutation is encoded as its image sequence, hashed to a scalar `m`,
//! and committed as `C = mG + rH` where `H` is a hash-derived generator with
//! unknown discrete log relative to `G`.

use rand::seq::SliceRandom;
use rand::{CryptoRng, Rng, RngCore};
use serde::{Deserialize, Serialize};
use std::sync::OnceLock;

use super::group::{hash_to_scalar, scalar_from_bytes, GroupElement, Scalar, ELEMENT_LEN};
use super::CryptoError;

/// `out[i] = items[perm[i]]`.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct Permutation(Vec<u32>);

impl Permutation {
    pub fn new(images: Vec<u32>) -> Result<Self, CryptoError> {
        let mut seen = vec![false; images.len()];
        for &i in &images {
            let slot = seen
                .get_mut(i as usize)
                .ok_or(CryptoError::MalformedOpening)?;
            if *slot {
                return Err(CryptoError::MalformedOpening);
            }
            *slot = true;
        }
        Ok(Self(images))
    }

    pub fn identity(n: usize) -> Self {
        Self((0..n as u32).collect())
    }

    pub fn random<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let mut v: Vec<u32> = (0..n as u32).collect();
        v.shuffle(rng);
        Self(v)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn images(&self) -> &[u32] {
        &self.0
    }

    pub fn apply<T: Clone>(&self, items: &[T]) -> Vec<T> {
        assert_eq!(items.len(), self.0.len(), "permutation size mismatch");
        self.0.iter().map(|&i| items[i as usize].clone()).collect()
    }

    /// `u32` count followed by each image, all big-endian.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 4 * self.0.len());
        out.extend_from_slice(&(self.0.len() as u32).to_be_bytes());
        for i in &self.0 {
            out.extend_from_slice(&i.to_be_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CryptoError> {
        let (count, rest) = bytes
            .split_first_chunk::<4>()
            .ok_or(CryptoError::MalformedOpening)?;
        let count = u32::from_be_bytes(*count) as usize;
        if rest.len() != count.checked_mul(4).ok_or(CryptoError::MalformedOpening)? {
            return Err(CryptoError::MalformedOpening);
        }
        let images = rest
            .chunks_exact(4)
            .map(|c| u32::from_be_bytes(c.try_into().expect("chunk of 4")))
            .collect();
        Self::new(images)
    }
}

fn pedersen_h() -> &'static GroupElement {
    static H: OnceLock<GroupElement> = OnceLock::new();
    H.get_or_init(|| GroupElement::hash_to_group(b"aot/pedersen/H", b""))
}

fn message_scalar(perm: &Permutation) -> Scalar {
    hash_to_scalar(b"aot/pedersen/perm", &[&perm.encode()])
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct PermCommitment(pub GroupElement);

impl PermCommitment {
    pub fn to_bytes(&self) -> [u8; ELEMENT_LEN] {
        self.0.to_bytes()
    }

    pub fn from_bytes(bytes: &[u8; ELEMENT_LEN]) -> Result<Self, CryptoError> {
        GroupElement::from_bytes(bytes).map(Self)
    }
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct PermOpening {
    pub perm: Permutation,
    pub blinding: Scalar,
}

impl PermOpening {
    /// Blinding scalar followed by the permutation encoding.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.blinding.to_bytes().to_vec();
        out.extend_from_slice(&self.perm.encode());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        let (blinding, rest) = bytes
            .split_first_chunk::<32>()
            .ok_or(CryptoError::MalformedOpening)?;
        Ok(Self {
            blinding: scalar_from_bytes(blinding).map_err(|_| CryptoError::MalformedOpening)?,
            perm: Permutation::decode(rest)?,
        })
    }
}

pub fn commit_perm_with_blinding(perm: &Permutation, blinding: Scalar) -> PermCommitment {
    let m = message_scalar(perm);
    PermCommitment(GroupElement::base_mul(&m).add(&pedersen_h().mul(&blinding)))
}

pub fn commit_perm<R: RngCore + CryptoRng>(
    perm: &Permutation,
    rng: &mut R,
) -> (PermCommitment, PermOpening) {
    let blinding = Scalar::random(rng);
    (
        commit_perm_with_blinding(perm, blinding),
        PermOpening {
            perm: perm.clone(),
            blinding,
        },
    )
}

pub fn verify_perm(commitment: &PermCommitment, opening: &PermOpening) -> bool {
    commit_perm_with_blinding(&opening.perm, opening.blinding) == *commitment
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn commit_verify() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let p = Permutation::random(16, &mut rng);
        let (c, o) = commit_perm(&p, &mut rng);
        assert!(verify_perm(&c, &o));
        let mut other = p.images().to_vec();
        other.swap(0, 1);
        let wrong = PermOpening {
            perm: Permutation::new(other).unwrap(),
            blinding: o.blinding,
        };
        assert!(!verify_perm(&c, &wrong));
        let wrong_blind = PermOpening {
            perm: p.clone(),
            blinding: o.blinding + Scalar::ONE,
        };
        assert!(!verify_perm(&c, &wrong_blind));
    }

    #[test]
    fn golden_identity_on_8() {
        // cross-checked against libsodium's ristretto255
        let c = commit_perm_with_blinding(&Permutation::identity(8), Scalar::from(7u64));
        let hex: String = c.to_bytes().iter().map(|x| format!("{x:02x}")).collect();
        assert_eq!(
            hex,
            "0cba22c43888febde10c6ae3de6f4f0d17dd89a395dbaebfa6fe15660326a848"
        );
    }

    #[test]
    fn invalid_permutations() {
        assert_eq!(
            Permutation::new(vec![0, 0]),
            Err(CryptoError::MalformedOpening)
        );
        assert_eq!(
            Permutation::new(vec![0, 2]),
            Err(CryptoError::MalformedOpening)
        );
        assert!(Permutation::new(vec![]).is_ok());
        assert_eq!(
            Permutation::decode(&[0, 0, 0, 2, 0, 0, 0, 1]),
            Err(CryptoError::MalformedOpening)
        );
    }

    #[test]
    fn apply_and_opening_roundtrip() {
        let p = Permutation::new(vec![2, 0, 1]).unwrap();
        assert_eq!(p.apply(&['a', 'b', 'c']), vec!['c', 'a', 'b']);
        let o = PermOpening {
            perm: p,
            blinding: Scalar::from(99u64),
        };
        assert_eq!(PermOpening::from_bytes(&o.to_bytes()).unwrap(), o);
        assert!(PermOpening::from_bytes(&o.to_bytes()[..35]).is_err());
    }
}
