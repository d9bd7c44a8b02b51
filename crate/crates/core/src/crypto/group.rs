//! Prime-order group wrapper over Ristretto255.
//!
//! Every element has exactly one accepted 32-byte encoding; decoding rejects
//! non-canonical strings. Public keys additionally reject the identity.

use curve25519_dalek::{
    constants::RISTRETTO_BASEPOINT_TABLE,
    ristretto::{CompressedRistretto, RistrettoPoint},
    traits::Identity,
};
use sha2::{Digest, Sha512};
use std::fmt;

pub use curve25519_dalek::scalar::Scalar;

use super::CryptoError;

/// Length of every canonical group element and scalar encoding.
pub const ELEMENT_LEN: usize = 32;

/// A Ristretto255 group element with its canonical encoding cached.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct GroupElement {
    point: RistrettoPoint,
    bytes: [u8; ELEMENT_LEN],
}

impl GroupElement {
    pub fn from_point(point: RistrettoPoint) -> Self {
        Self {
            point,
            bytes: point.compress().to_bytes(),
        }
    }

    /// `scalar · basepoint`.
    pub fn base_mul(scalar: &Scalar) -> Self {
        Self::from_point(scalar * RISTRETTO_BASEPOINT_TABLE)
    }

    pub fn identity() -> Self {
        Self::from_point(RistrettoPoint::identity())
    }

    /// Decodes any canonical element, including the identity.
    pub fn from_bytes(bytes: &[u8; ELEMENT_LEN]) -> Result<Self, CryptoError> {
        let point = CompressedRistretto(*bytes)
            .decompress()
            .ok_or(CryptoError::InvalidPoint)?;
        Ok(Self {
            point,
            bytes: *bytes,
        })
    }

    /// Decodes an element that is going to be used as a public key or an
    /// OT point: the identity is rejected.
    pub fn from_public_bytes(bytes: &[u8; ELEMENT_LEN]) -> Result<Self, CryptoError> {
        let element = Self::from_bytes(bytes)?;
        if element.is_identity() {
            return Err(CryptoError::InvalidPoint);
        }
        Ok(element)
    }

    pub fn from_slice(bytes: &[u8]) -> Result<Self, CryptoError> {
        let arr: [u8; ELEMENT_LEN] = bytes.try_into().map_err(|_| CryptoError::InvalidPoint)?;
        Self::from_public_bytes(&arr)
    }

    /// Hash-to-group, used for independent generators.
    pub fn hash_to_group(domain: &[u8], input: &[u8]) -> Self {
        let mut h = Sha512::new();
        h.update(domain);
        h.update(input);
        Self::from_point(RistrettoPoint::from_hash(h))
    }

    pub fn to_bytes(&self) -> [u8; ELEMENT_LEN] {
        self.bytes
    }

    pub fn as_bytes(&self) -> &[u8; ELEMENT_LEN] {
        &self.bytes
    }

    pub fn point(&self) -> &RistrettoPoint {
        &self.point
    }

    pub fn is_identity(&self) -> bool {
        self.point == RistrettoPoint::identity()
    }

    pub fn mul(&self, scalar: &Scalar) -> Self {
        Self::from_point(self.point * scalar)
    }

    pub fn add(&self, other: &Self) -> Self {
        Self::from_point(self.point + other.point)
    }

    pub fn sub(&self, other: &Self) -> Self {
        Self::from_point(self.point - other.point)
    }
}

impl PartialOrd for GroupElement {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Lexicographic order of the canonical encodings.
impl Ord for GroupElement {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.bytes.cmp(&other.bytes)
    }
}

impl std::hash::Hash for GroupElement {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.bytes.hash(state);
    }
}

impl fmt::Debug for GroupElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "GroupElement({})", hex8(&self.bytes))
    }
}

/// Decodes a canonical scalar (reduced mod ℓ).
pub fn scalar_from_bytes(bytes: &[u8; 32]) -> Result<Scalar, CryptoError> {
    Option::from(Scalar::from_canonical_bytes(*bytes)).ok_or(CryptoError::InvalidScalar)
}

/// Wide reduction of a domain-separated SHA-512 digest.
pub fn hash_to_scalar(domain: &[u8], parts: &[&[u8]]) -> Scalar {
    let mut h = Sha512::new();
    h.update(domain);
    for p in parts {
        h.update((p.len() as u64).to_be_bytes());
        h.update(p);
    }
    Scalar::from_hash(h)
}

pub(crate) fn hex8(bytes: &[u8]) -> String {
    bytes.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn encode_decode_roundtrip() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        for _ in 0..32 {
            let s = Scalar::random(&mut rng);
            let g = GroupElement::base_mul(&s);
            assert_eq!(GroupElement::from_bytes(&g.to_bytes()).unwrap(), g);
        }
    }

    #[test]
    fn identity_rejected_as_public() {
        let id = GroupElement::identity().to_bytes();
        assert!(GroupElement::from_bytes(&id).is_ok());
        assert_eq!(
            GroupElement::from_public_bytes(&id),
            Err(CryptoError::InvalidPoint)
        );
    }

    #[test]
    fn non_canonical_rejected() {
        // Ristretto encodings must be non-negative field elements (low bit clear)
        let mut bytes = GroupElement::base_mul(&Scalar::from(3u64)).to_bytes();
        bytes[0] |= 1;
        assert!(GroupElement::from_bytes(&bytes).is_err());
        assert!(GroupElement::from_bytes(&[0xff; 32]).is_err());
    }

    #[test]
    fn non_canonical_scalar_rejected() {
        assert!(scalar_from_bytes(&[0xff; 32]).is_err());
        assert!(scalar_from_bytes(&[1; 32]).is_ok());
    }
}
