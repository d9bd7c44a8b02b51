use rand::{CryptoRng, RngCore};
use std::fmt;

use super::group::{hash_to_scalar, GroupElement, Scalar};

/// Long-term or ephemeral key pair; `public = secret · G`.
#[derive(Clone)]
pub struct KeyPair {
    pub public: GroupElement,
    secret: Scalar,
}

impl KeyPair {
    pub fn from_secret(secret: Scalar) -> Self {
        Self {
            public: GroupElement::base_mul(&secret),
            secret,
        }
    }

    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        loop {
            let secret = Scalar::random(rng);
            if secret != Scalar::ZERO {
                return Self::from_secret(secret);
            }
        }
    }

    pub fn secret(&self) -> &Scalar {
        &self.secret
    }
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair")
            .field("public", &self.public)
            .finish_non_exhaustive()
    }
}

/// Deterministic key derivation from a seed. Seeds shorter than 32 bytes are
/// accepted but only make sense for tests.
pub fn keygen(seed: &[u8]) -> KeyPair {
    let secret = hash_to_scalar(b"aot/keygen/v1", &[seed]);
    // probability 2^-252
    assert!(secret != Scalar::ZERO, "degenerate seed");
    KeyPair::from_secret(secret)
}
