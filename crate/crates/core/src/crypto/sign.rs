//! Schnorr signatures over Ristretto255, HMAC-SHA256 link MACs, and a
//! Chaum–Pedersen proof of equal discrete logs used to prove correct
//! decryption during audits.

use hmac::{Hmac, Mac};
use rand::{CryptoRng, RngCore};
use sha2::Sha256;

use super::group::{hash_to_scalar, scalar_from_bytes, GroupElement, Scalar};
use super::keys::KeyPair;
use super::CryptoError;

pub const SIGNATURE_LEN: usize = 64;
pub const MAC_LEN: usize = 32;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Signature(pub [u8; SIGNATURE_LEN]);

impl Signature {
    pub fn from_slice(bytes: &[u8]) -> Result<Self, CryptoError> {
        let arr: [u8; SIGNATURE_LEN] = bytes.try_into().map_err(|_| CryptoError::BadSignature)?;
        Ok(Self(arr))
    }
}

fn challenge(r: &GroupElement, pk: &GroupElement, msg: &[u8]) -> Scalar {
    hash_to_scalar(
        b"aot/schnorr/challenge",
        &[r.as_bytes(), pk.as_bytes(), msg],
    )
}

/// Deterministic Schnorr signature (nonce derived from the secret and message).
pub fn sign(keys: &KeyPair, msg: &[u8]) -> Signature {
    let nonce = hash_to_scalar(b"aot/schnorr/nonce", &[keys.secret().as_bytes(), msg]);
    let r = GroupElement::base_mul(&nonce);
    let e = challenge(&r, &keys.public, msg);
    let s = nonce + e * keys.secret();
    let mut out = [0u8; SIGNATURE_LEN];
    out[..32].copy_from_slice(r.as_bytes());
    out[32..].copy_from_slice(s.as_bytes());
    Signature(out)
}

pub fn verify(pk: &GroupElement, msg: &[u8], sig: &Signature) -> bool {
    let r_bytes: [u8; 32] = sig.0[..32].try_into().expect("split");
    let s_bytes: [u8; 32] = sig.0[32..].try_into().expect("split");
    let (Ok(r), Ok(s)) = (
        GroupElement::from_bytes(&r_bytes),
        scalar_from_bytes(&s_bytes),
    ) else {
        return false;
    };
    let e = challenge(&r, pk, msg);
    GroupElement::base_mul(&s) == r.add(&pk.mul(&e))
}

pub fn mac(key: &[u8], msg: &[u8]) -> [u8; MAC_LEN] {
    let mut m = Hmac::<Sha256>::new_from_slice(key).expect("hmac takes any key length");
    m.update(msg);
    m.finalize().into_bytes().into()
}

pub fn verify_mac(key: &[u8], msg: &[u8], tag: &[u8]) -> bool {
    let mut m = Hmac::<Sha256>::new_from_slice(key).expect("hmac takes any key length");
    m.update(msg);
    m.verify_slice(tag).is_ok()
}

/// Proof that `log_G(public) == log_base(shared)`.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct DleqProof {
    pub challenge: Scalar,
    pub response: Scalar,
}

impl DleqProof {
    pub fn to_bytes(&self) -> [u8; 64] {
        let mut out = [0u8; 64];
        out[..32].copy_from_slice(self.challenge.as_bytes());
        out[32..].copy_from_slice(self.response.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8; 64]) -> Result<Self, CryptoError> {
        Ok(Self {
            challenge: scalar_from_bytes(bytes[..32].try_into().expect("split"))?,
            response: scalar_from_bytes(bytes[32..].try_into().expect("split"))?,
        })
    }
}

fn dleq_challenge(
    public: &GroupElement,
    base: &GroupElement,
    shared: &GroupElement,
    t1: &GroupElement,
    t2: &GroupElement,
) -> Scalar {
    hash_to_scalar(
        b"aot/dleq",
        &[
            public.as_bytes(),
            base.as_bytes(),
            shared.as_bytes(),
            t1.as_bytes(),
            t2.as_bytes(),
        ],
    )
}

/// Proves that `shared = secret · base` for the key pair's secret.
pub fn prove_dleq<R: RngCore + CryptoRng>(
    keys: &KeyPair,
    base: &GroupElement,
    rng: &mut R,
) -> (GroupElement, DleqProof) {
    let shared = base.mul(keys.secret());
    let k = Scalar::random(rng);
    let t1 = GroupElement::base_mul(&k);
    let t2 = base.mul(&k);
    let c = dleq_challenge(&keys.public, base, &shared, &t1, &t2);
    let response = k - c * keys.secret();
    (
        shared,
        DleqProof {
            challenge: c,
            response,
        },
    )
}

pub fn verify_dleq(
    public: &GroupElement,
    base: &GroupElement,
    shared: &GroupElement,
    proof: &DleqProof,
) -> bool {
    let t1 = GroupElement::base_mul(&proof.response).add(&public.mul(&proof.challenge));
    let t2 = base.mul(&proof.response).add(&shared.mul(&proof.challenge));
    dleq_challenge(public, base, shared, &t1, &t2) == proof.challenge
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::keys::keygen;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn sign_verify_roundtrip() {
        let kp = keygen(&[3u8; 32]);
        let sig = sign(&kp, b"batch 17");
        assert!(verify(&kp.public, b"batch 17", &sig));
        assert!(!verify(&kp.public, b"batch 18", &sig));
        assert!(!verify(&keygen(&[4u8; 32]).public, b"batch 17", &sig));
    }

    #[test]
    fn golden_signature() {
        // cross-checked against libsodium's ristretto255
        let sig = sign(&keygen(&[3u8; 32]), b"batch 17");
        let hex: String = sig.0.iter().map(|x| format!("{x:02x}")).collect();
        assert_eq!(
            hex,
            "f64fd33127c82f63679e6d58b4db60550bef7cef6b8c66c9d26f89d761dae768\
             080d74fa5744668d4c1631fc82aec50cbd2b4778e3f264cbbbe0182635cc2804"
        );
    }

    #[test]
    fn mangled_signature_rejected() {
        let kp = keygen(&[3u8; 32]);
        let mut sig = sign(&kp, b"m");
        sig.0[40] ^= 1;
        assert!(!verify(&kp.public, b"m", &sig));
        let mut sig = sign(&kp, b"m");
        sig.0[0] ^= 1;
        assert!(!verify(&kp.public, b"m", &sig));
    }

    #[test]
    fn mac_roundtrip() {
        let t = mac(b"link key", b"frame");
        assert!(verify_mac(b"link key", b"frame", &t));
        assert!(!verify_mac(b"link key", b"frame!", &t));
        assert!(!verify_mac(b"other key", b"frame", &t));
    }

    #[test]
    fn dleq_roundtrip() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let kp = keygen(&[5u8; 32]);
        let base = GroupElement::base_mul(&Scalar::random(&mut rng));
        let (shared, proof) = prove_dleq(&kp, &base, &mut rng);
        assert!(verify_dleq(&kp.public, &base, &shared, &proof));
        let wrong = shared.add(&GroupElement::base_mul(&Scalar::ONE));
        assert!(!verify_dleq(&kp.public, &base, &wrong, &proof));
        let other = keygen(&[6u8; 32]);
        assert!(!verify_dleq(&other.public, &base, &shared, &proof));
    }
}
