//! Direct 1-out-of-n oblivious transfer over Ristretto255.
//!
//! Sender picks `a` and publishes `A = aG`. A receiver with choice `c`
//! (1-based) sends `B = cA + bG` and keeps `k = H(A, B, c, bA)`. For every
//! index `i` the sender derives `k_i = H(A, B, i, a(B - iA))`; only `k_c`
//! equals the receiver's key, and `B` is uniform whatever `c` is.

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use rand::{CryptoRng, RngCore};
use sha2::{Digest, Sha256};

use super::group::{GroupElement, Scalar};
use super::CryptoError;

/// AEAD overhead added to each transferred string.
pub const OT_CIPHERTEXT_OVERHEAD: usize = 16;

fn index_key(
    a_pt: &GroupElement,
    b_pt: &GroupElement,
    index: usize,
    shared: &GroupElement,
) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"aot/ot/key");
    h.update(a_pt.as_bytes());
    h.update(b_pt.as_bytes());
    h.update((index as u64).to_be_bytes());
    h.update(shared.as_bytes());
    h.finalize().into()
}

fn aad(a_pt: &GroupElement, b_pt: &GroupElement, index: usize) -> Vec<u8> {
    let mut v = Vec::with_capacity(72);
    v.extend_from_slice(a_pt.as_bytes());
    v.extend_from_slice(b_pt.as_bytes());
    v.extend_from_slice(&(index as u64).to_be_bytes());
    v
}

// each key encrypts exactly one string, so a fixed nonce is safe
fn encrypt(key: &[u8; 32], aad: &[u8], msg: &[u8]) -> Vec<u8> {
    ChaCha20Poly1305::new(Key::from_slice(key))
        .encrypt(Nonce::from_slice(&[0u8; 12]), Payload { msg, aad })
        .expect("in-memory encryption cannot fail")
}

fn decrypt(key: &[u8; 32], aad: &[u8], ct: &[u8]) -> Result<Vec<u8>, CryptoError> {
    ChaCha20Poly1305::new(Key::from_slice(key))
        .decrypt(Nonce::from_slice(&[0u8; 12]), Payload { msg: ct, aad })
        .map_err(|_| CryptoError::Integrity)
}

/// Sender side of one OT session. Used once and then dropped; nothing about
/// the receiver's choice is ever stored here.
#[derive(Clone)]
pub struct OtSenderSession {
    secret: Scalar,
    point: GroupElement,
    n: usize,
}

impl OtSenderSession {
    pub fn new<R: RngCore + CryptoRng>(n: usize, rng: &mut R) -> Self {
        assert!(n >= 1, "OT needs at least one string");
        let secret = loop {
            let s = Scalar::random(rng);
            if s != Scalar::ZERO {
                break s;
            }
        };
        Self {
            secret,
            point: GroupElement::base_mul(&secret),
            n,
        }
    }

    pub fn sender_point(&self) -> GroupElement {
        self.point
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn respond(
        &self,
        receiver_point: &GroupElement,
        strings: &[Vec<u8>],
    ) -> Result<Vec<Vec<u8>>, CryptoError> {
        if strings.len() != self.n {
            return Err(CryptoError::LengthMismatch);
        }
        ot_sender_respond(&self.secret, &self.point, receiver_point, strings)
    }
}

impl std::fmt::Debug for OtSenderSession {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OtSenderSession")
            .field("point", &self.point)
            .field("n", &self.n)
            .finish_non_exhaustive()
    }
}

/// Encrypts string `i` (1-based) under `H(A, B, i, a(B - iA))`.
pub fn ot_sender_respond(
    secret: &Scalar,
    sender_point: &GroupElement,
    receiver_point: &GroupElement,
    strings: &[Vec<u8>],
) -> Result<Vec<Vec<u8>>, CryptoError> {
    if receiver_point.is_identity() {
        return Err(CryptoError::InvalidPoint);
    }
    let Some(first) = strings.first() else {
        return Err(CryptoError::LengthMismatch);
    };
    if strings.iter().any(|s| s.len() != first.len()) {
        return Err(CryptoError::LengthMismatch);
    }
    // a(B - iA) = aB - i·aA, stepped incrementally
    let a_times_a = sender_point.mul(secret);
    let mut shared = receiver_point.mul(secret);
    let mut out = Vec::with_capacity(strings.len());
    for (i, s) in strings.iter().enumerate() {
        let index = i + 1;
        shared = shared.sub(&a_times_a);
        let key = index_key(sender_point, receiver_point, index, &shared);
        out.push(encrypt(&key, &aad(sender_point, receiver_point, index), s));
    }
    Ok(out)
}

/// Decrypts ciphertext `index` of a response with a revealed session key.
pub fn ot_decrypt_with_key(
    key: &[u8; 32],
    sender_point: &GroupElement,
    receiver_point: &GroupElement,
    index: usize,
    ciphertext: &[u8],
) -> Result<Vec<u8>, CryptoError> {
    decrypt(key, &aad(sender_point, receiver_point, index), ciphertext)
}

/// Receiver side of one OT session.
#[derive(Clone)]
pub struct OtReceiverSession {
    n: usize,
    choice: usize,
    sender_point: GroupElement,
    receiver_point: GroupElement,
    key: [u8; 32],
}

/// Builds the receiver's point for `choice` in `1..=n`.
pub fn ot_receiver_choose<R: RngCore + CryptoRng>(
    n: usize,
    sender_point: &GroupElement,
    choice: usize,
    rng: &mut R,
) -> Result<(GroupElement, OtReceiverSession), CryptoError> {
    if choice == 0 || choice > n {
        return Err(CryptoError::ChoiceOutOfRange { choice, n });
    }
    if sender_point.is_identity() {
        return Err(CryptoError::InvalidPoint);
    }
    let b = Scalar::random(rng);
    let receiver_point = sender_point
        .mul(&Scalar::from(choice as u64))
        .add(&GroupElement::base_mul(&b));
    let shared = sender_point.mul(&b);
    let key = index_key(sender_point, &receiver_point, choice, &shared);
    Ok((
        receiver_point,
        OtReceiverSession {
            n,
            choice,
            sender_point: *sender_point,
            receiver_point,
            key,
        },
    ))
}

impl OtReceiverSession {
    pub fn choice(&self) -> usize {
        self.choice
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn receiver_point(&self) -> GroupElement {
        self.receiver_point
    }

    /// Recovers the chosen string from the sender's full response.
    pub fn recover(&self, ciphertexts: &[Vec<u8>]) -> Result<Vec<u8>, CryptoError> {
        if ciphertexts.len() != self.n {
            return Err(CryptoError::LengthMismatch);
        }
        self.try_index(self.choice, &ciphertexts[self.choice - 1])
    }

    /// The session key for the chosen index. Revealing it lets a third party
    /// decrypt exactly the chosen ciphertext and nothing else.
    pub fn reveal_key(&self) -> [u8; 32] {
        self.key
    }

    /// Attempts to decrypt ciphertext `index` with this session's key. Fails
    /// with [`CryptoError::Integrity`] for every index but the chosen one.
    pub fn try_index(&self, index: usize, ciphertext: &[u8]) -> Result<Vec<u8>, CryptoError> {
        decrypt(
            &self.key,
            &aad(&self.sender_point, &self.receiver_point, index),
            ciphertext,
        )
    }
}

impl std::fmt::Debug for OtReceiverSession {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OtReceiverSession")
            .field("n", &self.n)
            .field("receiver_point", &self.receiver_point)
            .finish_non_exhaustive()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn strings(n: usize) -> Vec<Vec<u8>> {
        (1..=n).map(|i| format!("s{i}").into_bytes()).collect()
    }

    #[test]
    fn n5_choice3() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let sender = OtSenderSession::new(5, &mut rng);
        let (b, recv) = ot_receiver_choose(5, &sender.sender_point(), 3, &mut rng).unwrap();
        let cts = sender.respond(&b, &strings(5)).unwrap();
        assert_eq!(recv.recover(&cts).unwrap(), b"s3");
        for i in [1, 2, 4, 5] {
            assert_eq!(recv.try_index(i, &cts[i - 1]), Err(CryptoError::Integrity));
            // also under the chosen index's associated data
            assert_eq!(recv.try_index(3, &cts[i - 1]), Err(CryptoError::Integrity));
        }
    }

    #[test]
    fn degenerate_n1() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let sender = OtSenderSession::new(1, &mut rng);
        let (b, recv) = ot_receiver_choose(1, &sender.sender_point(), 1, &mut rng).unwrap();
        let cts = sender.respond(&b, &[b"only".to_vec()]).unwrap();
        assert_eq!(cts.len(), 1);
        assert_eq!(recv.recover(&cts).unwrap(), b"only");
    }

    #[test]
    fn choice_bounds() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let a = GroupElement::base_mul(&Scalar::from(7u64));
        assert_eq!(
            ot_receiver_choose(4, &a, 0, &mut rng).unwrap_err(),
            CryptoError::ChoiceOutOfRange { choice: 0, n: 4 }
        );
        assert!(ot_receiver_choose(4, &a, 5, &mut rng).is_err());
        assert_eq!(
            ot_receiver_choose(4, &GroupElement::identity(), 1, &mut rng).unwrap_err(),
            CryptoError::InvalidPoint
        );
    }

    #[test]
    fn length_mismatch_and_identity() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let sender = OtSenderSession::new(2, &mut rng);
        let (b, _) = ot_receiver_choose(2, &sender.sender_point(), 1, &mut rng).unwrap();
        assert_eq!(
            sender.respond(&b, &[b"ab".to_vec(), b"abc".to_vec()]),
            Err(CryptoError::LengthMismatch)
        );
        assert_eq!(
            sender.respond(&b, &[b"ab".to_vec()]),
            Err(CryptoError::LengthMismatch)
        );
        assert_eq!(
            sender.respond(&GroupElement::identity(), &[b"ab".to_vec(), b"cd".to_vec()]),
            Err(CryptoError::InvalidPoint)
        );
    }
}
