//! Public-key encryption with ciphertext integrity, in the crypto_box style:
//!
//! 1. draw a fresh symmetric key,
//! 2. encrypt the packet under it,
//! 3. hash the encrypted packet,
//! 4. sign the hash with the sender's secret key,
//! 5. encrypt key, hash and signature to the recipient's public key,
//! 6. concatenate the result of step 5 with the encrypted packet.
//!
//! Step 5 is an ECIES-style key wrap: an ephemeral Diffie–Hellman share
//! followed by ChaCha20-Poly1305 under an HKDF-derived wrap key. The wrapped
//! block also carries the sender's public key so that the addressee can learn
//! who sealed the box.

use chacha20poly1305::{aead::Aead, ChaCha20Poly1305, KeyInit};
use hkdf::Hkdf;
use rand::{CryptoRng, RngCore};
use sha2::{Digest, Sha256};

use super::group::{GroupElement, ELEMENT_LEN};
use super::keys::KeyPair;
use super::sign::{self, DleqProof, Signature, SIGNATURE_LEN};
use super::CryptoError;

const AEAD_TAG_LEN: usize = 16;
const SYM_KEY_LEN: usize = 32;
const HASH_LEN: usize = 32;
const WRAPPED_PLAIN_LEN: usize = SYM_KEY_LEN + HASH_LEN + SIGNATURE_LEN + ELEMENT_LEN;

/// Fixed length of every key block.
pub const KEY_BLOCK_LEN: usize = ELEMENT_LEN + WRAPPED_PLAIN_LEN + AEAD_TAG_LEN;
/// Largest plaintext `seal` accepts.
pub const MAX_SEAL_PLAINTEXT: usize = 1 << 16;

/// Total encoded size of a box holding `plaintext_len` bytes.
pub const fn sealed_len(plaintext_len: usize) -> usize {
    2 + KEY_BLOCK_LEN + plaintext_len + AEAD_TAG_LEN
}

#[derive(Clone, PartialEq, Eq, Debug, Hash)]
pub struct SealedBox {
    pub key_block: Vec<u8>,
    pub body: Vec<u8>,
}

impl SealedBox {
    /// `u16 key_block length ‖ key_block ‖ body`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(2 + self.key_block.len() + self.body.len());
        out.extend_from_slice(&(self.key_block.len() as u16).to_be_bytes());
        out.extend_from_slice(&self.key_block);
        out.extend_from_slice(&self.body);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        if bytes.len() < 2 {
            return Err(CryptoError::Integrity);
        }
        let kb_len = u16::from_be_bytes([bytes[0], bytes[1]]) as usize;
        let rest = &bytes[2..];
        if rest.len() < kb_len {
            return Err(CryptoError::Integrity);
        }
        Ok(Self {
            key_block: rest[..kb_len].to_vec(),
            body: rest[kb_len..].to_vec(),
        })
    }

    pub fn encoded_len(&self) -> usize {
        2 + self.key_block.len() + self.body.len()
    }

    /// Digest over the full encoding; used for replay records and audit hashes.
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.to_bytes()).into()
    }

    fn ephemeral(&self) -> Result<GroupElement, CryptoError> {
        if self.key_block.len() != KEY_BLOCK_LEN {
            return Err(CryptoError::Integrity);
        }
        GroupElement::from_slice(&self.key_block[..ELEMENT_LEN]).map_err(|_| CryptoError::Integrity)
    }
}

/// Contents of an unwrapped key block.
struct KeyBlock {
    sym_key: [u8; SYM_KEY_LEN],
    body_hash: [u8; HASH_LEN],
    signature: Signature,
    sender: GroupElement,
}

fn wrap_key(shared: &GroupElement, ephemeral: &GroupElement, recipient: &GroupElement) -> [u8; 32] {
    let mut ikm = Vec::with_capacity(96);
    ikm.extend_from_slice(shared.as_bytes());
    ikm.extend_from_slice(ephemeral.as_bytes());
    ikm.extend_from_slice(recipient.as_bytes());
    let hk = Hkdf::<Sha256>::new(None, &ikm);
    let mut okm = [0u8; 32];
    hk.expand(b"aot/sealed-box/wrap", &mut okm)
        .expect("32 bytes is a valid HKDF length");
    okm
}

fn signed_message(body_hash: &[u8; HASH_LEN], recipient: &GroupElement) -> Vec<u8> {
    let mut m = Vec::with_capacity(18 + HASH_LEN + ELEMENT_LEN);
    m.extend_from_slice(b"aot/sealed-box/sig");
    m.extend_from_slice(body_hash);
    m.extend_from_slice(recipient.as_bytes());
    m
}

const ZERO_NONCE: [u8; 12] = [0u8; 12];

pub fn seal<R: RngCore + CryptoRng>(
    sender: &KeyPair,
    recipient: &GroupElement,
    plaintext: &[u8],
    rng: &mut R,
) -> Result<SealedBox, CryptoError> {
    if plaintext.len() > MAX_SEAL_PLAINTEXT {
        return Err(CryptoError::PayloadTooLong {
            len: plaintext.len(),
            max: MAX_SEAL_PLAINTEXT,
        });
    }
    if recipient.is_identity() {
        return Err(CryptoError::InvalidPoint);
    }
    let mut sym_key = [0u8; SYM_KEY_LEN];
    rng.fill_bytes(&mut sym_key);
    // each symmetric key encrypts exactly one message, so a fixed nonce is fine
    let body = ChaCha20Poly1305::new(&sym_key.into())
        .encrypt(&ZERO_NONCE.into(), plaintext)
        .expect("chacha20poly1305 encryption is infallible for in-range lengths");
    let body_hash: [u8; HASH_LEN] = Sha256::digest(&body).into();
    let signature = sign::sign(sender, &signed_message(&body_hash, recipient));

    let mut wrapped = Vec::with_capacity(WRAPPED_PLAIN_LEN);
    wrapped.extend_from_slice(&sym_key);
    wrapped.extend_from_slice(&body_hash);
    wrapped.extend_from_slice(&signature.0);
    wrapped.extend_from_slice(sender.public.as_bytes());

    let eph = KeyPair::generate(rng);
    let shared = recipient.mul(eph.secret());
    let wk = wrap_key(&shared, &eph.public, recipient);
    let wrapped_ct = ChaCha20Poly1305::new(&wk.into())
        .encrypt(&ZERO_NONCE.into(), wrapped.as_slice())
        .expect("chacha20poly1305 encryption is infallible for in-range lengths");

    let mut key_block = Vec::with_capacity(KEY_BLOCK_LEN);
    key_block.extend_from_slice(eph.public.as_bytes());
    key_block.extend_from_slice(&wrapped_ct);
    Ok(SealedBox { key_block, body })
}

fn unwrap_with_shared(
    sealed: &SealedBox,
    recipient_pk: &GroupElement,
    shared: &GroupElement,
) -> Result<KeyBlock, CryptoError> {
    let eph = sealed.ephemeral()?;
    let wk = wrap_key(shared, &eph, recipient_pk);
    let plain = ChaCha20Poly1305::new(&wk.into())
        .decrypt(&ZERO_NONCE.into(), &sealed.key_block[ELEMENT_LEN..])
        .map_err(|_| CryptoError::KeyUnwrap)?;
    debug_assert_eq!(plain.len(), WRAPPED_PLAIN_LEN);
    let mut sym_key = [0u8; SYM_KEY_LEN];
    sym_key.copy_from_slice(&plain[..32]);
    let mut body_hash = [0u8; HASH_LEN];
    body_hash.copy_from_slice(&plain[32..64]);
    let signature = Signature::from_slice(&plain[64..128])?;
    let sender = GroupElement::from_slice(&plain[128..160]).map_err(|_| CryptoError::Integrity)?;
    Ok(KeyBlock {
        sym_key,
        body_hash,
        signature,
        sender,
    })
}

fn finish_open(
    sealed: &SealedBox,
    recipient_pk: &GroupElement,
    kb: &KeyBlock,
) -> Result<Vec<u8>, CryptoError> {
    let actual: [u8; HASH_LEN] = Sha256::digest(&sealed.body).into();
    if actual != kb.body_hash {
        return Err(CryptoError::Integrity);
    }
    if !sign::verify(
        &kb.sender,
        &signed_message(&kb.body_hash, recipient_pk),
        &kb.signature,
    ) {
        return Err(CryptoError::Integrity);
    }
    ChaCha20Poly1305::new(&kb.sym_key.into())
        .decrypt(&ZERO_NONCE.into(), sealed.body.as_slice())
        .map_err(|_| CryptoError::Integrity)
}

/// Opens a box that must have been sealed by `sender_pk`.
pub fn open(
    recipient: &KeyPair,
    sender_pk: &GroupElement,
    sealed: &SealedBox,
) -> Result<Vec<u8>, CryptoError> {
    let (sender, plain) = open_from_any(recipient, sealed)?;
    if &sender != sender_pk {
        return Err(CryptoError::WrongSender);
    }
    Ok(plain)
}

/// Opens a box and reports which key sealed it.
pub fn open_from_any(
    recipient: &KeyPair,
    sealed: &SealedBox,
) -> Result<(GroupElement, Vec<u8>), CryptoError> {
    let eph = sealed.ephemeral()?;
    let shared = eph.mul(recipient.secret());
    let kb = unwrap_with_shared(sealed, &recipient.public, &shared)?;
    let plain = finish_open(sealed, &recipient.public, &kb)?;
    Ok((kb.sender, plain))
}

/// Lets a recipient prove to a third party what a box decrypts to, without
/// revealing its secret key: the Diffie–Hellman share plus a proof that it
/// was computed with the recipient's key.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct DecryptionProof {
    pub shared: GroupElement,
    pub proof: DleqProof,
}

pub fn prove_decryption<R: RngCore + CryptoRng>(
    recipient: &KeyPair,
    sealed: &SealedBox,
    rng: &mut R,
) -> Result<DecryptionProof, CryptoError> {
    let eph = sealed.ephemeral()?;
    let (shared, proof) = sign::prove_dleq(recipient, &eph, rng);
    Ok(DecryptionProof { shared, proof })
}

/// Third-party opening using a [`DecryptionProof`].
pub fn open_with_proof(
    recipient_pk: &GroupElement,
    sealed: &SealedBox,
    proof: &DecryptionProof,
) -> Result<(GroupElement, Vec<u8>), CryptoError> {
    let eph = sealed.ephemeral()?;
    if !sign::verify_dleq(recipient_pk, &eph, &proof.shared, &proof.proof) {
        return Err(CryptoError::BadProof);
    }
    let kb = unwrap_with_shared(sealed, recipient_pk, &proof.shared)?;
    let plain = finish_open(sealed, recipient_pk, &kb)?;
    Ok((kb.sender, plain))
}

/// Uniformly random bytes shaped exactly like a box of `plaintext_len`.
pub fn random_box<R: RngCore>(plaintext_len: usize, rng: &mut R) -> SealedBox {
    let mut key_block = vec![0u8; KEY_BLOCK_LEN];
    rng.fill_bytes(&mut key_block);
    let mut body = vec![0u8; plaintext_len + AEAD_TAG_LEN];
    rng.fill_bytes(&mut body);
    SealedBox { key_block, body }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::keys::keygen;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn parties() -> (KeyPair, KeyPair) {
        (keygen(b"alice"), keygen(b"bob"))
    }

    #[test]
    fn roundtrip_hello() {
        let (a, b) = parties();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let sb = seal(&a, &b.public, b"hello", &mut rng).unwrap();
        assert_eq!(open(&b, &a.public, &sb).unwrap(), b"hello");
        assert_eq!(sb.encoded_len(), sealed_len(5));
    }

    #[test]
    fn empty_plaintext_roundtrip() {
        let (a, b) = parties();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let sb = seal(&a, &b.public, b"", &mut rng).unwrap();
        assert_eq!(open(&b, &a.public, &sb).unwrap(), Vec::<u8>::new());
    }

    #[test]
    fn body_bit_flip_is_integrity_failure() {
        let (a, b) = parties();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let mut sb = seal(&a, &b.public, b"hello", &mut rng).unwrap();
        sb.body[0] ^= 0x01;
        assert_eq!(open(&b, &a.public, &sb), Err(CryptoError::Integrity));
    }

    #[test]
    fn wrong_recipient_is_key_unwrap_failure() {
        let (a, b) = parties();
        let c = keygen(b"carol");
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let sb = seal(&a, &b.public, b"hello", &mut rng).unwrap();
        assert_eq!(open(&c, &a.public, &sb), Err(CryptoError::KeyUnwrap));
    }

    #[test]
    fn wrong_sender_detected() {
        let (a, b) = parties();
        let c = keygen(b"carol");
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let sb = seal(&a, &b.public, b"hello", &mut rng).unwrap();
        assert_eq!(open(&b, &c.public, &sb), Err(CryptoError::WrongSender));
        let (who, _) = open_from_any(&b, &sb).unwrap();
        assert_eq!(who, a.public);
    }

    #[test]
    fn truncated_key_block_is_integrity_failure() {
        let (a, b) = parties();
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let mut sb = seal(&a, &b.public, b"hello", &mut rng).unwrap();
        sb.key_block.truncate(KEY_BLOCK_LEN - 1);
        assert_eq!(open(&b, &a.public, &sb), Err(CryptoError::Integrity));
    }

    #[test]
    fn payload_too_long() {
        let (a, b) = parties();
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let big = vec![0u8; MAX_SEAL_PLAINTEXT + 1];
        assert!(matches!(
            seal(&a, &b.public, &big, &mut rng),
            Err(CryptoError::PayloadTooLong { .. })
        ));
    }

    #[test]
    fn random_single_bit_flips_always_detected() {
        let (a, b) = parties();
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let sb = seal(
            &a,
            &b.public,
            b"fixed-size payload for tamper test",
            &mut rng,
        )
        .unwrap();
        let bytes = sb.to_bytes();
        for _ in 0..1000 {
            let mut t = bytes.clone();
            // skip the length prefix: flipping it reframes the box, which is
            // covered separately by the truncation test
            let pos = rng.gen_range(2..t.len());
            t[pos] ^= 1 << rng.gen_range(0..8);
            let tampered = SealedBox::from_bytes(&t).unwrap();
            assert!(
                open(&b, &a.public, &tampered).is_err(),
                "flip at {pos} undetected"
            );
        }
    }

    #[test]
    fn third_party_open_with_proof() {
        let (a, b) = parties();
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let sb = seal(&a, &b.public, b"audit me", &mut rng).unwrap();
        let proof = prove_decryption(&b, &sb, &mut rng).unwrap();
        let (who, plain) = open_with_proof(&b.public, &sb, &proof).unwrap();
        assert_eq!(who, a.public);
        assert_eq!(plain, b"audit me");
        // a proof for one recipient key does not verify under another
        let c = keygen(b"carol");
        assert_eq!(
            open_with_proof(&c.public, &sb, &proof),
            Err(CryptoError::BadProof)
        );
    }

    #[test]
    fn random_box_has_sealed_shape() {
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        let (a, b) = parties();
        let real = seal(&a, &b.public, &[7u8; 100], &mut rng).unwrap();
        let fake = random_box(100, &mut rng);
        assert_eq!(real.encoded_len(), fake.encoded_len());
        assert_eq!(real.key_block.len(), fake.key_block.len());
    }
}
