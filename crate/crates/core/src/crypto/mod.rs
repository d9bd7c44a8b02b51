//! Cryptographic primitives: group arithmetic, sealed boxes, signatures and
//! MACs, tag derivation, 1-out-of-n oblivious transfer and permutation
//! commitments.

pub mod commit;
pub mod group;
pub mod kdf;
pub mod keys;
pub mod ot;
pub mod sealed;
pub mod sign;

pub use commit::{commit_perm, verify_perm, PermCommitment, PermOpening, Permutation};
pub use group::{GroupElement, Scalar};
pub use kdf::{kdf_tag, round_value, Direction, Tag};
pub use keys::{keygen, KeyPair};
pub use ot::{ot_decrypt_with_key, ot_receiver_choose, OtReceiverSession, OtSenderSession};
pub use sealed::{open, seal, SealedBox};
pub use sign::{mac, sign, verify, Signature};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CryptoError {
    #[error("payload of {len} bytes exceeds maximum {max}")]
    PayloadTooLong { len: usize, max: usize },
    #[error("integrity check failed")]
    Integrity,
    #[error("key block could not be unwrapped with this key")]
    KeyUnwrap,
    #[error("box was sealed by a different sender")]
    WrongSender,
    #[error("invalid group element encoding")]
    InvalidPoint,
    #[error("invalid scalar encoding")]
    InvalidScalar,
    #[error("malformed or invalid signature")]
    BadSignature,
    #[error("proof does not verify")]
    BadProof,
    #[error("OT choice {choice} outside 1..={n}")]
    ChoiceOutOfRange { choice: usize, n: usize },
    #[error("OT strings must all have the same length")]
    LengthMismatch,
    #[error("commitment opening is malformed")]
    MalformedOpening,
}
