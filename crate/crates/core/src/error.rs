use crate::crypto::CryptoError;
use crate::protocol::{NodeId, WireError};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProtocolError {
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("payload of {len} bytes exceeds the padded size {max}")]
    PayloadTooLong { len: usize, max: usize },
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("envelope names {found}, not {expected}")]
    WrongNode { expected: NodeId, found: NodeId },
    #[error("bad signature from {0}")]
    BadSignature(NodeId),
    #[error("no shared secret with this peer")]
    NoSharedSecret,
    #[error("{origin} already sent a different bucket for round {round}")]
    DuplicateBucket { origin: NodeId, round: u64 },
    #[error("unknown OT session {0}")]
    UnknownSession(u64),
}
