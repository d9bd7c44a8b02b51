//! Wire formats and message construction.

pub mod codec;
pub mod envelope;
pub mod types;

pub use codec::{Reader, Wire, WireError, Writer, WIRE_VERSION};
pub use envelope::{build_envelope, open_envelope, open_payload, seal_payload, wrap_envelope};
pub use types::*;
