//! Protocol library for a three-level mixnet that delivers messages to their
//! recipients by 1-out-of-n oblivious transfer.

pub mod analysis;
pub mod audit;
pub mod client;
pub mod crypto;
pub mod division;
pub mod error;
pub mod faults;
pub mod level1;
pub mod level2;
pub mod level3;
pub mod params;
pub mod protocol;

pub use error::ProtocolError;
pub use params::{NetworkParams, Topology};
