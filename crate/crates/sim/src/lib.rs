//! Deterministic discrete-event simulator for the aot mixnet: nodes and
//! clients on simulated links, a scripted network adversary, metrics and
//! the experiment scenarios.

pub mod adversary;
pub mod engine;
pub mod frame;
pub mod metrics;
pub mod scenarios;
pub mod transport;
pub mod world;
