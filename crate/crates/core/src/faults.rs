//! Deviations a controlled node can be told to make, for fault-injection
//! experiments. Honest nodes carry no plan.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    /// Level 1: flip one bit of a forwarded envelope.
    FlipEnvelopeBit,
    /// Level 1: forward a freshly built envelope in place of the sender's.
    ReplaceEnvelope,
    /// Level 2: flip one bit of `M` in a real bucket.
    AlterPayload,
    /// Level 2: replace the tag of a message in a real bucket.
    AlterTag,
    /// Level 3: alter `M` of a published blob and re-sign it.
    ResignAltered,
    /// Level 3: alter `M` of a published blob without re-signing.
    AlterUnsigned,
}

impl FaultKind {
    pub const LEVEL1: [FaultKind; 2] = [FaultKind::FlipEnvelopeBit, FaultKind::ReplaceEnvelope];
    pub const LEVEL2: [FaultKind; 2] = [FaultKind::AlterPayload, FaultKind::AlterTag];
    pub const LEVEL3: [FaultKind; 2] = [FaultKind::ResignAltered, FaultKind::AlterUnsigned];
}

/// Applies one of `kinds` to each eligible message with `probability`.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct FaultPlan {
    pub kinds: Vec<FaultKind>,
    pub probability: f64,
}

impl FaultPlan {
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<FaultKind> {
        if self.kinds.is_empty() || !rng.gen_bool(self.probability.clamp(0.0, 1.0)) {
            return None;
        }
        Some(self.kinds[rng.gen_range(0..self.kinds.len())])
    }
}

/// Flips one uniformly chosen bit of `bytes[from..]`.
pub(crate) fn flip_random_bit<R: Rng + ?Sized>(bytes: &mut [u8], from: usize, rng: &mut R) {
    let i = rng.gen_range(from..bytes.len());
    bytes[i] ^= 1 << rng.gen_range(0..8);
}
