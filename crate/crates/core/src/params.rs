//! Network parameters, their validation, and the static topology.

use serde::{Deserialize, Serialize};

use crate::crypto::{keygen, GroupElement, KeyPair};
use crate::protocol::NodeId;

pub const SECOND_MS: u64 = 1_000;
pub const MINUTE_MS: u64 = 60 * SECOND_MS;
pub const HOUR_MS: u64 = 60 * MINUTE_MS;

#[derive(Clone, Copy, PartialEq, Eq, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum L3Mode {
    /// Each incoming bucket drains over exactly λ publication steps.
    #[default]
    Standard,
    /// Each step draws β2/α messages uniformly from the whole repository.
    Pool,
}

/// Every tunable of the protocol. Times are virtual milliseconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkParams {
    pub q1: usize,
    pub q2: usize,
    pub q3: usize,
    pub alpha: usize,
    pub rho: usize,
    pub beta1: usize,
    pub beta2: usize,
    /// Accept β2 ≠ Q1·β1.
    pub beta2_override: bool,
    pub lambda: usize,
    pub tau_ms: u64,
    pub gamma: usize,
    pub zeta: usize,
    /// Maximum self-verification interval.
    pub t1_ms: u64,
    /// Maximum dummy-request interval.
    pub t2_ms: u64,
    /// Publication retention.
    pub h_ms: u64,
    /// Replay window.
    pub replay_window_ms: u64,
    /// Counter search half-width.
    pub xi: u64,
    pub l3_mode: L3Mode,
    /// Client count, used by the analysis formulas.
    pub users: usize,
    /// Incoming message rate per second, used by the storage calculator.
    pub rate: f64,
    pub msg_size: usize,
}

impl Default for NetworkParams {
    fn default() -> Self {
        Self {
            q1: 2,
            q2: 2,
            q3: 5,
            alpha: 2,
            rho: 3,
            beta1: 4,
            beta2: 8,
            beta2_override: false,
            lambda: 4,
            tau_ms: 10 * SECOND_MS,
            gamma: 512,
            zeta: 512,
            t1_ms: 6 * HOUR_MS,
            t2_ms: 20 * MINUTE_MS,
            h_ms: 12 * HOUR_MS,
            replay_window_ms: 30 * MINUTE_MS,
            xi: 2,
            l3_mode: L3Mode::Standard,
            users: 100,
            rate: 1.0,
            msg_size: crate::protocol::TAGGED_LEN,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ParamError {
    #[error("{0} must be positive")]
    NotPositive(&'static str),
    #[error("beta2 = {beta2} but q1 * beta1 = {expected}; set beta2_override to allow this")]
    Beta2NotQ1Beta1 { beta2: usize, expected: usize },
    #[error("beta2 = {beta2} must exceed beta1 = {beta1}")]
    Beta2NotAboveBeta1 { beta1: usize, beta2: usize },
    #[error("alpha + rho = {} must equal q3 = {q3}", alpha + rho)]
    AlphaRhoSum { alpha: usize, rho: usize, q3: usize },
    #[error("alpha = {alpha} violates alpha >= rho / 3 with rho = {rho}")]
    AlphaBelowRhoThird { alpha: usize, rho: usize },
    #[error("alpha = {alpha} violates alpha <= 3 rho / 4 with rho = {rho}")]
    AlphaAboveThreeQuartersRho { alpha: usize, rho: usize },
    #[error("alpha * lambda = {} must divide beta2 = {beta2}", alpha * lambda)]
    BucketDivisibility {
        alpha: usize,
        lambda: usize,
        beta2: usize,
    },
    #[error("zeta = {zeta} must not exceed gamma = {gamma}")]
    ZetaAboveGamma { zeta: usize, gamma: usize },
    #[error("tau = {tau_ms} ms must be a multiple of lambda = {lambda}")]
    StepNotIntegral { tau_ms: u64, lambda: usize },
}

impl NetworkParams {
    pub fn validate(&self) -> Result<(), ParamError> {
        for (name, v) in [
            ("q1", self.q1),
            ("q2", self.q2),
            ("q3", self.q3),
            ("alpha", self.alpha),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("lambda", self.lambda),
            ("gamma", self.gamma),
            ("zeta", self.zeta),
        ] {
            if v == 0 {
                return Err(ParamError::NotPositive(name));
            }
        }
        for (name, v) in [
            ("tau_ms", self.tau_ms),
            ("t1_ms", self.t1_ms),
            ("t2_ms", self.t2_ms),
            ("h_ms", self.h_ms),
            ("replay_window_ms", self.replay_window_ms),
        ] {
            if v == 0 {
                return Err(ParamError::NotPositive(name));
            }
        }
        if !self.beta2_override && self.beta2 != self.q1 * self.beta1 {
            return Err(ParamError::Beta2NotQ1Beta1 {
                beta2: self.beta2,
                expected: self.q1 * self.beta1,
            });
        }
        if self.beta2 <= self.beta1 {
            return Err(ParamError::Beta2NotAboveBeta1 {
                beta1: self.beta1,
                beta2: self.beta2,
            });
        }
        if self.alpha + self.rho != self.q3 {
            return Err(ParamError::AlphaRhoSum {
                alpha: self.alpha,
                rho: self.rho,
                q3: self.q3,
            });
        }
        if 3 * self.alpha < self.rho {
            return Err(ParamError::AlphaBelowRhoThird {
                alpha: self.alpha,
                rho: self.rho,
            });
        }
        if 4 * self.alpha > 3 * self.rho {
            return Err(ParamError::AlphaAboveThreeQuartersRho {
                alpha: self.alpha,
                rho: self.rho,
            });
        }
        if !self.beta2.is_multiple_of(self.alpha * self.lambda) {
            return Err(ParamError::BucketDivisibility {
                alpha: self.alpha,
                lambda: self.lambda,
                beta2: self.beta2,
            });
        }
        if self.zeta > self.gamma {
            return Err(ParamError::ZetaAboveGamma {
                zeta: self.zeta,
                gamma: self.gamma,
            });
        }
        if !self.tau_ms.is_multiple_of(self.lambda as u64) {
            return Err(ParamError::StepNotIntegral {
                tau_ms: self.tau_ms,
                lambda: self.lambda,
            });
        }
        Ok(())
    }

    /// β2/α, the bucket size.
    pub fn bucket_size(&self) -> usize {
        self.beta2 / self.alpha
    }

    /// β2/(αλ), messages drawn per bucket per publication step.
    pub fn draw_per_bucket(&self) -> usize {
        self.beta2 / (self.alpha * self.lambda)
    }

    /// ρβ2/α, dummy messages per Level-2 round.
    pub fn dummies_per_round(&self) -> usize {
        self.rho * self.beta2 / self.alpha
    }

    pub fn step_ms(&self) -> u64 {
        self.tau_ms / self.lambda as u64
    }

    /// Expected upper bound on submit-to-publish latency, `τ + Q2τ/(2λ)`.
    pub fn publication_bound_ms(&self) -> f64 {
        self.tau_ms as f64 + self.q2 as f64 * self.tau_ms as f64 / (2.0 * self.lambda as f64)
    }
}

#[derive(Clone, Debug)]
pub struct NodeInfo {
    pub id: NodeId,
    pub public: GroupElement,
}

/// The static registry of nodes per level.
#[derive(Clone, Debug)]
pub struct Topology {
    pub l1: Vec<NodeInfo>,
    pub l2: Vec<NodeInfo>,
    pub l3: Vec<NodeInfo>,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum Level {
    L1,
    L2,
    L3,
}

impl Topology {
    /// Deterministic topology: ids 1.. for Level 1, then Level 2, then Level 3,
    /// with keys derived from `seed` and the id. Returns the key pairs too.
    pub fn generate(params: &NetworkParams, seed: u64) -> (Self, Vec<(NodeId, KeyPair)>) {
        let mut keys = Vec::new();
        let mut next = 1u16;
        let mut level = |count: usize, keys: &mut Vec<(NodeId, KeyPair)>| {
            (0..count)
                .map(|_| {
                    let id = NodeId(next);
                    next += 1;
                    let mut s = seed.to_be_bytes().to_vec();
                    s.extend_from_slice(b"node");
                    s.extend_from_slice(&id.0.to_be_bytes());
                    let kp = keygen(&s);
                    let info = NodeInfo {
                        id,
                        public: kp.public,
                    };
                    keys.push((id, kp));
                    info
                })
                .collect::<Vec<_>>()
        };
        let l1 = level(params.q1, &mut keys);
        let l2 = level(params.q2, &mut keys);
        let l3 = level(params.q3, &mut keys);
        (Self { l1, l2, l3 }, keys)
    }

    pub fn level_of(&self, id: NodeId) -> Option<Level> {
        if self.l1.iter().any(|n| n.id == id) {
            Some(Level::L1)
        } else if self.l2.iter().any(|n| n.id == id) {
            Some(Level::L2)
        } else if self.l3.iter().any(|n| n.id == id) {
            Some(Level::L3)
        } else {
            None
        }
    }

    pub fn public_key(&self, id: NodeId) -> Option<&GroupElement> {
        self.l1
            .iter()
            .chain(&self.l2)
            .chain(&self.l3)
            .find(|n| n.id == id)
            .map(|n| &n.public)
    }

    pub fn l2_key(&self, id: NodeId) -> Option<&GroupElement> {
        self.l2.iter().find(|n| n.id == id).map(|n| &n.public)
    }

    pub fn l3_ids(&self) -> Vec<NodeId> {
        self.l3.iter().map(|n| n.id).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        NetworkParams::default().validate().unwrap();
    }

    #[test]
    fn alpha_below_third_rejected() {
        let p = NetworkParams {
            alpha: 1,
            rho: 4,
            beta2: 8,
            ..Default::default()
        };
        assert_eq!(
            p.validate(),
            Err(ParamError::AlphaBelowRhoThird { alpha: 1, rho: 4 })
        );
    }

    #[test]
    fn other_constraints() {
        let base = NetworkParams::default();
        let p = NetworkParams {
            alpha: 3,
            rho: 2,
            ..base.clone()
        };
        assert!(matches!(
            p.validate(),
            Err(ParamError::AlphaAboveThreeQuartersRho { .. })
        ));
        let p = NetworkParams {
            beta2: 12,
            ..base.clone()
        };
        assert!(matches!(
            p.validate(),
            Err(ParamError::Beta2NotQ1Beta1 { .. })
        ));
        let p = NetworkParams {
            beta2: 12,
            beta2_override: true,
            ..base.clone()
        };
        assert!(matches!(
            p.validate(),
            Err(ParamError::BucketDivisibility { .. })
        ));
        let p = NetworkParams {
            rho: 2,
            ..base.clone()
        };
        assert!(matches!(p.validate(), Err(ParamError::AlphaRhoSum { .. })));
        let p = NetworkParams { zeta: 1000, ..base };
        assert!(matches!(
            p.validate(),
            Err(ParamError::ZetaAboveGamma { .. })
        ));
    }

    #[test]
    fn derived_quantities() {
        let p = NetworkParams::default();
        assert_eq!(p.bucket_size(), 4);
        assert_eq!(p.draw_per_bucket(), 1);
        assert_eq!(p.dummies_per_round(), 12);
        assert_eq!(p.publication_bound_ms(), 12_500.0);
    }

    #[test]
    fn topology_ids_and_levels() {
        let (t, keys) = Topology::generate(&NetworkParams::default(), 1);
        assert_eq!(keys.len(), 9);
        assert_eq!(t.level_of(NodeId(1)), Some(Level::L1));
        assert_eq!(t.level_of(NodeId(3)), Some(Level::L2));
        assert_eq!(t.level_of(NodeId(9)), Some(Level::L3));
        assert_eq!(t.level_of(NodeId(999)), None);
    }
}
