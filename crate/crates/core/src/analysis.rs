//! Closed-form anonymity, latency and storage figures, and Monte-Carlo
//! estimators that check them independently of the node code.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::params::{NetworkParams, SECOND_MS};

/// `λβ1Q1Q2/2`. An expected size, so it may be fractional.
pub fn sender_anonymity_set(p: &NetworkParams) -> f64 {
    p.lambda as f64 * p.beta1 as f64 * p.q1 as f64 * p.q2 as f64 / 2.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReceiverBound {
    pub gamma: f64,
    /// `HU/(T2·Q3)`: dummy requests one node sees while a message is held,
    /// taking one request per `T2`.
    pub dummy_requests: f64,
    /// The same count with request gaps uniform on `[1 s, T2]`, whose mean
    /// is `(1 s + T2)/2`.
    pub dummy_requests_uniform: f64,
    /// `γ + HU/(T2·Q3)`, assuming no overlap between the two groups.
    pub bound: f64,
}

pub fn receiver_anonymity_bound(p: &NetworkParams) -> ReceiverBound {
    let h = p.h_ms as f64;
    let t2 = p.t2_ms as f64;
    let u = p.users as f64;
    let q3 = p.q3 as f64;
    let dummy_requests = if t2 > 0.0 { h * u / (t2 * q3) } else { 0.0 };
    let mean_gap = (SECOND_MS as f64 + t2) / 2.0;
    ReceiverBound {
        gamma: p.gamma as f64,
        dummy_requests,
        dummy_requests_uniform: h * u / (mean_gap * q3),
        bound: p.gamma as f64 + dummy_requests,
    }
}

/// Entropy in bits of a pool mix keeping `omega` messages and emitting
/// `big_omega` per round: `(1+ω/Ω)log(ω+Ω) − (ω/Ω)log ω`.
pub fn pool_entropy(omega: f64, big_omega: f64) -> f64 {
    assert!(omega >= 0.0 && big_omega >= 1.0, "pool sizes out of range");
    let r = omega / big_omega;
    let tail = if omega > 0.0 { r * omega.log2() } else { 0.0 };
    (1.0 + r) * (omega + big_omega).log2() - tail
}

pub fn effective_set(omega: f64, big_omega: f64) -> f64 {
    pool_entropy(omega, big_omega).exp2()
}

/// `ω = β2(λ−1)/(2α)` and `Ω = β2/α` for a Level-3 node run as a pool.
pub fn pool_mapping(p: &NetworkParams) -> (f64, f64) {
    let b = p.beta2 as f64 / p.alpha as f64;
    (b * (p.lambda as f64 - 1.0) / 2.0, b)
}

/// Entropy of a standard Level-3 node: `log(λβ2/α)`.
pub fn standard_entropy(p: &NetworkParams) -> f64 {
    (p.lambda as f64 * p.beta2 as f64 / p.alpha as f64).log2()
}

/// `log((λ+1)^((λ+1)/2) / (2λ(λ−1)^((λ−1)/2)))`, the bits gained by
/// running a Level-3 node as a pool.
pub fn pool_gain_bits(lambda: usize) -> f64 {
    let l = lambda as f64;
    let lower = if lambda > 1 {
        (l - 1.0) / 2.0 * (l - 1.0).log2()
    } else {
        0.0
    };
    (l + 1.0) / 2.0 * (l + 1.0).log2() - (2.0 * l).log2() - lower
}

pub fn pool_gain_factor(lambda: usize) -> f64 {
    pool_gain_bits(lambda).exp2()
}

/// Entropy of a pool-converted Level-3 node.
pub fn aot_pool_entropy(p: &NetworkParams) -> f64 {
    standard_entropy(p) + pool_gain_bits(p.lambda)
}

/// Dwell of a pool-mode message in rounds: geometric with success
/// probability `2/(λ+1)`.
pub fn pool_dwell_mean(lambda: usize) -> f64 {
    (lambda as f64 + 1.0) / 2.0
}

/// Exact variance of the geometric dwell, `(λ²−1)/4`.
pub fn pool_dwell_variance(lambda: usize) -> f64 {
    let l = lambda as f64;
    (l * l - 1.0) / 4.0
}

/// The variance quoted for pool mode, `(λ+1)²(λ−1)/8`; 100 at λ = 9. It does
/// not match the geometric dwell, see [`pool_dwell_variance`].
pub fn pool_dwell_variance_quoted(lambda: usize) -> f64 {
    let l = lambda as f64;
    (l + 1.0) * (l + 1.0) * (l - 1.0) / 8.0
}

/// Standard-mode dwell is uniform on `1..=λ` steps.
pub fn standard_dwell_mean(lambda: usize) -> f64 {
    (lambda as f64 + 1.0) / 2.0
}

pub fn standard_dwell_variance(lambda: usize) -> f64 {
    let l = lambda as f64;
    (l * l - 1.0) / 12.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Storage {
    /// Published messages per second, real plus dummy.
    pub published_rate: f64,
    pub network_bytes: f64,
    pub per_node_bytes: f64,
}

/// `v(1 + ρ/α)` messages per second kept for `H`.
pub fn storage_requirement(p: &NetworkParams) -> Storage {
    let published_rate = p.rate * (1.0 + p.rho as f64 / p.alpha as f64);
    let network_bytes = published_rate * (p.h_ms as f64 / SECOND_MS as f64) * p.msg_size as f64;
    Storage {
        published_rate,
        network_bytes,
        per_node_bytes: network_bytes / p.q3 as f64,
    }
}

/// `τ + Q2τ/(2λ)` in seconds.
pub fn expected_publication_latency(p: &NetworkParams) -> f64 {
    p.publication_bound_ms() / SECOND_MS as f64
}

pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var)
}

/// Dwell in rounds of `messages` messages through a pool that holds
/// `omega` and takes in and emits `big_omega` per round. The pool starts
/// full of filler messages that are not counted.
pub fn simulate_pool_dwell(omega: usize, big_omega: usize, messages: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    // entry round per held message; None for filler
    let mut pool: Vec<Option<u64>> = vec![None; omega];
    let mut dwell = Vec::with_capacity(messages);
    let mut entered = 0;
    let mut round = 0u64;
    while dwell.len() < messages {
        round += 1;
        for _ in 0..big_omega {
            pool.push((entered < messages).then_some(round));
            entered += 1;
        }
        let mut idx = sample(&mut rng, pool.len(), big_omega).into_vec();
        idx.sort_unstable_by(|a, b| b.cmp(a));
        for i in idx {
            if let Some(r) = pool.swap_remove(i) {
                dwell.push((round - r + 1) as f64);
            }
        }
    }
    dwell.truncate(messages);
    dwell
}

/// Dwell in steps through standard buckets of `bucket` messages drained
/// evenly over `lambda` steps.
pub fn simulate_standard_dwell(
    lambda: usize,
    bucket: usize,
    messages: usize,
    seed: u64,
) -> Vec<f64> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut dwell = Vec::with_capacity(messages);
    while dwell.len() < messages {
        let mut left: Vec<usize> = (0..bucket).collect();
        for step in 0..lambda {
            let take = left.len().div_ceil(lambda - step);
            for _ in 0..take {
                let i = rng.gen_range(0..left.len());
                left.swap_remove(i);
                dwell.push((step + 1) as f64);
            }
        }
    }
    dwell.truncate(messages);
    dwell
}

/// Empirical sender entropy of a pool mix: for an output, each input of
/// the round `k` rounds earlier is equally likely, so the entropy follows
/// from the distribution of `k`.
pub fn simulate_pool_entropy(omega: usize, big_omega: usize, messages: usize, seed: u64) -> f64 {
    let dwell = simulate_pool_dwell(omega, big_omega, messages, seed);
    let mut counts: Vec<f64> = Vec::new();
    for d in dwell.iter().map(|d| *d as usize - 1) {
        if counts.len() <= d {
            counts.resize(d + 1, 0.0);
        }
        counts[d] += 1.0;
    }
    let n = dwell.len() as f64;
    counts
        .iter()
        .filter(|c| **c > 0.0)
        .map(|c| {
            let p = c / n;
            -p * (p / big_omega as f64).log2()
        })
        .sum()
}

/// One line of an analysis report.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReportLine {
    pub name: String,
    pub formula: f64,
    pub monte_carlo: Option<f64>,
    /// `(monte_carlo − formula)/formula`.
    pub relative_delta: Option<f64>,
}

impl ReportLine {
    fn new(name: &str, formula: f64, monte_carlo: Option<f64>) -> Self {
        Self {
            name: name.to_string(),
            formula,
            monte_carlo,
            relative_delta: monte_carlo
                .filter(|_| formula != 0.0)
                .map(|m| (m - formula) / formula),
        }
    }
}

/// Formula values next to their Monte-Carlo estimates.
pub fn report(p: &NetworkParams, samples: usize, seed: u64) -> Vec<ReportLine> {
    let (omega, big_omega) = pool_mapping(p);
    let per_step = p.draw_per_bucket().max(1);
    let bucket = per_step * p.lambda;
    let pool_dwell = simulate_pool_dwell(bucket * (p.lambda - 1) / 2, bucket, samples, seed);
    let (pm, pv) = mean_var(&pool_dwell);
    let std_dwell = simulate_standard_dwell(p.lambda, bucket, samples, seed + 1);
    let (sm, sv) = mean_var(&std_dwell);
    let mc_entropy = simulate_pool_entropy(omega as usize, big_omega as usize, samples, seed + 2);
    let storage = storage_requirement(p);
    let receiver = receiver_anonymity_bound(p);
    vec![
        ReportLine::new("sender_anonymity_set", sender_anonymity_set(p), None),
        ReportLine::new("receiver_anonymity_bound", receiver.bound, None),
        ReportLine::new("dummy_requests_per_node", receiver.dummy_requests, None),
        ReportLine::new(
            "publication_latency_s",
            expected_publication_latency(p),
            None,
        ),
        ReportLine::new("standard_entropy_bits", standard_entropy(p), None),
        ReportLine::new(
            "pool_entropy_bits",
            pool_entropy(omega, big_omega),
            Some(mc_entropy),
        ),
        ReportLine::new("aot_pool_entropy_bits", aot_pool_entropy(p), None),
        ReportLine::new("pool_gain_bits", pool_gain_bits(p.lambda), None),
        ReportLine::new("pool_gain_factor", pool_gain_factor(p.lambda), None),
        ReportLine::new("pool_dwell_mean", pool_dwell_mean(p.lambda), Some(pm)),
        ReportLine::new(
            "pool_dwell_variance",
            pool_dwell_variance(p.lambda),
            Some(pv),
        ),
        ReportLine::new(
            "pool_dwell_variance_quoted",
            pool_dwell_variance_quoted(p.lambda),
            Some(pv),
        ),
        ReportLine::new(
            "standard_dwell_mean",
            standard_dwell_mean(p.lambda),
            Some(sm),
        ),
        ReportLine::new(
            "standard_dwell_variance",
            standard_dwell_variance(p.lambda),
            Some(sv),
        ),
        ReportLine::new("storage_network_bytes", storage.network_bytes, None),
        ReportLine::new("storage_per_node_bytes", storage.per_node_bytes, None),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{HOUR_MS, MINUTE_MS};

    #[test]
    fn sender_set_examples() {
        let p = NetworkParams::default();
        assert_eq!(sender_anonymity_set(&p), 32.0);
        let tiny = NetworkParams {
            lambda: 1,
            beta1: 1,
            q1: 1,
            q2: 1,
            ..p
        };
        assert_eq!(sender_anonymity_set(&tiny), 0.5);
    }

    #[test]
    fn receiver_bound_example() {
        let p = NetworkParams {
            gamma: 100,
            h_ms: 12 * HOUR_MS,
            users: 1000,
            t2_ms: 20 * MINUTE_MS,
            q3: 5,
            ..Default::default()
        };
        let r = receiver_anonymity_bound(&p);
        assert!((r.bound - 7300.0).abs() < 1e-9);
        let none = NetworkParams { users: 0, ..p };
        assert_eq!(receiver_anonymity_bound(&none).bound, 100.0);
    }

    #[test]
    fn pool_entropy_examples() {
        assert!((pool_entropy(0.0, 8.0) - 3.0).abs() < 1e-12);
        assert!((pool_entropy(8.0, 8.0) - 5.0).abs() < 1e-12);
        assert!((effective_set(8.0, 8.0) - 32.0).abs() < 1e-9);
    }

    #[test]
    fn gain_matches_eq_for_entropy_difference() {
        // the gain is the pool entropy minus the standard entropy
        for lambda in [2, 3, 4, 9, 16] {
            let p = NetworkParams {
                lambda,
                beta2: 8 * lambda,
                ..Default::default()
            };
            let (o, big) = pool_mapping(&p);
            let diff = pool_entropy(o, big) - standard_entropy(&p);
            assert!(
                (diff - pool_gain_bits(lambda)).abs() < 1e-9,
                "lambda {lambda}"
            );
        }
        assert!((pool_gain_bits(9) - 0.4397).abs() < 1e-4);
    }

    #[test]
    fn storage_example() {
        let p = NetworkParams {
            rate: 10_000.0,
            msg_size: 300,
            h_ms: 12 * HOUR_MS,
            rho: 2,
            alpha: 2,
            ..Default::default()
        };
        let s = storage_requirement(&p);
        assert!((s.network_bytes - 259.2e9).abs() < 1.0);
        let zero = NetworkParams { rate: 0.0, ..p };
        assert_eq!(storage_requirement(&zero).network_bytes, 0.0);
    }

    #[test]
    fn latency_example() {
        assert_eq!(
            expected_publication_latency(&NetworkParams::default()),
            12.5
        );
    }

    #[test]
    fn standard_dwell_uniform() {
        let d = simulate_standard_dwell(4, 8, 40_000, 1);
        let (m, v) = mean_var(&d);
        assert!((m - 2.5).abs() < 0.02);
        assert!((v - 1.25).abs() < 0.05);
    }

    #[test]
    fn pool_entropy_monte_carlo() {
        let mc = simulate_pool_entropy(8, 8, 200_000, 3);
        assert!((mc - 5.0).abs() / 5.0 < 0.02, "{mc}");
    }
}
