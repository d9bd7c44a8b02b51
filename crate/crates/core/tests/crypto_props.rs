//! Properties of the primitives that the node logic leans on.

use std::collections::BTreeSet;

use aot_core::crypto::commit::commit_perm_with_blinding;
use aot_core::crypto::sealed::{open_from_any, open_with_proof, prove_decryption};
use aot_core::crypto::{
    commit_perm, kdf_tag, keygen, open, ot_decrypt_with_key, ot_receiver_choose, seal, verify_perm,
    Direction, OtSenderSession, Permutation,
};
use aot_core::division::compute_partition;
use aot_core::protocol::NodeId;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// The receiver gets exactly the chosen string; every other index fails
    /// under its key, and the revealed key opens only the chosen index.
    #[test]
    fn ot_delivers_only_the_choice(n in 1usize..12, pick in any::<prop::sample::Index>(), len in 1usize..48, seed in any::<u64>()) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let choice = pick.index(n) + 1;
        let strings: Vec<Vec<u8>> = (0..n).map(|i| vec![i as u8; len]).collect();
        let sender = OtSenderSession::new(n, &mut rng);
        let (point, recv) = ot_receiver_choose(n, &sender.sender_point(), choice, &mut rng).unwrap();
        let cts = sender.respond(&point, &strings).unwrap();
        prop_assert_eq!(recv.recover(&cts).unwrap(), strings[choice - 1].clone());
        let key = recv.reveal_key();
        for i in 1..=n {
            let own = recv.try_index(i, &cts[i - 1]);
            let third = ot_decrypt_with_key(&key, &sender.sender_point(), &point, i, &cts[i - 1]);
            prop_assert_eq!(own.is_ok(), i == choice);
            prop_assert_eq!(third.is_ok(), i == choice);
        }
    }

    #[test]
    fn sealed_box_opens_for_recipient_only(body in proptest::collection::vec(any::<u8>(), 0..200), bit in any::<prop::sample::Index>(), seed in any::<u64>()) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let a = keygen(b"a");
        let b = keygen(b"b");
        let sealed = seal(&a, &b.public, &body, &mut rng).unwrap();
        prop_assert_eq!(open(&b, &a.public, &sealed).unwrap(), body.clone());
        let (sender, plain) = open_from_any(&b, &sealed).unwrap();
        prop_assert_eq!(sender, a.public);
        prop_assert_eq!(plain, body.clone());
        prop_assert!(open_from_any(&a, &sealed).is_err());

        let mut bytes = sealed.to_bytes();
        let i = bit.index(bytes.len() * 8);
        bytes[i / 8] ^= 1 << (i % 8);
        if let Ok(bad) = aot_core::crypto::SealedBox::from_bytes(&bytes) {
            prop_assert!(open_from_any(&b, &bad).is_err());
        }
    }

    /// A decryption proof lets anyone open the box without the secret key.
    #[test]
    fn decryption_proof_opens_publicly(body in proptest::collection::vec(any::<u8>(), 1..64), seed in any::<u64>()) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let a = keygen(b"a");
        let b = keygen(b"b");
        let sealed = seal(&a, &b.public, &body, &mut rng).unwrap();
        let proof = prove_decryption(&b, &sealed, &mut rng).unwrap();
        let (_, plain) = open_with_proof(&b.public, &sealed, &proof).unwrap();
        prop_assert_eq!(plain, body);
        prop_assert!(open_with_proof(&a.public, &sealed, &proof).is_err());
    }

    #[test]
    fn permutation_commitment_binds(n in 1usize..40, seed in any::<u64>()) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let perm = Permutation::random(n, &mut rng);
        let (c, opening) = commit_perm(&perm, &mut rng);
        prop_assert!(verify_perm(&c, &opening));
        let mut images = perm.images().to_vec();
        images.rotate_left(1);
        let other = Permutation::new(images).unwrap();
        if n > 1 {
            prop_assert_ne!(commit_perm_with_blinding(&other, opening.blinding), c);
        }
    }

    #[test]
    fn tags_differ_by_counter_and_direction(sigma in any::<[u8; 32]>(), c in 1u64..1_000_000) {
        let t = kdf_tag(&sigma, c, Direction::Zero);
        prop_assert_eq!(t, kdf_tag(&sigma, c, Direction::Zero));
        prop_assert_ne!(t, kdf_tag(&sigma, c + 1, Direction::Zero));
        prop_assert_ne!(t, kdf_tag(&sigma, c, Direction::One));
    }

    /// Every round splits β2 positions into α disjoint equal blocks and
    /// picks α distinct active nodes.
    #[test]
    fn partition_is_a_division(round in any::<u64>(), xor in any::<[u8; 32]>(), alpha in 1usize..=5) {
        let l3: Vec<NodeId> = (5..10).map(NodeId).collect();
        let beta2 = 8 * alpha;
        let p = compute_partition(round, &xor, &l3, alpha, beta2);
        prop_assert_eq!(p.active.len(), alpha);
        prop_assert_eq!(p.passive.len(), l3.len() - alpha);
        let nodes: BTreeSet<NodeId> = p.active.iter().chain(&p.passive).copied().collect();
        prop_assert_eq!(nodes.len(), l3.len());
        let positions: BTreeSet<usize> = p.blocks.iter().flatten().copied().collect();
        prop_assert_eq!(positions, (0..beta2).collect::<BTreeSet<_>>());
        prop_assert!(p.blocks.iter().all(|b| b.len() == beta2 / alpha));
    }
}

/// Level-1 shuffles: the image of input 0 over many random permutations is
/// uniform over the positions.
#[test]
fn shuffle_position_is_uniform() {
    let n = 8;
    let trials = 16_000;
    let mut rng = ChaCha20Rng::seed_from_u64(77);
    let mut counts = vec![0f64; n];
    for _ in 0..trials {
        let perm = Permutation::random(n, &mut rng);
        let pos = perm.images().iter().position(|&i| i == 0).unwrap();
        counts[pos] += 1.0;
    }
    let expected = trials as f64 / n as f64;
    let chi2: f64 = counts
        .iter()
        .map(|c| (c - expected).powi(2) / expected)
        .sum();
    let p = 1.0 - ChiSquared::new((n - 1) as f64).unwrap().cdf(chi2);
    assert!(p > 0.001, "chi2 {chi2} p {p}");
}

#[test]
fn choice_outside_range_is_rejected() {
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let sender = OtSenderSession::new(4, &mut rng);
    assert!(ot_receiver_choose(4, &sender.sender_point(), 0, &mut rng).is_err());
    assert!(ot_receiver_choose(4, &sender.sender_point(), 5, &mut rng).is_err());
}
