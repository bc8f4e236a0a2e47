use abound::abf::{forge_fence, AttackConfig};
use abound::numgrad::{l2_normalize, Mat};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn axis(d: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; d];
    v[i] = 1.0;
    v
}

/// Counts trials where the attack lowers the mean gap below its noisy start,
/// and trials where the L∞ bound holds.
fn trials(n: usize, d: usize, count: u64) -> (usize, usize) {
    let cfg = AttackConfig::default();
    let (p, q) = (axis(d, 0), axis(d, 1));
    let mut reduced = 0;
    let mut bounded = 0;
    for seed in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let orig: Vec<Vec<f64>> = (0..n)
            .map(|_| l2_normalize(&Mat::randn(1, d, 1.0, &mut rng).data).unwrap())
            .collect();
        let fence = forge_fence(&orig, &p, &q, &cfg, &mut rng).unwrap();
        if fence.mean_gap() < fence.mean_initial_gap() {
            reduced += 1;
        }
        if fence.max_displacement() <= cfg.epsilon + 1e-9 {
            bounded += 1;
        }
    }
    (reduced, bounded)
}

#[test]
fn two_sample_attack_in_four_dimensions_reduces_the_gap() {
    let (reduced, bounded) = trials(2, 4, 100);
    assert!(reduced >= 90, "{reduced}/100");
    assert_eq!(bounded, 100);
}

#[test]
fn four_sample_attack_in_sixteen_dimensions_reduces_the_gap() {
    let (reduced, bounded) = trials(4, 16, 100);
    assert!(reduced >= 90, "{reduced}/100");
    assert_eq!(bounded, 100);
}
