use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use trace_core::sampling::{hard_weights, sample_negative, selection_probabilities, NegativePolicy};

const DRAWS: usize = 100_000;

fn empirical(candidates: &[(usize, f64)], policy: &NegativePolicy, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = vec![0usize; candidates.len()];
    for _ in 0..DRAWS {
        let id = sample_negative(&mut rng, candidates, &[], policy).unwrap();
        counts[candidates.iter().position(|c| c.0 == id).unwrap()] += 1;
    }
    counts.into_iter().map(|c| c as f64 / DRAWS as f64).collect()
}

/// Closed-form marginals written out independently of the library:
/// `f·exp(−(d−min)/τ)/Z + (1−f)/n`.
fn oracle(distances: &[f64], f: f64, tau: f64) -> Vec<f64> {
    let min = distances.iter().cloned().fold(f64::INFINITY, f64::min);
    let z: f64 = distances.iter().map(|d| (-(d - min) / tau).exp()).sum();
    let n = distances.len() as f64;
    distances.iter().map(|d| f * (-(d - min) / tau).exp() / z + (1.0 - f) / n).collect()
}

#[test]
fn empirical_frequencies_match_closed_form() {
    let distances = [0.2, 0.5, 0.9, 1.4, 2.0, 3.1];
    let candidates: Vec<(usize, f64)> = distances.iter().enumerate().map(|(i, &d)| (10 + i, d)).collect();
    for (k, (f, tau)) in [(0.0, 1.0), (0.5, 1.0), (1.0, 0.5), (0.3, 2.0)].into_iter().enumerate() {
        let policy = NegativePolicy { hard_fraction: f, tau, full_set: false };
        let want = oracle(&distances, f, tau);
        let lib = selection_probabilities(&distances, &policy);
        for (a, b) in want.iter().zip(&lib) {
            assert!((a - b).abs() < 1e-12);
        }
        let got = empirical(&candidates, &policy, k as u64);
        for (i, (g, w)) in got.iter().zip(&want).enumerate() {
            assert!((g - w).abs() <= 0.005, "policy {f}/{tau} candidate {i}: {g} vs {w}");
        }
    }
}

#[test]
fn uniform_policy_passes_chi_square() {
    let candidates: Vec<(usize, f64)> = (0..10).map(|i| (i, i as f64 * 0.7)).collect();
    let policy = NegativePolicy { hard_fraction: 0.0, tau: 1.0, full_set: false };
    let freq = empirical(&candidates, &policy, 99);
    let expected = DRAWS as f64 / 10.0;
    let chi2: f64 = freq.iter().map(|p| (p * DRAWS as f64 - expected).powi(2) / expected).sum();
    // 99.9th percentile of χ² with 9 degrees of freedom.
    assert!(chi2 < 27.88, "chi2 = {chi2}");
}

proptest! {
    #[test]
    fn probabilities_form_a_distribution(
        d in prop::collection::vec(0.0f64..50.0, 1..30),
        f in 0.0f64..=1.0,
        tau in 0.05f64..5.0,
    ) {
        let p = selection_probabilities(&d, &NegativePolicy { hard_fraction: f, tau, full_set: false });
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(p.iter().all(|&x| x >= 0.0));
        let h = hard_weights(&d, tau);
        for i in 0..d.len() {
            for j in 0..d.len() {
                if d[i] < d[j] {
                    prop_assert!(h[i] >= h[j]);
                }
            }
        }
    }

    #[test]
    fn excluded_ids_never_drawn(seed in any::<u64>(), n in 2usize..12, ex in 0usize..12) {
        let candidates: Vec<(usize, f64)> = (0..n).map(|i| (i, (i * 7 % 5) as f64)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..20 {
            match sample_negative(&mut rng, &candidates, &[ex], &NegativePolicy::default()) {
                Ok(id) => prop_assert!(id != ex && id < n),
                Err(_) => prop_assert!(n == 1 && ex == 0),
            }
        }
    }
}
