mod common;

use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn mask_is_a_distribution(seed in any::<u64>()) {
        prop_assert!(common::mask_sum_deviation(seed) <= 1e-6);
    }

    #[test]
    fn zero_gamma_attention_is_identity(seed in any::<u64>()) {
        prop_assert!(common::gamma_zero_is_identity(seed));
    }

    #[test]
    fn residual_offset_norm_is_delta(seed in any::<u64>()) {
        prop_assert!(common::offset_norm_deviation(seed) <= 1e-5);
    }

    #[test]
    fn triplet_at_tie_is_ln2(seed in any::<u64>()) {
        prop_assert!(common::triplet_tie_deviation(seed) <= 1e-6);
    }

    #[test]
    fn gem_with_unit_exponent_is_mean(seed in any::<u64>()) {
        prop_assert!(common::gem_p1_is_mean(seed));
    }

    #[test]
    fn recall_at_gallery_size_is_100(seed in any::<u64>()) {
        prop_assert_eq!(common::full_gallery_recall(seed), 100.0);
    }

    #[test]
    fn vl_pool_is_the_masked_sum(seed in any::<u64>()) {
        prop_assert!(common::vl_pool_matches_loops(seed));
    }

    #[test]
    fn affine_is_the_loop(seed in any::<u64>()) {
        prop_assert!(common::affine_matches_loops(seed));
    }
}
