mod common;

use common::sigprops::*;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matches_quadrature_of_iterated_integrals(p in path_strategy(3), m in 1usize..=4) {
        matches_quadrature(&p, m)?;
    }

    #[test]
    fn chen_product_is_associative((a, b, c) in sig_triple()) {
        associative(&a, &b, &c)?;
    }

    #[test]
    fn identity_is_neutral(a in sig_single()) {
        identity_neutral(&a)?;
    }

    #[test]
    fn splitting_a_path_factorises_its_signature(p in path_strategy(3), m in 1usize..=4) {
        split_factorises(&p, m)?;
    }

    #[test]
    fn one_dimensional_signature_sees_only_the_endpoints(p in path_strategy(1), m in 1usize..=4) {
        endpoints_only(&p, m)?;
    }

    #[test]
    fn scaling_the_path_scales_level_k_by_lambda_to_the_k(p in path_strategy(3), m in 1usize..=4, lambda in -3.0f64..3.0) {
        scales_by_lambda(&p, m, lambda)?;
    }

    #[test]
    fn a_path_followed_by_its_reversal_is_trivial(p in path_strategy(3), m in 1usize..=4) {
        reversal_cancels(&p, m)?;
    }
}
