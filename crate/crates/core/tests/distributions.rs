mod common;

use common::*;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn attention_and_output_are_distributions(seed: u64) {
        prop_assert!(distribution_deviation(seed) <= 1e-9);
    }
}
