mod common;

use aftermath::eval::{auprc, pr_curve};
use proptest::prelude::*;

proptest! {
    #[test]
    fn auprc_equals_oracle(seed in any::<u64>()) {
        let (s, l) = common::random_instance(&mut common::rng(seed), 12);
        prop_assert!((auprc(&s, &l).unwrap() - common::brute_ap(&s, &l)).abs() <= 1e-9);
    }

    #[test]
    fn permutation_with_distinct_scores(seed in any::<u64>(), n in 1usize..40) {
        let mut r = common::rng(seed);
        let scores: Vec<f64> = (0..n).map(|i| i as f64 + 0.5).collect();
        let mut labels: Vec<u8> = (0..n).map(|_| rand::Rng::random_bool(&mut r, 0.3) as u8).collect();
        labels[0] = 1;
        let order = common::shuffled(&(0..n).collect::<Vec<_>>(), seed);
        let s2: Vec<f64> = order.iter().map(|&i| scores[i]).collect();
        let l2: Vec<u8> = order.iter().map(|&i| labels[i]).collect();
        prop_assert!((auprc(&scores, &labels).unwrap() - auprc(&s2, &l2).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn tied_examples_do_not_depend_on_order(seed in any::<u64>()) {
        let (s, l) = common::random_instance(&mut common::rng(seed), 30);
        let order = common::shuffled(&(0..s.len()).collect::<Vec<_>>(), seed ^ 1);
        let s2: Vec<f64> = order.iter().map(|&i| s[i]).collect();
        let l2: Vec<u8> = order.iter().map(|&i| l[i]).collect();
        prop_assert!((auprc(&s, &l).unwrap() - auprc(&s2, &l2).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn curve_is_monotone_in_recall(seed in any::<u64>()) {
        let (s, l) = common::random_instance(&mut common::rng(seed), 30);
        let c = pr_curve(&s, &l).unwrap();
        prop_assert!(c.windows(2).all(|w| w[0].recall <= w[1].recall));
        prop_assert!((c.last().unwrap().recall - 1.0).abs() < 1e-12);
    }
}
