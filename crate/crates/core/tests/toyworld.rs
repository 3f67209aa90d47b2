use std::collections::BTreeSet;

use aftermath::toyworld::{benchmark_domains, build_dataset, split_dataset, SplitFractions};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn splits_are_disjoint_and_exhaustive(n in 10usize..300, rate in 0.05f64..0.95, seed in any::<u64>()) {
        let spec = &benchmark_domains()[0];
        let m = build_dataset(spec, n, rate, seed).unwrap();
        let damaged = m.entries.iter().filter(|e| e.label == Some(1)).count();
        prop_assert_eq!(damaged, (n as f64 * rate).round() as usize);
        let parts = split_dataset(&m, SplitFractions::default(), seed).unwrap();
        let mut seen = BTreeSet::new();
        for p in &parts {
            for e in &p.entries {
                prop_assert!(seen.insert(e.id.clone()));
            }
        }
        let all: BTreeSet<String> = m.entries.iter().map(|e| e.id.clone()).collect();
        prop_assert_eq!(seen, all);
    }
}

#[test]
fn manifests_are_reproducible() {
    let spec = &benchmark_domains()[2];
    let a = build_dataset(spec, 50, 0.2, 9).unwrap();
    let b = build_dataset(spec, 50, 0.2, 9).unwrap();
    assert_eq!(a.to_jsonl(), b.to_jsonl());
}
