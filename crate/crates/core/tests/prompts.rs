use aftermath::prompts::{build_pool, normalize, tokenize_prompt, PoolKind, Vocabulary};
use proptest::prelude::*;

proptest! {
    #[test]
    fn normalization_is_idempotent(text in "[A-Za-z ,.'!-]{0,80}") {
        let once = normalize(&text);
        prop_assert_eq!(normalize(&once.join(" ")), once);
    }
}

#[test]
fn pool_labels_follow_the_pool() {
    let v = Vocabulary::builtin();
    for kind in PoolKind::all() {
        let pool = build_pool(kind);
        assert!(pool.prompts.iter().all(|p| p.label == kind.label()));
        for p in &pool.prompts {
            assert_eq!(tokenize_prompt(&p.text, &v), tokenize_prompt(&p.text, &v));
        }
    }
}
