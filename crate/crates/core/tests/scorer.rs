mod common;

use aftermath::scorer::argmax_lowest;
use proptest::prelude::*;

proptest! {
    #[test]
    fn selection_survives_increasing_transforms(scores in prop::collection::vec(-1.0f64..1.0, 1..10)) {
        let i = argmax_lowest(&scores);
        let t: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() + s).collect();
        prop_assert_eq!(argmax_lowest(&t), i);
    }
}

#[test]
fn scores_are_bounded_and_selection_is_argmax() {
    let f = common::foundation();
    let mut r = common::rng(5);
    let images: Vec<_> = (0..6).map(|_| common::random_image(64, &mut r)).collect();
    let prompt = aftermath::prompts::tokenize_prompt("A satellite image of a building.", f.scorer.vocabulary());
    let refs: Vec<_> = images.iter().collect();
    let scores = f.scorer.scores(&refs, &prompt).unwrap();
    assert!(scores.iter().all(|s| (-1.0..=1.0).contains(s)));
    let best = f.scorer.select_best(&images, &prompt).unwrap();
    assert_eq!(Some(best.index), argmax_lowest(&scores));
}

#[test]
fn checkpoint_round_trip_keeps_tokens() {
    let f = common::foundation();
    let dir = tempfile::tempdir().unwrap();
    f.codec.save(&dir.path().join("codec")).unwrap();
    let back = aftermath::Codec::load(&dir.path().join("codec")).unwrap();
    let probe: Vec<_> = common::smoke_domain().test.iter().map(|p| &p.pre).collect();
    assert_eq!(f.codec.tokenize_batch(&probe).unwrap(), back.tokenize_batch(&probe).unwrap());
    let a = f.codec.decode_batch(&[&f.codec.tokenize(probe[0]).unwrap()]).unwrap();
    let b = back.decode_batch(&[&back.tokenize(probe[0]).unwrap()]).unwrap();
    assert_eq!(a, b);
}
