mod common;

use aftermath::classifier::{train_stage1_multi, ClassifierModel, TrainConfig, ValSet};
use aftermath::eval::auprc;
use aftermath::toyworld::LabeledPair;

#[test]
fn both_branches_share_one_encoder() {
    let m = ClassifierModel::<f32>::new(&common::tiny_encoder(), 1).unwrap();
    let pairs = common::random_pairs(3, 16, 2);
    let refs: Vec<&LabeledPair> = pairs.iter().collect();
    let joint = m.pair_features(&refs).unwrap();
    let pre = m.features(&pairs.iter().map(|p| &p.pre).collect::<Vec<_>>()).unwrap();
    let post = m.features(&pairs.iter().map(|p| &p.post).collect::<Vec<_>>()).unwrap();
    for i in 0..pairs.len() {
        let mut expected = pre[i].clone();
        expected.extend_from_slice(&post[i]);
        assert_eq!(joint[i], expected);
    }
    assert!(m.params().iter().all(|(_, n, _)| n.starts_with("enc.") || n.starts_with("head.")));
}

#[test]
fn early_stopping_returns_the_best_evaluation() {
    let pairs = common::random_pairs(40, 16, 3);
    let (train, val) = pairs.split_at(28);
    let tc = TrainConfig { max_iterations: 60, eval_every: 10, patience: 100, batch_size: 4, lr_backbone: 1e-3, lr_head: 1e-2, ..TrainConfig::desk() };
    let vals = [ValSet::new("val", val)];
    let refs: Vec<&LabeledPair> = train.iter().collect();
    let m = train_stage1_multi::<f32>(&refs, &vals, &common::tiny_encoder(), &tc).unwrap().remove(0);
    let stage = &m.metadata.stages[0];
    let best = stage.evals.iter().map(|e| e.auprc).fold(f64::MIN, f64::max);
    let first_best = stage.evals.iter().find(|e| e.auprc == best).unwrap();
    assert_eq!(stage.best_iteration, first_best.iteration);
    let labels: Vec<u8> = val.iter().map(|p| p.label).collect();
    let again = auprc(&m.logits(val).unwrap(), &labels).unwrap();
    assert!((again - best).abs() < 1e-12, "returned model scores {again}, best evaluation was {best}");
}
