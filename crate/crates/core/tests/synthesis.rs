mod common;

use aftermath::prompts::{build_pool_named, PoolKind};
use aftermath::synthesis::{generate_batch, GenerationJob, Models, SynthesisConfig};

#[test]
fn jobs_do_not_depend_on_batching() {
    let f = common::foundation();
    let models = Models::new(&f.codec, &f.generator, &f.scorer).unwrap();
    let cfg = SynthesisConfig { num_candidates: 3, ..SynthesisConfig::default() };
    let pool = build_pool_named("toy_flood_damaged").unwrap();
    let d = common::smoke_domain();
    let jobs: Vec<GenerationJob<'_>> =
        (0..5).map(|i| GenerationJob { pre: &d.train[i].pre, prompt: &pool.prompts[i % pool.prompts.len()], seed: 40 + i as u64 }).collect();
    let together = generate_batch(&jobs, &cfg, &models).unwrap();
    for (i, job) in jobs.iter().enumerate() {
        let alone = generate_batch(std::slice::from_ref(job), &cfg, &models).unwrap().remove(0);
        assert_eq!(alone.0, together[i].0, "job {i}");
        assert_eq!(alone.2, together[i].2, "job {i}");
    }
}

#[test]
fn volume_subsets_are_nested_and_match_direct_runs() {
    let full = common::synthesize_small(24, 1.0);
    let quarter = full.subset(0.25).unwrap();
    let half = full.subset(0.5).unwrap();
    let (a, b) = (common::ids(&quarter), common::ids(&half));
    assert!(a.is_subset(&b) && a.len() < b.len());
    assert_eq!((a.len(), b.len()), (6, 12));
    let direct = common::synthesize_small(24, 0.5);
    assert_eq!(direct.entries.len(), half.entries.len());
    for (x, y) in direct.entries.iter().zip(&half.entries) {
        assert_eq!((x.target_index, x.label, &x.post), (y.target_index, y.label, &y.post));
    }
}

#[test]
fn labels_follow_prompt_pools_and_edits_stay_local() {
    let ds = common::synthesize_small(16, 1.0);
    let damaged: Vec<String> = build_pool_named("toy_flood_damaged").unwrap().prompts.into_iter().map(|p| p.text).collect();
    let undamaged = aftermath::prompts::build_pool(PoolKind::ToyUndamaged);
    for e in &ds.entries {
        let in_damaged = damaged.contains(&e.record.prompt);
        let in_undamaged = undamaged.prompts.iter().any(|p| p.text == e.record.prompt);
        assert!(in_damaged != in_undamaged);
        assert_eq!(e.label, in_damaged as u8);
        let (top, left) = (e.record.mask.rows().start, e.record.mask.cols().start);
        let (bottom, right) = (e.record.mask.rows().end, e.record.mask.cols().end);
        let cell = |v: usize| v / 8;
        for y in 0..64 {
            for x in 0..64 {
                let masked_cell = (cell(top)..=cell(bottom - 1)).contains(&cell(y)) && (cell(left)..=cell(right - 1)).contains(&cell(x));
                if !masked_cell {
                    assert_eq!(e.post.get(y, x), e.pre.get(y, x), "pixel ({y},{x}) outside the edited cells changed");
                }
            }
        }
    }
}
