mod common;

use aftermath::maskgen::{DecodeJob, DecodeSchedule};
use aftermath::masking::{apply_mask, downsample_mask, sample_mask};
use aftermath::prompts::tokenize_prompt;
use proptest::prelude::*;

proptest! {
    #[test]
    fn schedule_unmasks_everything_once(m0 in 1usize..200, steps in 1usize..16) {
        let s = DecodeSchedule { total_steps: steps, temperature: 1.0, seed: 0 };
        let mut current = m0;
        let mut revealed = 0;
        for t in 1..=steps {
            let next = s.remaining_after(t, m0, current);
            prop_assert!(next < current || current == 0);
            revealed += current - next;
            current = next;
            if current == 0 {
                break;
            }
        }
        prop_assert_eq!(current, 0);
        prop_assert_eq!(revealed, m0);
    }
}

#[test]
fn temperature_zero_decoding_is_deterministic() {
    let f = common::foundation();
    let pre = &common::smoke_domain().train[0].pre;
    let tokens = f.codec.tokenize(pre).unwrap();
    let mut r = common::rng(3);
    let m = sample_mask(64, 64, 32, 32, &mut r).unwrap();
    let masked = apply_mask(&tokens, &downsample_mask(&m, 8).unwrap()).unwrap();
    let prompt = tokenize_prompt("An aerial view of an intact house.", f.generator.vocabulary());
    let greedy = DecodeSchedule { total_steps: 8, temperature: 0.0, seed: 0 };
    let a = f.generator.parallel_decode(&masked, &prompt, &greedy).unwrap();
    let b = f.generator.parallel_decode(&masked, &prompt, &DecodeSchedule { seed: 99, ..greedy }).unwrap();
    assert_eq!(a, b);
    let jobs = [DecodeJob { grid: &masked, prompt: &prompt, seed: 7 }, DecodeJob { grid: &masked, prompt: &prompt, seed: 8 }];
    let batch = f.generator.decode_jobs(&jobs, &greedy).unwrap();
    assert_eq!(batch[0], a);
    assert_eq!(batch[1], a);
}
