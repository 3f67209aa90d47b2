use aftermath::masking::{apply_mask, downsample_mask, EditMask, Perturbation, TokenMask};
use aftermath::TokenGrid;
use proptest::prelude::*;

fn rect(h: usize, w: usize, top: usize, left: usize, ph: usize, pw: usize) -> EditMask {
    let mut m = EditMask::with_perturbation(h, w, 1, 1, Perturbation { delta_x: 0, delta_y: 0 }).unwrap();
    m.grid = vec![0; h * w];
    for y in top..top + ph {
        for x in left..left + pw {
            m.grid[y * w + x] = 1;
        }
    }
    m
}

fn subset(a: &TokenMask, b: &TokenMask) -> bool {
    a.grid.iter().zip(&b.grid).all(|(x, y)| *x <= *y)
}

proptest! {
    #[test]
    fn perturbed_patch_stays_inside(dy in -4i64..=4, dx in -4i64..=4, ph in 1usize..=32, pw in 1usize..=32) {
        let m = EditMask::with_perturbation(64, 64, ph, pw, Perturbation { delta_x: dx, delta_y: dy }).unwrap();
        prop_assert!(m.rows().end <= 64 && m.cols().end <= 64);
        prop_assert_eq!(m.popcount(), ph * pw);
    }

    #[test]
    fn downsampling_is_monotone(top in 0usize..40, left in 0usize..40, ph in 1usize..20, pw in 1usize..20,
                                grow in 0usize..4) {
        let a = rect(64, 64, top, left, ph, pw);
        let b = rect(64, 64, top.saturating_sub(grow), left.saturating_sub(grow), ph + 2 * grow, pw + 2 * grow);
        prop_assert!(subset(&downsample_mask(&a, 8).unwrap(), &downsample_mask(&b, 8).unwrap()));
    }

    #[test]
    fn apply_mask_keeps_unmasked_ids(ids in prop::collection::vec(0u32..128, 64), bits in prop::collection::vec(0u8..2, 64)) {
        let t = TokenGrid::new(8, 8, 128, ids).unwrap();
        let m = TokenMask { rows: 8, cols: 8, factor: 8, grid: bits.clone() };
        let out = apply_mask(&t, &m).unwrap();
        for i in 0..64 {
            if bits[i] == 0 {
                prop_assert_eq!(out.ids[i], t.ids[i]);
            } else {
                prop_assert!(out.is_masked(i));
            }
        }
    }
}
