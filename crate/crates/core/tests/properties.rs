//! Exact property checks at full size: locality, masks, quantizer, AP oracle,
//! BCE gradient, freezing and determinism.

mod common;

fn pass(c: common::Check) {
    if let Err(e) = c {
        panic!("{e}");
    }
}

#[test]
fn edit_locality_on_1000_cases() {
    pass(common::check_locality(1000));
}

#[test]
fn masks_in_bounds_exact_size_uniform_offsets() {
    pass(common::check_masks(10_000));
}

#[test]
fn quantizer_matches_brute_force() {
    pass(common::check_quantize(1000));
}

#[test]
fn auprc_matches_threshold_enumeration() {
    pass(common::check_auprc(500));
}

#[test]
fn bce_gradient_matches_finite_differences() {
    pass(common::check_bce_gradient());
}

#[test]
fn stage2_and_adapter_freezing() {
    pass(common::check_freeze());
}

#[test]
fn seeded_runs_are_byte_identical() {
    pass(common::check_determinism());
}
