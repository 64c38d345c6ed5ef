#[path = "support/gradient_cases.rs"]
mod cases;

use cases::TOL;
use hsfuse::network::ModuleFlags;

#[test]
fn every_op_matches_finite_differences() {
    for (name, case) in cases::op_cases() {
        let err = case();
        assert!(err < TOL, "{}: relative error {:e}", name, err);
    }
}

#[test]
fn full_loss_all_modules() {
    let err = cases::full_loss(ModuleFlags::default());
    assert!(err < TOL, "relative error {:e}", err);
}

#[test]
fn full_loss_every_ablation_arm() {
    for flags in cases::all_arms() {
        let err = cases::full_loss(flags);
        assert!(err < TOL, "{:?}: relative error {:e}", flags, err);
    }
}
