mod support;

use capsid::training::LossWeights;
use support::finite_diff::{instance, max_relative_error, up_projection_instance, REL_TOL};

#[test]
fn gradient_matches_finite_differences_at_full_depth() {
    let inst = instance(4, 4, 3, 0.99, 0.0, 11);
    let (err, n) = max_relative_error(&inst, &LossWeights::default());
    assert!(
        err < REL_TOL,
        "max relative error {err:e} over {n} parameters"
    );
}

#[test]
fn gradient_matches_finite_differences_at_depth_one() {
    let inst = instance(4, 4, 3, 0.0, 0.0, 12);
    let (err, _) = max_relative_error(&inst, &LossWeights::default());
    assert!(err < REL_TOL, "max relative error {err:e}");
}

#[test]
fn gradient_matches_finite_differences_with_up_projection() {
    let inst =
        up_projection_instance().expect("no instance kept every threshold away from its kink");
    let (err, _) = max_relative_error(&inst, &LossWeights::default());
    assert!(err < REL_TOL, "max relative error {err:e}");
}
