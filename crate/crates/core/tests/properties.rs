mod common;

#[test]
fn solver_never_loses_to_the_lattice() {
    common::solver_vs_lattice(200).unwrap();
}

#[test]
fn intercept_is_demeaning() {
    common::intercept_equals_demeaning(100).unwrap();
}

#[test]
fn adding_up_weights_ignore_detrending() {
    common::detrend_invariance(100).unwrap();
}

#[test]
fn demeaned_limit_dominates() {
    common::dominance(100).unwrap();
}

#[test]
fn iv_moments_vanish_without_noise() {
    common::iv_zero_on_phi(50).unwrap();
}

#[test]
fn placebo_predictions_ignore_the_future() {
    common::placebo_leakage(64).unwrap();
}
