//! Property suites shared by the proptest target and the acceptance run.
//!
//! Each suite draws its cases with a fixed-seed runner so both targets see
//! the same instances.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use syncon::estimators::{iv_criterion, min_norm_phi};
use syncon::placebo::placebo_prediction;
use syncon::{
    brute_force_simplex, demean_pre, detrend_by_control_mean, fit_weights, gamma_variance,
    infeasible_weights, limit_weights, load_panel, simulate, solve_qp, ConstraintSet,
    EstimatorKind, FactorDgp, LimitSpec, Panel, QpProblem, SimSeed, DEFAULT_TOL,
};

pub const FIXTURE: &str = include_str!("../data/smoking_fixture.csv");

pub const LATTICE_STEP: f64 = 1.0 / 200.0;
pub const EQUIVALENCE_TOL: f64 = 1e-9;
pub const DOMINANCE_TOL: f64 = 1e-9;
pub const IV_ZERO_TOL: f64 = 1e-10;

fn runner(cases: u32) -> TestRunner {
    let config = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn run<S: Strategy>(
    cases: u32,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String> {
    runner(cases).run(&strategy, test).map_err(|e| e.to_string())
}

fn normals(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Random panel with a shared component so the weight problems are not
/// trivial.
pub fn random_panel(seed: u64, j: usize, t0: usize, t1: usize) -> Panel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = t0 + t1;
    let f = normals(&mut rng, 2, t);
    let load = normals(&mut rng, j + 1, 2);
    let level = normals(&mut rng, j + 1, 1) * 3.0;
    let mut y = &load * &f + normals(&mut rng, j + 1, t);
    for i in 0..=j {
        y.row_mut(i).add_scalar_mut(level[(i, 0)]);
    }
    Panel::from_matrix(y, t0).unwrap()
}

/// Solver against the simplex lattice for J <= 3.
///
/// The solver must never lose to a lattice point, and its distance from the
/// best lattice point is bounded by the lattice resolution: rounding the
/// optimum to the lattice within its support moves it by at most
/// `sqrt(J) * step` without first-order loss, so strong convexity keeps the
/// lattice winner within `sqrt(kappa * J) * step` of it.
pub fn solver_vs_lattice(cases: u32) -> Result<(), String> {
    let strategy = (1usize..=3, 0usize..12, any::<u64>());
    run(cases, strategy, |(j, extra, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = j + 1 + extra;
        let y = normals(&mut rng, j, t);
        let y0 = normals(&mut rng, t, 1).column(0).into_owned();
        let tf = t as f64;
        let p = QpProblem::new(
            &y * y.transpose() / tf,
            &y * &y0 / tf,
            y0.norm_squared() / tf,
            ConstraintSet::SC,
        );
        let s = solve_qp(&p, DEFAULT_TOL).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let b = brute_force_simplex(&p, LATTICE_STEP).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let slack = 1e-12 * (1.0 + p.constant);
        prop_assert!(s.objective <= b.objective + slack, "solver {} lattice {}", s.objective, b.objective);
        let eig = p.gram.clone().symmetric_eigen().eigenvalues;
        let (lo, hi) = (eig.min(), eig.max());
        if lo > 1e-8 * hi {
            let bound = ((hi / lo) * j as f64).sqrt() * LATTICE_STEP + 1e-9;
            let gap = (&s.weights - &b.weights).norm();
            prop_assert!(gap <= bound, "weights differ by {gap}, bound {bound}");
        }
        Ok(())
    })
}

/// Intercept-enabled fit equals the intercept-free fit on demeaned data.
pub fn intercept_equals_demeaning(cases: u32) -> Result<(), String> {
    let strategy = (1usize..10, 2usize..40, any::<u64>(), any::<bool>());
    run(cases, strategy, |(j, t0, seed, simplex)| {
        let p = random_panel(seed, j, t0, 2);
        let (with, without) = if simplex {
            (ConstraintSet::DEMEANED, ConstraintSet::SC)
        } else {
            (
                ConstraintSet {
                    nonneg: true,
                    sum_to_one: false,
                    intercept: true,
                },
                ConstraintSet {
                    nonneg: true,
                    sum_to_one: false,
                    intercept: false,
                },
            )
        };
        let a = fit_weights(&p, with).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let b = fit_weights(&demean_pre(&p), without).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let gap = (&a.weights - &b.weights).amax();
        prop_assert!(gap <= EQUIVALENCE_TOL, "weights differ by {gap}");
        Ok(())
    })
}

/// Adding-up weights are unchanged by subtracting the control average.
pub fn detrend_invariance(cases: u32) -> Result<(), String> {
    let strategy = (1usize..10, 2usize..40, any::<u64>(), any::<bool>());
    run(cases, strategy, |(j, t0, seed, intercept)| {
        let p = random_panel(seed, j, t0, 2);
        let c = if intercept { ConstraintSet::DEMEANED } else { ConstraintSet::SC };
        let a = fit_weights(&p, c).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let b = fit_weights(&detrend_by_control_mean(&p), c)
            .map_err(|e| TestCaseError::fail(e.to_string()))?;
        let gap = (&a.weights - &b.weights).amax();
        prop_assert!(gap <= EQUIVALENCE_TOL, "weights differ by {gap}");
        Ok(())
    })
}

/// Random limit spec; about half the draws put the treated loadings inside
/// the convex hull of the controls so that the exact-loading set is
/// non-empty.
pub fn random_limit_spec(seed: u64) -> LimitSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = rng.random_range(1..=4);
    let j = rng.random_range(2..=10);
    let mu = DMatrix::from_fn(j, f, |_, _| rng.random_range(0.0..2.0));
    let mu0 = if rng.random_bool(0.5) {
        let mut w = DVector::from_fn(j, |_, _| rng.random_range(0.0..1.0));
        w /= w.sum();
        mu.transpose() * w
    } else {
        DVector::from_fn(f, |_, _| rng.random_range(0.0..2.0))
    };
    let b = normals(&mut rng, f, f);
    let omega0 = DVector::from_fn(f, |_, _| rng.random_range(-1.0..1.0));
    let second = &b * b.transpose() + &omega0 * omega0.transpose();
    let mut spec = LimitSpec::new(mu0, mu, second, rng.random_range(0.0..2.0));
    spec.omega0 = omega0;
    spec.post_mean = DVector::from_fn(f, |_, _| rng.random_range(-1.0..2.0));
    spec
}

/// The demeaned limit weights have the smallest asymptotic variance among
/// DID and any exact-loading weights.
pub fn dominance(cases: u32) -> Result<(), String> {
    run(cases, any::<u64>(), |seed| {
        let spec = random_limit_spec(seed);
        let j = spec.controls();
        let best = limit_weights(&spec, ConstraintSet::DEMEANED)
            .map_err(|e| TestCaseError::fail(e.to_string()))?;
        let g = best.asymptotic_variance;
        let did = gamma_variance(&spec, &DVector::from_element(j, 1.0 / j as f64)).unwrap();
        prop_assert!(g <= did + DOMINANCE_TOL, "demeaned {g} vs DID {did}");
        if let Ok(phi) = min_norm_phi(&spec.mu0, &spec.mu) {
            let v = gamma_variance(&spec, &phi).unwrap();
            prop_assert!(g <= v + DOMINANCE_TOL, "demeaned {g} vs exact-loading {v}");
        }
        Ok(())
    })
}

/// Without idiosyncratic noise every moment vanishes at the oracle weights.
pub fn iv_zero_on_phi(cases: u32) -> Result<(), String> {
    let strategy = (prop::sample::select(vec![(6, 2), (6, 3), (8, 2), (8, 4), (10, 5)]), 10usize..60, any::<u64>());
    run(cases, strategy, |((j, k), t0, seed)| {
        let dgp = FactorDgp {
            post_shift: 0.0,
            ..FactorDgp::stationary(j, k, 0.0)
        };
        let p = simulate(&dgp, t0, 1, SimSeed { base: seed, stream: 0 }).unwrap();
        let w = infeasible_weights(&dgp).unwrap();
        let q = iv_criterion(&p, &w).map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert!(q <= IV_ZERO_TOL, "criterion {q}");
        Ok(())
    })
}

pub fn fixture_panel() -> Panel {
    load_panel(FIXTURE.as_bytes(), "S03", 1989).unwrap()
}

/// Perturbing the unit's own outcome at or after the target year, or any
/// outcome after it, leaves the one-step-ahead prediction unchanged.
pub fn placebo_leakage(cases: u32) -> Result<(), String> {
    let panel = fixture_panel();
    let units = panel.controls() + 1;
    let periods = panel.periods();
    let methods = vec![EstimatorKind::Sc, EstimatorKind::ScDemeaned, EstimatorKind::Did];
    let strategy = (
        0..units,
        10..periods,
        prop::sample::select(methods),
        any::<bool>(),
        0..units,
        -50.0f64..50.0,
    );
    run(cases, strategy, |(unit, target, method, own, other, bump)| {
        let before = placebo_prediction(&panel, unit, target, method).unwrap();
        let mut y = panel.outcomes().clone();
        if own {
            y[(unit, target)] += bump;
            y[(unit, periods - 1)] -= bump;
        } else {
            for t in target + 1..periods {
                y[(other, t)] += bump;
            }
        }
        let mutated = panel.with_outcomes(y).unwrap();
        let after = placebo_prediction(&mutated, unit, target, method).unwrap();
        prop_assert_eq!(before, after);
        Ok(())
    })
}
