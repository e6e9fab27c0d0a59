//! Synthetic-control style counterfactual estimation under imperfect
//! pre-treatment fit.
//!
//! The crate covers panel handling, a dense QP solver for the weight
//! problems, the estimator family (SC, demeaned SC, DID, mean-predictor,
//! IV-GMM and interactive fixed effects), large-T0 limit objects, factor-model
//! simulation, a Monte Carlo harness and a one-step-ahead placebo exercise.

/// Version of this crate.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub mod asymptotics;
pub mod dgp;
pub mod error;
pub mod estimators;
pub mod linalg;
pub mod mc;
pub mod panel;
pub mod placebo;
pub mod qp;
pub mod svg;

pub use error::{Error, Result};
pub use panel::{
    demean_pre, detrend_by_control_mean, difference_against_base, load_panel, load_panel_untreated,
    write_long_csv,
    write_wide_csv, EffectSeries, Panel,
};
pub use qp::{
    brute_force_simplex, fit_weights, solve_qp, weight_problem, Centering, ConstraintSet,
    QpProblem, QpSolution, DEFAULT_TOL,
};
pub use asymptotics::{
    gamma_consistency_check, gamma_many_groups, gamma_two_groups, gamma_variance, limit_weights,
    linear_projection, LimitResult, LimitSpec,
};
pub use dgp::{loading_matrix, simulate, FactorDgp, FixedEffectPattern, SimSeed};
pub use estimators::{
    estimate, estimate_fixed_weights, ife_estimate, infeasible_weights, iv_sc_weights,
    mean_predictor_weights, Diagnostic, EstimateReport, EstimatorKind,
};
pub use mc::{
    finite_t_comparison, misallocation, run_mc, run_mc_with_workers, write_mc_csv, McConfig,
    McRow, McSummary,
};
pub use placebo::{
    run_placebo, run_placebo_with_workers, write_placebo_cells_csv, write_placebo_rmse_csv, PlaceboCell, PlaceboConfig,
    PlaceboReport, PlaceboRmse,
};
pub use svg::placebo_scatter;
