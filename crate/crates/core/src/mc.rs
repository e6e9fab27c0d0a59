//! Replicated experiments over a factor DGP.
//!
//! Replications run in parallel but every draw is a pure function of its
//! seed and results are reduced in replication order, so summaries do not
//! depend on the number of workers.

use std::io::Write;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize, Serializer};

use crate::asymptotics::{gamma_variance, limit_spec_from_dgp, LimitSpec};
use crate::dgp::{simulate, FactorDgp, SimSeed};
use crate::error::{Error, Result};
use crate::estimators::{estimate, estimate_fixed_weights, infeasible_weights, EstimatorKind};
use crate::linalg::{pairwise_mean, sample_sd};
use crate::qp::{solve_qp, DEFAULT_TOL};

fn default_reps() -> usize {
    5000
}

fn one() -> usize {
    1
}

/// Design of a Monte Carlo experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McConfig {
    pub dgp: FactorDgp,
    pub t0_grid: Vec<usize>,
    #[serde(default = "default_reps")]
    pub reps: usize,
    pub estimators: Vec<EstimatorKind>,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default)]
    pub include_asymptotic_row: bool,
    /// Post-treatment periods simulated per replication.
    #[serde(default = "one")]
    pub t1: usize,
    /// Average the effect over all post periods instead of the first.
    #[serde(default)]
    pub average_post: bool,
    /// Label written in the `panel` column.
    #[serde(default)]
    pub label: String,
}

impl McConfig {
    pub fn validate(&self) -> Result<()> {
        self.dgp.validate()?;
        if self.reps == 0 {
            return Err(Error::InvalidArgument("reps must be at least 1".into()));
        }
        if self.t0_grid.is_empty() && !self.include_asymptotic_row {
            return Err(Error::InvalidArgument("empty t0 grid".into()));
        }
        if self.t1 == 0 {
            return Err(Error::InvalidArgument("t1 must be at least 1".into()));
        }
        if self.t0_grid.iter().any(|&t| t < 2) {
            return Err(Error::InvalidArgument("every t0 must be at least 2".into()));
        }
        Ok(())
    }
}

/// One (t0, estimator) cell. `t0 = None` is the large-T0 limit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McRow {
    pub panel: String,
    pub t0: Option<usize>,
    pub estimator: EstimatorKind,
    /// Mean weight on controls sharing the treated unit's stationary group.
    #[serde(serialize_with = "opt_float")]
    pub mu_hat1: Option<f64>,
    /// Same for the non-stationary group (only when the model has one).
    #[serde(serialize_with = "opt_float")]
    pub theta_hat1: Option<f64>,
    /// Mean reconstructed fixed effect (when the model has fixed effects).
    #[serde(serialize_with = "opt_float")]
    pub fe_hat: Option<f64>,
    #[serde(serialize_with = "float")]
    pub bias: f64,
    #[serde(serialize_with = "float")]
    pub se: f64,
    #[serde(serialize_with = "float")]
    pub mc_error: f64,
    /// Successful replications (0 for limit rows).
    pub reps: usize,
    pub seed: u64,
    pub error: Option<String>,
}

fn float<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_str(&format_float(*v))
    }
}

fn opt_float<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(x) => float(x, s),
        None => s.serialize_none(),
    }
}

/// Machine format for floats: 17 significant digits, `inf`/`-inf`/`nan`.
pub fn format_float(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.16e}")
    }
}

/// All rows of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McSummary {
    pub rows: Vec<McRow>,
}

impl McSummary {
    pub fn row(&self, t0: Option<usize>, estimator: EstimatorKind) -> Option<&McRow> {
        self.rows
            .iter()
            .find(|r| r.t0 == t0 && r.estimator == estimator)
    }
}

/// Weight mass on controls sharing the treated unit's stationary group and,
/// when the model has one, its non-stationary group (1 otherwise).
pub fn misallocation(weights: &DVector<f64>, dgp: &FactorDgp) -> Result<(f64, f64)> {
    if weights.len() != dgp.j {
        return Err(Error::Dimension {
            what: "weights",
            expected: dgp.j,
            got: weights.len(),
        });
    }
    let mu = (1..=dgp.j)
        .filter(|&u| dgp.stationary_group(u) == 0)
        .map(|u| weights[u - 1])
        .sum();
    let theta = if dgp.r == 0 {
        1.0
    } else {
        (1..=dgp.j)
            .filter(|&u| dgp.trend_group(u) == Some(0))
            .map(|u| weights[u - 1])
            .sum()
    };
    Ok((mu, theta))
}

fn reconstructed_fe(weights: &DVector<f64>, dgp: &FactorDgp) -> f64 {
    (1..=dgp.j).map(|u| weights[u - 1] * dgp.fixed_effect(u)).sum()
}

/// Seed of the cell with `t0` pre-periods.
pub fn cell_seed(base_seed: u64, t0: usize) -> u64 {
    // splitmix64 finalizer
    let mut z = base_seed ^ (t0 as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
struct Draw {
    effect: f64,
    mu: Option<f64>,
    theta: Option<f64>,
    fe: Option<f64>,
}

fn one_estimate(
    config: &McConfig,
    kind: EstimatorKind,
    oracle: &Option<std::result::Result<DVector<f64>, Error>>,
    panel: &crate::panel::Panel,
) -> Result<Draw> {
    let dgp = &config.dgp;
    let report = match kind {
        EstimatorKind::ScInfeasible => {
            let w = oracle
                .as_ref()
                .expect("oracle computed when requested")
                .as_ref()
                .map_err(Clone::clone)?;
            estimate_fixed_weights(panel, w, false, kind)?
        }
        _ => estimate(panel, kind)?,
    };
    let effect = if config.average_post {
        pairwise_mean(&report.effects.values)
    } else {
        report.effects.values[0]
    };
    let has_weights = report.weights.len() == dgp.j;
    let (mu, theta) = if has_weights {
        let (m, t) = misallocation(&report.weights, dgp)?;
        (Some(m), (dgp.r > 0).then_some(t))
    } else {
        (None, None)
    };
    let fe = (has_weights && dgp.fixed_effects.is_some())
        .then(|| reconstructed_fe(&report.weights, dgp));
    Ok(Draw {
        effect,
        mu,
        theta,
        fe,
    })
}

fn mean_of(draws: &[&Draw], f: impl Fn(&Draw) -> Option<f64>) -> Option<f64> {
    let xs: Option<Vec<f64>> = draws.iter().map(|d| f(d)).collect();
    xs.filter(|v| !v.is_empty()).map(|v| pairwise_mean(&v))
}

/// Run the experiment with the default worker count.
pub fn run_mc(config: &McConfig) -> Result<McSummary> {
    run_mc_with_workers(config, rayon::current_num_threads())
}

/// Run the experiment on `workers` threads.
pub fn run_mc_with_workers(config: &McConfig, workers: usize) -> Result<McSummary> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot start worker pool: {e}")))?;
    let dgp = &config.dgp;
    let oracle = config
        .estimators
        .contains(&EstimatorKind::ScInfeasible)
        .then(|| infeasible_weights(dgp));

    let mut rows = Vec::new();
    for &t0 in &config.t0_grid {
        let seed = cell_seed(config.base_seed, t0);
        let per_rep: Vec<Vec<std::result::Result<Draw, Error>>> = pool.install(|| {
            (0..config.reps as u64)
                .into_par_iter()
                .map(|rep| {
                    let sim = simulate(dgp, t0, config.t1, SimSeed { base: seed, stream: rep });
                    config
                        .estimators
                        .iter()
                        .map(|&kind| match &sim {
                            Ok(panel) => one_estimate(config, kind, &oracle, panel),
                            Err(e) => Err(e.clone()),
                        })
                        .collect()
                })
                .collect()
        });
        for (e, &kind) in config.estimators.iter().enumerate() {
            let ok: Vec<&Draw> = per_rep.iter().filter_map(|r| r[e].as_ref().ok()).collect();
            let failures: Vec<&Error> = per_rep.iter().filter_map(|r| r[e].as_ref().err()).collect();
            let error = failures.first().map(|first| {
                format!(
                    "{} of {} replications failed; first: {first}",
                    failures.len(),
                    config.reps
                )
            });
            let effects: Vec<f64> = ok.iter().map(|d| d.effect - dgp.treatment_effect).collect();
            let (bias, se) = if effects.is_empty() {
                (f64::NAN, f64::NAN)
            } else {
                (pairwise_mean(&effects), sample_sd(&effects))
            };
            rows.push(McRow {
                panel: config.label.clone(),
                t0: Some(t0),
                estimator: kind,
                mu_hat1: mean_of(&ok, |d| d.mu),
                theta_hat1: mean_of(&ok, |d| d.theta),
                fe_hat: mean_of(&ok, |d| d.fe),
                bias,
                se,
                mc_error: se / (effects.len() as f64).sqrt(),
                reps: effects.len(),
                seed,
                error,
            });
        }
    }
    if config.include_asymptotic_row {
        rows.extend(asymptotic_rows(config)?);
    }
    Ok(McSummary { rows })
}

/// Large-T0 rows for the estimators that have a limit counterpart.
pub fn asymptotic_rows(config: &McConfig) -> Result<Vec<McRow>> {
    let dgp = &config.dgp;
    let spec = limit_spec_from_dgp(dgp)?;
    let mut rows = Vec::new();
    for &kind in &config.estimators {
        let limit = match kind {
            EstimatorKind::Sc | EstimatorKind::ScDemeaned | EstimatorKind::Custom(_) => {
                let c = kind.constraints().expect("QP estimator");
                solve_qp(&spec.problem(c)?, DEFAULT_TOL).map(|s| (s.weights, c.intercept))
            }
            EstimatorKind::Did => Ok((DVector::from_element(dgp.j, 1.0 / dgp.j as f64), true)),
            EstimatorKind::ScInfeasible => infeasible_weights(dgp).map(|w| (w, false)),
            _ => continue,
        };
        rows.push(match limit {
            Ok((w, intercept)) => limit_row(config, &spec, kind, &w, intercept)?,
            Err(e) => McRow {
                panel: config.label.clone(),
                t0: None,
                estimator: kind,
                mu_hat1: None,
                theta_hat1: None,
                fe_hat: None,
                bias: f64::NAN,
                se: f64::NAN,
                mc_error: 0.0,
                reps: 0,
                seed: config.base_seed,
                error: Some(e.to_string()),
            },
        });
    }
    Ok(rows)
}

fn limit_row(
    config: &McConfig,
    spec: &LimitSpec,
    kind: EstimatorKind,
    w: &DVector<f64>,
    intercept: bool,
) -> Result<McRow> {
    let dgp = &config.dgp;
    let (mu, theta) = misallocation(w, dgp)?;
    // without the non-stationary loadings the variance diverges with T0
    let se = if spec.reproduces_pinned(w) {
        gamma_variance(spec, w)?.sqrt()
    } else {
        f64::INFINITY
    };
    Ok(McRow {
        panel: config.label.clone(),
        t0: None,
        estimator: kind,
        mu_hat1: Some(mu),
        theta_hat1: (dgp.r > 0).then_some(theta),
        fe_hat: dgp.fixed_effects.is_some().then(|| reconstructed_fe(w, dgp)),
        bias: spec.bias(w, intercept),
        se,
        mc_error: 0.0,
        reps: 0,
        seed: config.base_seed,
        error: None,
    })
}

/// Weight mass on the treated unit's group by T0, with the limit last.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FiniteTComparison {
    pub estimator: EstimatorKind,
    pub t0: Vec<Option<usize>>,
    pub mu_hat1: Vec<f64>,
    /// Mass never falls as T0 grows.
    pub nondecreasing: bool,
    /// Every finite-T0 mass sits below the limit value.
    pub below_limit: bool,
}

/// Compare finite-T0 misallocation with its limit for every estimator with
/// a limit counterpart.
pub fn finite_t_comparison(config: &McConfig) -> Result<Vec<FiniteTComparison>> {
    if config.t0_grid.len() < 2 {
        return Err(Error::InvalidArgument(
            "the comparison needs at least two values of t0".into(),
        ));
    }
    let mut cfg = config.clone();
    cfg.include_asymptotic_row = true;
    cfg.t0_grid.sort_unstable();
    let summary = run_mc(&cfg)?;
    let mut out = Vec::new();
    for &kind in &cfg.estimators {
        let Some(limit) = summary.row(None, kind).and_then(|r| r.mu_hat1) else {
            continue;
        };
        let finite: Vec<f64> = cfg
            .t0_grid
            .iter()
            .filter_map(|&t| summary.row(Some(t), kind).and_then(|r| r.mu_hat1))
            .collect();
        let nondecreasing = finite.windows(2).all(|p| p[1] >= p[0]) && finite.last().is_none_or(|&l| l <= limit + 1e-12);
        let below_limit = finite.iter().all(|&m| m <= limit + 1e-12);
        let mut t0: Vec<Option<usize>> = cfg.t0_grid.iter().map(|&t| Some(t)).collect();
        t0.push(None);
        let mut mu_hat1 = finite;
        mu_hat1.push(limit);
        out.push(FiniteTComparison {
            estimator: kind,
            t0,
            mu_hat1,
            nondecreasing,
            below_limit,
        });
    }
    Ok(out)
}

/// Write rows as CSV with the columns
/// `panel,t0,estimator,mu_hat1,theta_hat1,bias,se,mc_error,reps,seed`.
pub fn write_mc_csv<W: Write>(rows: &[McRow], mut sink: W) -> Result<()> {
    writeln!(sink, "panel,t0,estimator,mu_hat1,theta_hat1,bias,se,mc_error,reps,seed")?;
    let opt = |v: Option<f64>| v.map(format_float).unwrap_or_default();
    for r in rows {
        writeln!(
            sink,
            "{},{},{},{},{},{},{},{},{},{}",
            r.panel,
            r.t0.map_or_else(|| "inf".to_string(), |t| t.to_string()),
            r.estimator,
            opt(r.mu_hat1),
            opt(r.theta_hat1),
            format_float(r.bias),
            format_float(r.se),
            format_float(r.mc_error),
            r.reps,
            r.seed
        )?;
    }
    Ok(())
}
