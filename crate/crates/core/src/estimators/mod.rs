//! The estimator family: SC, demeaned SC, DID, infeasible SC, mean-predictor
//! SC, IV-GMM SC and an interactive-fixed-effects counterfactual.

mod ife;
mod iv;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dgp::{loading_matrix, uses_constant_factor, FactorDgp};
use crate::error::{Error, Result};
use crate::panel::{EffectSeries, Panel};
use crate::qp::{fit_weights, solve_qp, ConstraintSet, QpProblem, QpSolution, DEFAULT_TOL};

pub use ife::ife_estimate;
pub use iv::{iv_criterion, iv_sc_weights, IvFit};

/// Which estimator to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum EstimatorKind {
    Sc,
    ScDemeaned,
    Did,
    ScInfeasible,
    ScMeanPredictor,
    ScIv,
    Ife { factors: usize },
    Custom(ConstraintSet),
}

impl EstimatorKind {
    /// Constraint set of the QP-based estimators.
    pub fn constraints(&self) -> Option<ConstraintSet> {
        match self {
            EstimatorKind::Sc => Some(ConstraintSet::SC),
            EstimatorKind::ScDemeaned => Some(ConstraintSet::DEMEANED),
            EstimatorKind::Custom(c) => Some(*c),
            _ => None,
        }
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EstimatorKind::Sc => f.write_str("SC"),
            EstimatorKind::ScDemeaned => f.write_str("SC_DEMEANED"),
            EstimatorKind::Did => f.write_str("DID"),
            EstimatorKind::ScInfeasible => f.write_str("SC_INFEASIBLE"),
            EstimatorKind::ScMeanPredictor => f.write_str("SC_MEAN_PREDICTOR"),
            EstimatorKind::ScIv => f.write_str("SC_IV"),
            EstimatorKind::Ife { factors } => write!(f, "IFE:{factors}"),
            EstimatorKind::Custom(c) => {
                let mut parts = Vec::new();
                if c.nonneg {
                    parts.push("nonneg");
                }
                if c.sum_to_one {
                    parts.push("sum1");
                }
                if c.intercept {
                    parts.push("intercept");
                }
                write!(f, "CUSTOM:{}", parts.join("+"))
            }
        }
    }
}

/// Parse a constraint list such as `nonneg,sum1,intercept` (`,` or `+`
/// separated; empty means no restriction).
pub fn parse_constraints(s: &str) -> Result<ConstraintSet> {
    let mut c = ConstraintSet {
        nonneg: false,
        sum_to_one: false,
        intercept: false,
    };
    for part in s.split([',', '+']).map(str::trim).filter(|p| !p.is_empty()) {
        match part.to_ascii_lowercase().as_str() {
            "nonneg" => c.nonneg = true,
            "sum1" | "sum_to_one" => c.sum_to_one = true,
            "intercept" => c.intercept = true,
            "none" => {}
            other => {
                return Err(Error::InvalidArgument(format!("unknown constraint `{other}`")))
            }
        }
    }
    Ok(c)
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (head, arg) = match s.split_once(':') {
            Some((h, a)) => (h, Some(a)),
            None => (s, None),
        };
        let kind = match (head.trim().to_ascii_uppercase().replace('-', "_").as_str(), arg) {
            ("SC", None) => EstimatorKind::Sc,
            ("SC_DEMEANED" | "DEMEANED", None) => EstimatorKind::ScDemeaned,
            ("DID", None) => EstimatorKind::Did,
            ("SC_INFEASIBLE" | "INFEASIBLE", None) => EstimatorKind::ScInfeasible,
            ("SC_MEAN_PREDICTOR" | "MEAN_PREDICTOR", None) => EstimatorKind::ScMeanPredictor,
            ("SC_IV" | "IV", None) => EstimatorKind::ScIv,
            ("IFE", Some(a)) => EstimatorKind::Ife {
                factors: a.trim().parse().map_err(|_| {
                    Error::InvalidArgument(format!("IFE factor count `{a}` is not an integer"))
                })?,
            },
            ("IFE", None) => {
                return Err(Error::InvalidArgument(
                    "IFE needs a factor count, e.g. `IFE:10`".into(),
                ))
            }
            ("CUSTOM", Some(a)) => EstimatorKind::Custom(parse_constraints(a)?),
            _ => return Err(Error::InvalidArgument(format!("unknown estimator `{s}`"))),
        };
        Ok(kind)
    }
}

impl TryFrom<String> for EstimatorKind {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<EstimatorKind> for String {
    fn from(k: EstimatorKind) -> String {
        k.to_string()
    }
}

/// A diagnostic entry: a flag or a number.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Diagnostic {
    Flag(bool),
    Value(f64),
}

/// Output of one estimator on one panel.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateReport {
    pub kind: EstimatorKind,
    /// Control weights (empty for IFE).
    pub weights: DVector<f64>,
    pub intercept: f64,
    pub effects: EffectSeries,
    pub pre_rmspe: f64,
    /// Counterfactual for the treated unit in every period.
    pub counterfactual: DVector<f64>,
    pub diagnostics: BTreeMap<String, Diagnostic>,
}

impl EstimateReport {
    pub fn flag(&self, key: &str) -> Option<bool> {
        match self.diagnostics.get(key) {
            Some(Diagnostic::Flag(b)) => Some(*b),
            _ => None,
        }
    }

    pub fn value(&self, key: &str) -> Option<f64> {
        match self.diagnostics.get(key) {
            Some(Diagnostic::Value(v)) => Some(*v),
            _ => None,
        }
    }
}

/// Assemble a report from a counterfactual series.
pub(crate) fn report_from_counterfactual(
    panel: &Panel,
    kind: EstimatorKind,
    weights: DVector<f64>,
    intercept: f64,
    counterfactual: DVector<f64>,
    diagnostics: BTreeMap<String, Diagnostic>,
) -> Result<EstimateReport> {
    let y0 = panel.treated();
    let t0 = panel.t0();
    let gap = &y0 - &counterfactual;
    let pre_sq: f64 = gap.rows(0, t0).iter().map(|e| e * e).sum();
    let effects = EffectSeries::new(
        gap.rows(t0, panel.t1()).iter().copied().collect(),
        panel.post_labels().to_vec(),
    )?;
    Ok(EstimateReport {
        kind,
        weights,
        intercept,
        effects,
        pre_rmspe: (pre_sq / t0 as f64).sqrt(),
        counterfactual,
        diagnostics,
    })
}

/// Counterfactual `intercept + y_t'w` for every period.
fn weighted_counterfactual(panel: &Panel, w: &DVector<f64>, intercept: f64) -> DVector<f64> {
    let y = panel.control_matrix();
    (y.transpose() * w).add_scalar(intercept)
}

fn qp_diagnostics(panel: &Panel, sol: &QpSolution) -> BTreeMap<String, Diagnostic> {
    let mut d = BTreeMap::new();
    d.insert("kkt_residual".into(), Diagnostic::Value(sol.kkt_residual));
    d.insert("iterations".into(), Diagnostic::Value(sol.iterations as f64));
    d.insert("objective".into(), Diagnostic::Value(sol.objective));
    d.insert("rank".into(), Diagnostic::Value(sol.rank as f64));
    d.insert("nonunique".into(), Diagnostic::Flag(sol.nonunique));
    d.insert("overfit".into(), Diagnostic::Flag(panel.t0() < panel.controls()));
    d
}

/// Effects for fixed weights, optionally with the intercept that matches
/// pre-period means.
pub fn estimate_fixed_weights(
    panel: &Panel,
    weights: &DVector<f64>,
    intercept: bool,
    kind: EstimatorKind,
) -> Result<EstimateReport> {
    if weights.len() != panel.controls() {
        return Err(Error::Dimension {
            what: "weights",
            expected: panel.controls(),
            got: weights.len(),
        });
    }
    let a = if intercept {
        let means = panel.pre_means();
        means[0] - means.rows(1, panel.controls()).dot(weights)
    } else {
        0.0
    };
    let cf = weighted_counterfactual(panel, weights, a);
    report_from_counterfactual(panel, kind, weights.clone(), a, cf, BTreeMap::new())
}

/// Run estimator `kind` on `panel`.
///
/// The infeasible estimator needs the generating model; use
/// [`infeasible_weights`] with [`estimate_fixed_weights`] instead.
pub fn estimate(panel: &Panel, kind: EstimatorKind) -> Result<EstimateReport> {
    match kind {
        EstimatorKind::Sc | EstimatorKind::ScDemeaned | EstimatorKind::Custom(_) => {
            let c = kind.constraints().expect("QP estimator");
            let sol = fit_weights(panel, c)?;
            let cf = weighted_counterfactual(panel, &sol.weights, sol.intercept);
            let diag = qp_diagnostics(panel, &sol);
            report_from_counterfactual(panel, kind, sol.weights, sol.intercept, cf, diag)
        }
        EstimatorKind::Did => {
            let j = panel.controls();
            let w = DVector::from_element(j, 1.0 / j as f64);
            estimate_fixed_weights(panel, &w, true, kind)
        }
        EstimatorKind::ScMeanPredictor => {
            let (sol, underdetermined) = mean_predictor_fit(panel)?;
            let cf = weighted_counterfactual(panel, &sol.weights, 0.0);
            let mut diag = qp_diagnostics(panel, &sol);
            diag.insert("underdetermined".into(), Diagnostic::Flag(underdetermined));
            report_from_counterfactual(panel, kind, sol.weights, 0.0, cf, diag)
        }
        EstimatorKind::ScIv => {
            let fit = iv_sc_weights(panel)?;
            let cf = weighted_counterfactual(panel, &fit.solution.weights, 0.0);
            let mut diag = BTreeMap::new();
            diag.insert("j_statistic".into(), Diagnostic::Value(fit.j_statistic));
            diag.insert("flat_criterion".into(), Diagnostic::Flag(fit.flat_criterion));
            diag.insert(
                "unidentified_directions".into(),
                Diagnostic::Value(fit.unidentified_directions as f64),
            );
            diag.insert("criterion".into(), Diagnostic::Value(fit.solution.objective));
            report_from_counterfactual(panel, kind, fit.solution.weights, 0.0, cf, diag)
        }
        EstimatorKind::Ife { factors } => ife_estimate(panel, factors),
        EstimatorKind::ScInfeasible => Err(Error::InvalidArgument(
            "the infeasible estimator needs the generating model; \
             use infeasible_weights with estimate_fixed_weights"
                .into(),
        )),
    }
}

/// Minimum-norm simplex weights reproducing the treated loadings exactly.
///
/// `mu0` has length F and `mu` is J x F.
pub fn min_norm_phi(mu0: &DVector<f64>, mu: &DMatrix<f64>) -> Result<DVector<f64>> {
    let j = mu.nrows();
    if mu.ncols() != mu0.len() {
        return Err(Error::Dimension {
            what: "control loadings",
            expected: mu0.len(),
            got: mu.ncols(),
        });
    }
    let problem = QpProblem::new(DMatrix::identity(j, j), DVector::zeros(j), 0.0, ConstraintSet::SC)
        .with_equalities(mu.transpose(), mu0.clone());
    match solve_qp(&problem, DEFAULT_TOL) {
        Ok(sol) => Ok(sol.weights),
        Err(Error::Infeasible(_)) => Err(Error::Infeasible(
            "no exact-loading weights exist".into(),
        )),
        Err(e) => Err(e),
    }
}

/// Oracle weights for a DGP: the minimum-norm element of the set of simplex
/// weights that reproduce every loading of the treated unit (stationary,
/// non-stationary and fixed effect).
pub fn infeasible_weights(dgp: &FactorDgp) -> Result<DVector<f64>> {
    let l = loading_matrix(dgp)?;
    let (mu0, mu) = l.stacked(uses_constant_factor(dgp));
    min_norm_phi(&mu0, &mu)
}

/// Weights that match the treated unit's pre-period mean.
pub fn mean_predictor_weights(panel: &Panel) -> Result<QpSolution> {
    mean_predictor_fit(panel).map(|(s, _)| s)
}

/// The mean-predictor solution and whether its optimal set has dimension
/// at least one.
pub fn mean_predictor_fit(panel: &Panel) -> Result<(QpSolution, bool)> {
    let means = panel.pre_means();
    let m0 = means[0];
    let m = means.rows(1, panel.controls()).into_owned();
    let problem = QpProblem::new(&m * m.transpose(), &m * m0, m0 * m0, ConstraintSet::SC);
    let sol = solve_qp(&problem, DEFAULT_TOL)?;
    Ok((sol, mean_face_dimension(&m, m0) >= 1))
}

/// Dimension of `argmin_{w in simplex} (m0 - m'w)^2`.
fn mean_face_dimension(m: &DVector<f64>, m0: f64) -> usize {
    let j = m.len();
    let scale = m.amax().max(m0.abs()).max(1.0);
    let tol = 1e-12 * scale;
    let (lo, hi) = (m.min(), m.max());
    let count = |v: f64| m.iter().filter(|&&x| (x - v).abs() <= tol).count();
    if hi - lo <= tol {
        // every control has the same mean: the whole simplex ties
        return j - 1;
    }
    if m0 > lo + tol && m0 < hi - tol {
        j - 2
    } else if m0 >= hi - tol {
        count(hi) - 1
    } else {
        count(lo) - 1
    }
}
