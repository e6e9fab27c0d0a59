//! Interactive-fixed-effects counterfactual.
//!
//! The model `y_it = a_i + l_i'f_t + e_it` is fit by least squares to every
//! observed cell of the panel, with the treated unit's post-period outcomes
//! treated as unknown. The unknown cells are imputed by iterating
//! "fill, fit rank r, refill" (each step lowers the residual sum of squares)
//! with SQUAREM extrapolation, and the counterfactual is the fitted model.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use super::{report_from_counterfactual, Diagnostic, EstimateReport, EstimatorKind};
use crate::error::{Error, Result};
use crate::panel::Panel;

const RANK_TOL: f64 = 1e-10;
const CONVERGENCE_TOL: f64 = 1e-9;
const MAX_EVALUATIONS: usize = 20_000;

struct Fit {
    /// Fitted treated row for every period.
    treated: DVector<f64>,
    /// Residual sum of squares of the rank-r fit.
    rss: f64,
    /// r-th singular value relative to the largest.
    rel_sigma_r: f64,
}

struct Imputer<'a> {
    y: &'a DMatrix<f64>,
    t0: usize,
    r: usize,
    evaluations: usize,
}

impl Imputer<'_> {
    /// Fit with the unknown cells set to `x`.
    fn fit(&mut self, x: &DVector<f64>) -> Fit {
        self.evaluations += 1;
        let mut z = self.y.clone();
        z.view_mut((0, self.t0), (1, x.len())).copy_from(&x.transpose());
        let means: Vec<f64> = z.row_iter().map(|row| row.mean()).collect();
        for (i, mut row) in z.row_iter_mut().enumerate() {
            row.add_scalar_mut(-means[i]);
        }
        let svd = z.svd(true, true);
        let u = svd.u.expect("u requested");
        let v_t = svd.v_t.expect("v_t requested");
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        let s = &svd.singular_values;
        let top = s[order[0]];
        let treated = DVector::from_fn(self.y.ncols(), |t, _| {
            means[0]
                + order[..self.r]
                    .iter()
                    .map(|&k| u[(0, k)] * s[k] * v_t[(k, t)])
                    .sum::<f64>()
        });
        Fit {
            treated,
            rss: order[self.r..].iter().map(|&k| s[k] * s[k]).sum(),
            rel_sigma_r: if top > 0.0 { s[order[self.r - 1]] / top } else { 0.0 },
        }
    }

    fn post(&self, fit: &Fit) -> DVector<f64> {
        fit.treated.rows(self.t0, self.y.ncols() - self.t0).into_owned()
    }
}

fn gap(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax()
}

/// IFE counterfactual with `num_factors` factors and unit effects.
pub fn ife_estimate(panel: &Panel, num_factors: usize) -> Result<EstimateReport> {
    let j = panel.controls();
    let t0 = panel.t0();
    let r = num_factors;
    if r == 0 || r + 1 > j.min(t0) {
        return Err(Error::InvalidArgument(format!(
            "need 1 <= factors <= min(J, t0) - 1 = {}, got {r}",
            j.min(t0).saturating_sub(1)
        )));
    }
    let y = panel.outcomes();
    let mut im = Imputer {
        y,
        t0,
        r,
        evaluations: 0,
    };

    // start from the two-way fixed-effects prediction
    let means = panel.pre_means();
    let control_mean_pre = means.rows(1, j).mean();
    let mut x = DVector::from_fn(panel.t1(), |s, _| {
        means[0] - control_mean_pre + y.view((1, t0 + s), (j, 1)).mean()
    });

    let mut converged = false;
    let mut fit = im.fit(&x);
    while im.evaluations < MAX_EVALUATIONS {
        let x1 = im.post(&fit);
        let scale = 1.0 + x.amax();
        if gap(&x1, &x) <= CONVERGENCE_TOL * scale {
            x = x1;
            fit = im.fit(&x);
            converged = true;
            break;
        }
        let fit1 = im.fit(&x1);
        let x2 = im.post(&fit1);
        let step = &x1 - &x;
        let curve = &x2 - &x1 - &step;
        let fit2 = im.fit(&x2);
        let cn = curve.norm();
        if cn == 0.0 {
            x = x2;
            fit = fit2;
            continue;
        }
        let alpha = (-step.norm() / cn).min(-1.0);
        let jump = &x - &step * (2.0 * alpha) + &curve * (alpha * alpha);
        let fit_jump = im.fit(&jump);
        if fit_jump.rss.is_finite() && fit_jump.rss <= fit2.rss {
            x = jump;
            fit = fit_jump;
        } else {
            x = x2;
            fit = fit2;
        }
    }

    if fit.rel_sigma_r <= RANK_TOL {
        return Err(Error::Singular {
            what: "demeaned outcome panel",
            rank: r - 1,
            dim: r,
        });
    }
    let mut cf = fit.treated.clone();
    cf.rows_mut(t0, x.len()).copy_from(&x);
    let intercept = cf.mean();

    let mut diag = BTreeMap::new();
    diag.insert("factors".into(), Diagnostic::Value(r as f64));
    diag.insert("converged".into(), Diagnostic::Flag(converged));
    diag.insert("evaluations".into(), Diagnostic::Value(im.evaluations as f64));
    diag.insert("rss".into(), Diagnostic::Value(fit.rss));
    report_from_counterfactual(
        panel,
        EstimatorKind::Ife { factors: r },
        DVector::zeros(0),
        intercept,
        cf,
        diag,
    )
}
