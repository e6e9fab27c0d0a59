//! Large-T0 limits of the weight problems and the quantities built on them.

use nalgebra::{DMatrix, DVector};

use crate::dgp::{loading_matrix, uses_constant_factor, FactorDgp};
use crate::error::{Error, Result};
use crate::linalg::{max_abs, sym_eigen};
use crate::qp::{solve_qp, Centering, ConstraintSet, QpProblem, DEFAULT_TOL};

const MOMENT_TOL: f64 = 1e-10;
const PHI_TOL: f64 = 1e-8;

/// Limits of the first and second moments of the stationary factors, their
/// loadings, and the post-treatment factor mean.
#[derive(Debug, Clone, PartialEq)]
pub struct LimitSpec {
    /// Treated loadings (length F).
    pub mu0: DVector<f64>,
    /// J x F control loadings.
    pub mu: DMatrix<f64>,
    /// Pre-period factor mean.
    pub omega0: DVector<f64>,
    /// Pre-period factor second moment.
    pub omega_second: DMatrix<f64>,
    /// Idiosyncratic variance shared by every unit.
    pub sigma2: f64,
    /// Per-unit idiosyncratic variances (treated first), overriding `sigma2`.
    pub unit_variances: Option<DVector<f64>>,
    /// Factor mean in post-treatment periods.
    pub post_mean: DVector<f64>,
    /// Loadings on non-stationary factors that the limit weights must
    /// reproduce exactly: `(theta0, theta)` with theta J x R.
    pub pinned: Option<(DVector<f64>, DMatrix<f64>)>,
}

/// Limit weights and what they imply for the estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct LimitResult {
    pub weights: DVector<f64>,
    pub reconstructed_loadings: DVector<f64>,
    pub asymptotic_bias: f64,
    pub asymptotic_variance: f64,
    pub in_phi: bool,
}

impl LimitSpec {
    /// Spec with zero factor mean (before and after treatment) and shared
    /// idiosyncratic variance.
    pub fn new(mu0: DVector<f64>, mu: DMatrix<f64>, omega_second: DMatrix<f64>, sigma2: f64) -> Self {
        let f = mu0.len();
        LimitSpec {
            mu0,
            mu,
            omega0: DVector::zeros(f),
            omega_second,
            sigma2,
            unit_variances: None,
            post_mean: DVector::zeros(f),
            pinned: None,
        }
    }

    pub fn controls(&self) -> usize {
        self.mu.nrows()
    }

    pub fn factors(&self) -> usize {
        self.mu0.len()
    }

    fn variance(&self, unit: usize) -> f64 {
        self.unit_variances.as_ref().map_or(self.sigma2, |v| v[unit])
    }

    /// Second moment net of the mean, `Omega0 - omega0 omega0'`.
    pub fn centered_second(&self) -> DMatrix<f64> {
        &self.omega_second - &self.omega0 * self.omega0.transpose()
    }

    pub fn validate(&self) -> Result<()> {
        let (j, f) = (self.controls(), self.factors());
        let dims = [
            ("control loadings", self.mu.ncols(), f),
            ("factor mean", self.omega0.len(), f),
            ("factor second moment", self.omega_second.nrows(), f),
            ("factor second moment", self.omega_second.ncols(), f),
            ("post-period factor mean", self.post_mean.len(), f),
        ];
        for (what, got, expected) in dims {
            if got != expected {
                return Err(Error::Dimension { what, expected, got });
            }
        }
        if j == 0 {
            return Err(Error::InvalidArgument("limit spec has no controls".into()));
        }
        if !(self.sigma2 >= 0.0) {
            return Err(Error::InvalidArgument("sigma2 must be non-negative".into()));
        }
        if let Some(v) = &self.unit_variances {
            if v.len() != j + 1 {
                return Err(Error::Dimension {
                    what: "unit variances",
                    expected: j + 1,
                    got: v.len(),
                });
            }
            if v.iter().any(|x| !(*x >= 0.0)) {
                return Err(Error::InvalidArgument("unit variances must be non-negative".into()));
            }
        }
        if let Some((t0, t)) = &self.pinned {
            if t.nrows() != j || t.ncols() != t0.len() {
                return Err(Error::Dimension {
                    what: "pinned loadings",
                    expected: j,
                    got: t.nrows(),
                });
            }
        }
        let scale = max_abs(&self.omega_second).max(1.0);
        if max_abs(&(&self.omega_second - self.omega_second.transpose())) > MOMENT_TOL * scale {
            return Err(Error::InvalidArgument("factor second moment is not symmetric".into()));
        }
        for m in [self.omega_second.clone(), self.centered_second()] {
            let min = sym_eigen(&m).eigenvalues.min();
            if min < -MOMENT_TOL * scale {
                return Err(Error::NotPsd { min_eigenvalue: min });
            }
        }
        Ok(())
    }

    fn noise_diag(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_fn(self.controls(), |c, _| self.variance(c + 1)))
    }

    /// The limiting weight problem under `constraints`.
    pub fn problem(&self, constraints: ConstraintSet) -> Result<QpProblem> {
        self.validate()?;
        let om = &self.omega_second;
        let gram = self.noise_diag() + &self.mu * om * self.mu.transpose();
        let linear = &self.mu * (om * &self.mu0);
        let constant = self.variance(0) + self.mu0.dot(&(om * &self.mu0));
        let mut problem = QpProblem::new(gram, linear, constant, constraints).with_centering(Centering {
            treated: self.mu0.dot(&self.omega0),
            controls: &self.mu * &self.omega0,
        });
        if let Some((theta0, theta)) = &self.pinned {
            problem = problem.with_equalities(theta.transpose(), theta0.clone());
        }
        Ok(problem)
    }

    /// Loading mismatch `mu0 - mu'w`.
    pub fn mismatch(&self, w: &DVector<f64>) -> DVector<f64> {
        &self.mu0 - self.mu.transpose() * w
    }

    /// Limit bias of the estimator with weights `w`. With an intercept the
    /// factor mean is measured relative to its pre-period level.
    pub fn bias(&self, w: &DVector<f64>, intercept: bool) -> f64 {
        let shift = if intercept {
            &self.post_mean - &self.omega0
        } else {
            self.post_mean.clone()
        };
        shift.dot(&self.mismatch(w))
    }

    /// True when `w` reproduces the pinned non-stationary loadings.
    pub fn reproduces_pinned(&self, w: &DVector<f64>) -> bool {
        match &self.pinned {
            None => true,
            Some((t0, t)) => (t0 - t.transpose() * w).amax() <= PHI_TOL,
        }
    }
}

/// Weights minimizing the limiting objective.
pub fn limit_weights(spec: &LimitSpec, constraints: ConstraintSet) -> Result<LimitResult> {
    let sol = solve_qp(&spec.problem(constraints)?, DEFAULT_TOL)?;
    let w = sol.weights;
    let mismatch = spec.mismatch(&w);
    Ok(LimitResult {
        reconstructed_loadings: spec.mu.transpose() * &w,
        asymptotic_bias: spec.bias(&w, constraints.intercept),
        asymptotic_variance: gamma_variance(spec, &w)?,
        in_phi: mismatch.norm() <= PHI_TOL && spec.reproduces_pinned(&w),
        weights: w,
    })
}

/// Asymptotic variance of the effect estimator with weights `w`:
/// idiosyncratic part plus the loading mismatch under the centered metric.
pub fn gamma_variance(spec: &LimitSpec, w: &DVector<f64>) -> Result<f64> {
    if w.len() != spec.controls() {
        return Err(Error::Dimension {
            what: "weights",
            expected: spec.controls(),
            got: w.len(),
        });
    }
    let noise: f64 = spec.variance(0)
        + w.iter()
            .enumerate()
            .map(|(c, v)| spec.variance(c + 1) * v * v)
            .sum::<f64>();
    let m = spec.mismatch(w);
    Ok(noise + m.dot(&(spec.centered_second() * &m)))
}

fn even_controls(j: usize, min: usize) -> Result<()> {
    if j % 2 != 0 || j < min {
        return Err(Error::InvalidArgument(format!(
            "J must be even and at least {min}, got {j}"
        )));
    }
    Ok(())
}

/// Misallocated weight share with two groups of J/2 controls.
pub fn gamma_two_groups(sigma2: f64, j: usize) -> Result<f64> {
    even_controls(j, 2)?;
    if !(sigma2 >= 0.0) {
        return Err(Error::InvalidArgument("sigma2 must be non-negative".into()));
    }
    Ok(sigma2 / (2.0 * sigma2 + j as f64))
}

/// Misallocated weight share with J/2 groups of two controls.
pub fn gamma_many_groups(sigma2: f64, j: usize) -> Result<f64> {
    even_controls(j, 4)?;
    if !(sigma2 >= 0.0) {
        return Err(Error::InvalidArgument("sigma2 must be non-negative".into()));
    }
    let j = j as f64;
    Ok((j - 2.0) / j * sigma2 / (sigma2 + 2.0))
}

/// Limit spec of the grouped stationary model with K equal groups, unit
/// factor variances and a unit post-period shift on the first factor.
pub fn group_spec(sigma2: f64, j: usize, k: usize) -> Result<LimitSpec> {
    if k == 0 || j % k != 0 {
        return Err(Error::InvalidArgument(format!(
            "J = {j} is not divisible by K = {k}"
        )));
    }
    let dgp = FactorDgp {
        delta_variance: 0.0,
        ..FactorDgp::stationary(j, k, sigma2)
    };
    limit_spec_from_dgp(&dgp)
}

/// Misallocation of the limiting SC weights in the grouped model.
pub fn gamma_consistency_check(sigma2: f64, j: usize, k: usize) -> Result<f64> {
    let spec = group_spec(sigma2, j, k)?;
    let res = limit_weights(&spec, ConstraintSet::SC)?;
    let same: f64 = (0..j / k).map(|c| res.weights[c]).sum();
    Ok(1.0 - same)
}

/// Limit spec implied by a factor DGP.
///
/// Factors are ordered as the common shock, the K stationary factors and,
/// when fixed effects are present, a constant factor. Non-stationary
/// loadings become pinned constraints.
pub fn limit_spec_from_dgp(dgp: &FactorDgp) -> Result<LimitSpec> {
    let l = loading_matrix(dgp)?;
    let (j, k) = (dgp.j, dgp.k);
    let constant = uses_constant_factor(dgp);
    let f = 1 + k + usize::from(constant);
    let mut mu0 = DVector::zeros(f);
    let mut mu = DMatrix::zeros(j, f);
    let mut omega0 = DVector::zeros(f);
    let mut second = DMatrix::zeros(f, f);
    let mut post = DVector::zeros(f);
    mu0[0] = 1.0;
    mu.column_mut(0).fill(1.0);
    second[(0, 0)] = dgp.delta_variance;
    mu0.rows_mut(1, k).copy_from(&l.mu0);
    mu.view_mut((0, 1), (j, k)).copy_from(&l.mu);
    for i in 1..=k {
        second[(i, i)] = 1.0;
    }
    post[1] = dgp.post_shift;
    if constant {
        mu0[f - 1] = l.fe0;
        mu.set_column(f - 1, &l.fe);
        omega0[f - 1] = 1.0;
        second[(f - 1, f - 1)] = 1.0;
        post[f - 1] = 1.0;
    }
    let unit_variances = dgp.hetero.as_ref().map(|h| DVector::from_column_slice(h));
    let pinned = (dgp.r > 0).then(|| (l.theta0.clone(), l.theta.clone()));
    Ok(LimitSpec {
        mu0,
        mu,
        omega0,
        omega_second: second,
        sigma2: dgp.sigma2,
        unit_variances,
        post_mean: post,
        pinned,
    })
}

/// Coefficients of the linear projection of the treated outcome on the
/// control outcomes when the factors have mean `spec.omega0` and variance
/// `var_lambda`: `delta` (length J) and the intercept `delta1`.
pub fn linear_projection(spec: &LimitSpec, var_lambda: &DMatrix<f64>) -> Result<(DVector<f64>, f64)> {
    linear_projection_at(spec, var_lambda, &spec.omega0)
}

/// [`linear_projection`] with an explicit factor mean.
pub fn linear_projection_at(
    spec: &LimitSpec,
    var_lambda: &DMatrix<f64>,
    mean: &DVector<f64>,
) -> Result<(DVector<f64>, f64)> {
    let f = spec.factors();
    if var_lambda.shape() != (f, f) || mean.len() != f || spec.mu.ncols() != f {
        return Err(Error::Dimension {
            what: "factor moments",
            expected: f,
            got: var_lambda.nrows(),
        });
    }
    let j = spec.controls();
    let m = spec.noise_diag() + &spec.mu * var_lambda * spec.mu.transpose();
    let sv = m.singular_values();
    let (smax, smin) = (sv.max(), sv.min());
    if !(smin > 0.0) || smax / smin >= 1e12 {
        let rank = sv.iter().filter(|&&s| s > smax * 1e-12).count();
        return Err(Error::Singular {
            what: "projection matrix",
            rank,
            dim: j,
        });
    }
    let rhs = &spec.mu * (var_lambda * &spec.mu0);
    let delta = m
        .lu()
        .solve(&rhs)
        .ok_or(Error::Singular {
            what: "projection matrix",
            rank: j - 1,
            dim: j,
        })?;
    let delta1 = mean.dot(&(&spec.mu0 - spec.mu.transpose() * &delta));
    Ok((delta, delta1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms() {
        assert_eq!(gamma_two_groups(0.0, 20).unwrap(), 0.0);
        assert!((gamma_two_groups(1.0, 20).unwrap() - 1.0 / 22.0).abs() < 1e-15);
        assert!((gamma_many_groups(1.0, 20).unwrap() - 0.3).abs() < 1e-15);
        assert!(gamma_two_groups(1.0, 7).is_err());
        assert!(gamma_many_groups(1.0, 2).is_err());
    }

    #[test]
    fn group_limit_weights() {
        let spec = group_spec(1.0, 20, 10).unwrap();
        let res = limit_weights(&spec, ConstraintSet::SC).unwrap();
        assert!((res.weights[0] - 0.35).abs() < 1e-9);
        assert!((res.weights[5] - 1.0 / 60.0).abs() < 1e-9);
        assert!((res.asymptotic_bias - 0.3).abs() < 1e-9);
        assert!((res.asymptotic_variance.sqrt() - 1.162).abs() < 1e-3);
    }

    #[test]
    fn rejects_bad_moments() {
        let mut spec = group_spec(1.0, 4, 2).unwrap();
        spec.omega0[1] = 2.0;
        assert!(matches!(spec.validate(), Err(Error::NotPsd { .. })));
    }
}
