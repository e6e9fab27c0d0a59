//! Convex quadratic weight problems under the SC family of constraint sets.
//!
//! The objective is the mean squared pre-fit error
//! `constant - 2 linear'w + w' gram w`, minimized over the weights allowed by
//! a [`ConstraintSet`]. A primal active-set method handles the bounds; ties
//! at singular Hessians are broken by a second pass that picks the
//! minimum-norm point of the optimal face.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{lstsq, max_abs, max_abs_vec, null_space, sym_eigen};
use crate::panel::Panel;

/// Default tolerance on the (scaled) KKT residual.
pub const DEFAULT_TOL: f64 = 1e-10;
const PSD_SLACK: f64 = 1e-8;
const RANK_TOL: f64 = 1e-9;
const NULL_TOL: f64 = 1e-10;

/// Which weight restrictions are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConstraintSet {
    pub nonneg: bool,
    pub sum_to_one: bool,
    pub intercept: bool,
}

impl ConstraintSet {
    /// Non-negative weights summing to one, no intercept.
    pub const SC: ConstraintSet = ConstraintSet {
        nonneg: true,
        sum_to_one: true,
        intercept: false,
    };
    /// Simplex weights plus an intercept.
    pub const DEMEANED: ConstraintSet = ConstraintSet {
        nonneg: true,
        sum_to_one: true,
        intercept: true,
    };
    /// Unrestricted weights with an intercept.
    pub const UNRESTRICTED: ConstraintSet = ConstraintSet {
        nonneg: false,
        sum_to_one: false,
        intercept: true,
    };
}

/// Pre-period means used to profile out an intercept.
#[derive(Debug, Clone, PartialEq)]
pub struct Centering {
    pub treated: f64,
    pub controls: DVector<f64>,
}

/// A weight problem: minimize `constant - 2 linear'w + w' gram w`.
#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub gram: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub constant: f64,
    pub constraints: ConstraintSet,
    /// Required when `constraints.intercept` is set.
    pub centering: Option<Centering>,
    /// Additional equality rows `A w = b` on top of the constraint set.
    pub equalities: Option<(DMatrix<f64>, DVector<f64>)>,
}

impl QpProblem {
    pub fn new(
        gram: DMatrix<f64>,
        linear: DVector<f64>,
        constant: f64,
        constraints: ConstraintSet,
    ) -> Self {
        QpProblem {
            gram,
            linear,
            constant,
            constraints,
            centering: None,
            equalities: None,
        }
    }

    pub fn with_centering(mut self, centering: Centering) -> Self {
        self.centering = Some(centering);
        self
    }

    pub fn with_equalities(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.equalities = Some((a, b));
        self
    }

    pub fn dim(&self) -> usize {
        self.linear.len()
    }

    /// Objective at `w`, with the intercept profiled out when enabled.
    pub fn objective(&self, w: &DVector<f64>) -> f64 {
        let (g, c, k) = self.effective();
        k - 2.0 * c.dot(w) + w.dot(&(&g * w))
    }

    /// Intercept implied by `w` (0 when disabled).
    pub fn intercept(&self, w: &DVector<f64>) -> f64 {
        match (&self.centering, self.constraints.intercept) {
            (Some(cen), true) => cen.treated - cen.controls.dot(w),
            _ => 0.0,
        }
    }

    fn effective(&self) -> (DMatrix<f64>, DVector<f64>, f64) {
        match (&self.centering, self.constraints.intercept) {
            (Some(cen), true) => {
                let m = &cen.controls;
                (
                    &self.gram - m * m.transpose(),
                    &self.linear - m * cen.treated,
                    self.constant - cen.treated * cen.treated,
                )
            }
            _ => (self.gram.clone(), self.linear.clone(), self.constant),
        }
    }

    fn validate(&self) -> Result<()> {
        let n = self.dim();
        if n == 0 {
            return Err(Error::InvalidArgument("weight problem with no controls".into()));
        }
        if self.gram.shape() != (n, n) {
            return Err(Error::Dimension {
                what: "gram matrix",
                expected: n,
                got: self.gram.nrows(),
            });
        }
        if self.constraints.intercept {
            match &self.centering {
                None => {
                    return Err(Error::InvalidArgument(
                        "intercept requested without pre-period means".into(),
                    ))
                }
                Some(c) if c.controls.len() != n => {
                    return Err(Error::Dimension {
                        what: "centering means",
                        expected: n,
                        got: c.controls.len(),
                    })
                }
                _ => {}
            }
        }
        if let Some((a, b)) = &self.equalities {
            if a.ncols() != n || a.nrows() != b.len() {
                return Err(Error::Dimension {
                    what: "equality rows",
                    expected: n,
                    got: a.ncols(),
                });
            }
        }
        let values = self
            .gram
            .iter()
            .chain(self.linear.iter())
            .chain(std::iter::once(&self.constant));
        if values.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite problem data".into()));
        }
        let scale = max_abs(&self.gram).max(1.0);
        if max_abs(&(&self.gram - self.gram.transpose())) > PSD_SLACK * scale {
            return Err(Error::InvalidArgument("gram matrix is not symmetric".into()));
        }
        let min_eig = sym_eigen(&self.gram).eigenvalues.min();
        if min_eig < -PSD_SLACK * scale {
            return Err(Error::NotPsd {
                min_eigenvalue: min_eig,
            });
        }
        Ok(())
    }
}

/// Solution of a [`QpProblem`].
#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub weights: DVector<f64>,
    pub intercept: f64,
    pub objective: f64,
    /// Scaled KKT residual (NaN for lattice search results).
    pub kkt_residual: f64,
    pub iterations: usize,
    /// Numerical rank of the (centered) gram matrix.
    pub rank: usize,
    /// The optimal set has more than one point; `weights` is its min-norm element.
    pub nonunique: bool,
}

/// Scaled problem `min 0.5 w'Hw - q'w` with `E w = e` and optional `w >= 0`.
struct Core<'a> {
    h: &'a DMatrix<f64>,
    q: &'a DVector<f64>,
    eq: &'a DMatrix<f64>,
    eq_rhs: &'a DVector<f64>,
    nonneg: bool,
    tol: f64,
}

struct CoreOutcome {
    w: DVector<f64>,
    bound: Vec<bool>,
    pivots: usize,
}

impl Core<'_> {
    fn n(&self) -> usize {
        self.q.len()
    }

    fn grad(&self, w: &DVector<f64>) -> DVector<f64> {
        self.h * w - self.q
    }

    /// KKT residual at `w` with `bound` marking coordinates held at zero.
    fn kkt(&self, w: &DVector<f64>, bound: &[bool]) -> f64 {
        let g = self.grad(w);
        let free: Vec<usize> = (0..self.n()).filter(|&i| !bound[i]).collect();
        let e_f = self.eq.select_columns(&free);
        let g_f = DVector::from_iterator(free.len(), free.iter().map(|&i| g[i]));
        let nu = lstsq(&e_f.transpose(), &g_f, 1e-12);
        let resid = &g - self.eq.transpose() * &nu;
        let mut worst = 0.0_f64;
        for i in 0..self.n() {
            if bound[i] {
                worst = worst.max(-resid[i]);
            } else {
                worst = worst.max(resid[i].abs());
            }
        }
        let infeas = if self.eq.nrows() > 0 {
            max_abs_vec(&(self.eq * w - self.eq_rhs))
        } else {
            0.0
        };
        let neg = if self.nonneg {
            w.iter().fold(0.0_f64, |m, &v| m.max(-v))
        } else {
            0.0
        };
        worst.max(infeas).max(neg)
    }

    fn solve(&self, mut w: DVector<f64>, mut bound: Vec<bool>) -> Result<CoreOutcome> {
        let n = self.n();
        if !self.nonneg {
            bound = vec![false; n];
        }
        // Keep the working set linearly independent so multipliers are unique.
        let candidates = std::mem::replace(&mut bound, vec![false; n]);
        let mut z = null_space(self.eq, NULL_TOL);
        for i in (0..n).filter(|&i| candidates[i]) {
            w[i] = 0.0;
            if z.ncols() > 0 && z.row(i).amax() > 1e-8 {
                bound[i] = true;
                z = working_null_space(self.eq, &bound);
            }
        }
        let max_pivots = 10 * n * n + 10;
        let mut pivots = 0usize;
        let mut stationary = false;
        loop {
            if pivots >= max_pivots {
                return self.fallback(w, pivots);
            }
            let g = self.grad(&w);
            let free: Vec<usize> = (0..n).filter(|&i| !bound[i]).collect();
            let e_f = self.eq.select_columns(&free);
            if !stationary && !free.is_empty() {
                let z = null_space(&e_f, NULL_TOL);
                if z.ncols() > 0 {
                    let g_f = DVector::from_iterator(free.len(), free.iter().map(|&i| g[i]));
                    let r = -(z.transpose() * &g_f);
                    if max_abs_vec(&r) > self.tol {
                        let h_ff = self.h.select_rows(&free).select_columns(&free);
                        let m = z.transpose() * &h_ff * &z;
                        let (v, ray) = reduced_step(&m, &r, self.tol);
                        let d = &z * v;
                        let mut alpha = if ray { f64::INFINITY } else { 1.0 };
                        let mut blocking = None;
                        let eps = 1e-13 * d.amax();
                        if self.nonneg {
                            for (k, &i) in free.iter().enumerate() {
                                if d[k] < -eps {
                                    let a = (w[i] / -d[k]).max(0.0);
                                    if a < alpha {
                                        alpha = a;
                                        blocking = Some(i);
                                    }
                                }
                            }
                        }
                        if !alpha.is_finite() {
                            return Err(Error::Solver(
                                "objective is unbounded below on the feasible set".into(),
                            ));
                        }
                        for (k, &i) in free.iter().enumerate() {
                            w[i] += alpha * d[k];
                        }
                        pivots += 1;
                        match blocking {
                            Some(i) => {
                                bound[i] = true;
                                w[i] = 0.0;
                            }
                            // a full Newton step lands on the face minimum
                            None => stationary = !ray,
                        }
                        continue;
                    }
                }
            }
            stationary = false;
            if !self.nonneg {
                break;
            }
            // multipliers of the bound constraints
            let g_f = DVector::from_iterator(free.len(), free.iter().map(|&i| g[i]));
            let nu = lstsq(&e_f.transpose(), &g_f, 1e-12);
            let resid = &g - self.eq.transpose() * &nu;
            let release = (0..n)
                .filter(|&i| bound[i] && resid[i] < -self.tol)
                .min_by(|&a, &b| resid[a].total_cmp(&resid[b]));
            match release {
                Some(i) => {
                    bound[i] = false;
                    pivots += 1;
                }
                None => break,
            }
        }
        Ok(CoreOutcome { w, bound, pivots })
    }

    /// Projected gradient for the simplex and the orthant, used only if the
    /// active-set loop exceeds its pivot budget.
    fn fallback(&self, w: DVector<f64>, pivots: usize) -> Result<CoreOutcome> {
        let is_simplex = self.eq.nrows() == 1
            && self.eq.row(0).iter().all(|&v| v == 1.0)
            && self.eq_rhs[0] == 1.0;
        let project: Box<dyn Fn(&DVector<f64>) -> DVector<f64>> =
            match (self.nonneg, self.eq.nrows()) {
                (true, 0) => Box::new(|v: &DVector<f64>| v.map(|x| x.max(0.0))),
                (true, _) if is_simplex => Box::new(project_simplex),
                _ => {
                    return Err(Error::Solver(format!(
                        "active set did not terminate after {pivots} pivots"
                    )))
                }
            };
        let lip = sym_eigen(self.h).eigenvalues.max().max(1e-300);
        let mut w = project(&w);
        for _ in 0..200_000 {
            let next = project(&(&w - self.grad(&w) / lip));
            let moved = max_abs_vec(&(&next - &w));
            w = next;
            if moved < 1e-15 * (1.0 + max_abs_vec(&w)) {
                break;
            }
        }
        let bound = w.iter().map(|&v| self.nonneg && v <= 0.0).collect();
        Ok(CoreOutcome {
            w,
            bound,
            pivots: pivots + 1,
        })
    }
}

/// Null space of the equality rows together with the bound rows in `bound`.
fn working_null_space(eq: &DMatrix<f64>, bound: &[bool]) -> DMatrix<f64> {
    let free: Vec<usize> = (0..bound.len()).filter(|&i| !bound[i]).collect();
    let z_f = null_space(&eq.select_columns(&free), NULL_TOL);
    let mut z = DMatrix::zeros(bound.len(), z_f.ncols());
    for (k, &i) in free.iter().enumerate() {
        z.set_row(i, &z_f.row(k));
    }
    z
}

/// Drop linearly dependent rows of a consistent system `a w = b`.
fn independent_rows(a: DMatrix<f64>, b: DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
    if a.nrows() == 0 {
        return (a, b);
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] > NULL_TOL * smax)
        .collect();
    if keep.len() == a.nrows() {
        return (a, b);
    }
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let rows = DMatrix::from_fn(keep.len(), a.ncols(), |r, c| {
        svd.singular_values[keep[r]] * v_t[(keep[r], c)]
    });
    let rhs = DVector::from_iterator(keep.len(), keep.iter().map(|&k| u.column(k).dot(&b)));
    (rows, rhs)
}

/// Step on the reduced problem `min 0.5 v'Mv - r'v`: Newton step when `r`
/// lies in the range of `M`, otherwise a descent ray of zero curvature.
fn reduced_step(m: &DMatrix<f64>, r: &DVector<f64>, tol: f64) -> (DVector<f64>, bool) {
    let eig = sym_eigen(m);
    let lmax = eig.eigenvalues.amax();
    let cut = RANK_TOL * lmax.max(1e-300);
    let k = r.len();
    let mut newton = DVector::zeros(k);
    let mut ray = DVector::zeros(k);
    for (i, &lam) in eig.eigenvalues.iter().enumerate() {
        let u = eig.eigenvectors.column(i);
        let coef = u.dot(r);
        if lam > cut {
            newton += u * (coef / lam);
        } else {
            ray += u * coef;
        }
    }
    if max_abs_vec(&ray) > tol {
        (ray, true)
    } else {
        (newton, false)
    }
}

/// Euclidean projection onto the probability simplex.
pub(crate) fn project_simplex(v: &DVector<f64>) -> DVector<f64> {
    let mut u: Vec<f64> = v.iter().copied().collect();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (i, &x) in u.iter().enumerate() {
        cum += x;
        let t = (cum - 1.0) / (i + 1) as f64;
        if x - t > 0.0 {
            theta = t;
        }
    }
    v.map(|x| (x - theta).max(0.0))
}

/// Solve a weight problem to KKT tolerance `tol`.
pub fn solve_qp(problem: &QpProblem, tol: f64) -> Result<QpSolution> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance must be positive, got {tol}")));
    }
    problem.validate()?;
    let n = problem.dim();
    let (g, c, _) = problem.effective();
    let scale = max_abs(&g).max(max_abs_vec(&c)).max(f64::MIN_POSITIVE);
    let h = &g / scale;
    let q = &c / scale;

    let (eq, eq_rhs) = equality_rows(problem);
    let nonneg = problem.constraints.nonneg;
    let (w0, bound0) = feasible_start(&eq, &eq_rhs, nonneg, n, tol)?;
    let (eq, eq_rhs) = independent_rows(eq, eq_rhs);

    let core = Core {
        h: &h,
        q: &q,
        eq: &eq,
        eq_rhs: &eq_rhs,
        nonneg,
        tol,
    };
    let first = core.solve(w0, bound0)?;
    let mut pivots = first.pivots;

    // Optimal face: same H w and same null-space component of q.
    let eig = sym_eigen(&h);
    let lmax = eig.eigenvalues.amax();
    let cut = RANK_TOL * lmax.max(f64::MIN_POSITIVE);
    let range: Vec<usize> = (0..n).filter(|&i| eig.eigenvalues[i] > cut).collect();
    let rank = range.len();
    let mut w = first.w.clone();
    let mut bound = first.bound.clone();
    let mut nonunique = false;
    if rank < n {
        let u_r = eig.eigenvectors.select_columns(&range);
        let q_null = &q - &u_r * (u_r.transpose() * &q);
        let mut rows: Vec<DVector<f64>> = (0..eq.nrows()).map(|i| eq.row(i).transpose()).collect();
        rows.extend((0..rank).map(|i| u_r.column(i).into_owned()));
        let qn = q_null.norm();
        if qn > 1e-12 * q.norm().max(f64::MIN_POSITIVE) && qn > 0.0 {
            rows.push(q_null / qn);
        }
        let face = DMatrix::from_fn(rows.len(), n, |r, col| rows[r][col]);
        let face_rhs = &face * &first.w;
        let (face, face_rhs) = independent_rows(face, face_rhs);
        let identity = DMatrix::identity(n, n);
        let zero = DVector::zeros(n);
        let tie = Core {
            h: &identity,
            q: &zero,
            eq: &face,
            eq_rhs: &face_rhs,
            nonneg,
            tol,
        };
        let second = tie.solve(first.w.clone(), first.bound.clone())?;
        pivots += second.pivots;
        let moved = max_abs_vec(&(&second.w - &first.w));
        let free: Vec<usize> = (0..n)
            .filter(|&i| !(first.bound[i] && second.bound[i]))
            .collect();
        let dim = null_space(&face.select_columns(&free), NULL_TOL).ncols();
        nonunique = moved > 1e-8 || (!free.is_empty() && dim > 0);
        w = second.w;
        bound = second.bound;
    }

    if nonneg {
        w.iter_mut().for_each(|v| {
            if *v < 0.0 {
                *v = 0.0
            }
        });
    }
    let kkt_residual = core.kkt(&w, &bound);
    let objective = problem.objective(&w);
    let intercept = problem.intercept(&w);
    Ok(QpSolution {
        weights: w,
        intercept,
        objective,
        kkt_residual,
        iterations: pivots,
        rank,
        nonunique,
    })
}

fn equality_rows(problem: &QpProblem) -> (DMatrix<f64>, DVector<f64>) {
    let n = problem.dim();
    let mut rows: Vec<(Vec<f64>, f64)> = Vec::new();
    if problem.constraints.sum_to_one {
        rows.push((vec![1.0; n], 1.0));
    }
    if let Some((a, b)) = &problem.equalities {
        for i in 0..a.nrows() {
            rows.push((a.row(i).iter().copied().collect(), b[i]));
        }
    }
    let mat = DMatrix::from_fn(rows.len(), n, |r, c| rows[r].0[c]);
    let rhs = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.1));
    (mat, rhs)
}

/// A feasible starting point and its initial bound set.
fn feasible_start(
    eq: &DMatrix<f64>,
    rhs: &DVector<f64>,
    nonneg: bool,
    n: usize,
    tol: f64,
) -> Result<(DVector<f64>, Vec<bool>)> {
    if eq.nrows() == 0 {
        return Ok((DVector::zeros(n), vec![nonneg; n]));
    }
    let only_simplex = eq.nrows() == 1 && eq.row(0).iter().all(|&v| v == 1.0) && rhs[0] == 1.0;
    if only_simplex {
        return Ok((DVector::from_element(n, 1.0 / n as f64), vec![false; n]));
    }
    let scale = max_abs(eq).max(max_abs_vec(rhs)).max(1.0);
    let w = if nonneg {
        // non-negative least squares on the constraint residual
        let h = eq.transpose() * eq;
        let q = eq.transpose() * rhs;
        let empty = DMatrix::zeros(0, n);
        let empty_rhs = DVector::zeros(0);
        let phase0 = Core {
            h: &h,
            q: &q,
            eq: &empty,
            eq_rhs: &empty_rhs,
            nonneg: true,
            tol: tol * 1e-2,
        };
        phase0.solve(DVector::zeros(n), vec![true; n])?.w
    } else {
        lstsq(eq, rhs, 1e-12)
    };
    let resid = max_abs_vec(&(eq * &w - rhs));
    if resid > 1e-9 * scale {
        return Err(Error::Infeasible(format!(
            "equality constraints cannot be met (residual {resid:e})"
        )));
    }
    let bound = w.iter().map(|&v| nonneg && v <= 0.0).collect();
    Ok((w, bound))
}

/// Exhaustive search over the lattice `{w : w_j = k_j * step, sum w = 1}`.
pub fn brute_force_simplex(problem: &QpProblem, step: f64) -> Result<QpSolution> {
    let n = problem.dim();
    if n > 4 {
        return Err(Error::InvalidArgument(format!(
            "lattice search supports at most 4 controls, got {n}"
        )));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("weight problem with no controls".into()));
    }
    if problem.constraints.intercept && problem.centering.is_none() {
        return Err(Error::InvalidArgument(
            "intercept requested without pre-period means".into(),
        ));
    }
    let cells = (1.0 / step).round();
    if !(step > 0.0) || (cells * step - 1.0).abs() > 1e-9 || cells < 1.0 {
        return Err(Error::InvalidArgument(format!("step {step} does not divide 1")));
    }
    let cells = cells as usize;
    let mut best: Option<(f64, DVector<f64>)> = None;
    let mut counts = vec![0usize; n];
    let mut visit = |counts: &[usize]| {
        let w = DVector::from_iterator(n, counts.iter().map(|&k| k as f64 / cells as f64));
        let f = problem.objective(&w);
        if best.as_ref().is_none_or(|(b, _)| f < *b) {
            best = Some((f, w));
        }
    };
    enumerate_compositions(cells, 0, &mut counts, &mut visit);
    let (objective, weights) = best.expect("lattice is non-empty");
    Ok(QpSolution {
        intercept: problem.intercept(&weights),
        weights,
        objective,
        kkt_residual: f64::NAN,
        iterations: 0,
        rank: 0,
        nonunique: false,
    })
}

fn enumerate_compositions(
    remaining: usize,
    pos: usize,
    counts: &mut [usize],
    visit: &mut dyn FnMut(&[usize]),
) {
    if pos + 1 == counts.len() {
        counts[pos] = remaining;
        visit(counts);
        return;
    }
    for k in 0..=remaining {
        counts[pos] = k;
        enumerate_compositions(remaining - k, pos + 1, counts, visit);
    }
}

/// Build the weight problem for `panel` from its pre-treatment periods.
pub fn weight_problem(panel: &Panel, constraints: ConstraintSet) -> Result<QpProblem> {
    let t0 = panel.t0();
    if t0 < 2 {
        return Err(Error::InvalidArgument(format!(
            "weight fitting needs at least 2 pre-periods, got {t0}"
        )));
    }
    let y = panel.controls_pre();
    let y0 = panel.treated_pre();
    let tf = t0 as f64;
    let gram = (&y * y.transpose()) / tf;
    let linear = (&y * &y0) / tf;
    let constant = y0.dot(&y0) / tf;
    let means = panel.pre_means();
    let centering = Centering {
        treated: means[0],
        controls: means.rows(1, panel.controls()).into_owned(),
    };
    Ok(QpProblem::new(gram, linear, constant, constraints).with_centering(centering))
}

/// Fit weights on the pre-treatment periods of `panel`.
pub fn fit_weights(panel: &Panel, constraints: ConstraintSet) -> Result<QpSolution> {
    solve_qp(&weight_problem(panel, constraints)?, DEFAULT_TOL)
}
