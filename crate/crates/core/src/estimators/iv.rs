//! Two-step GMM weights using lagged control outcomes as instruments.
//!
//! The adding-up constraint is imposed by substitution against the last
//! control, so the moments are linear in the remaining J-1 weights:
//! `g(v) = a - B v` with `a = mean(z_t ydot_0t)` and `B = mean(z_t ydot_t')`,
//! where `z_t = y_{t-1}` and `ydot` are outcomes net of the last control.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::sym_eigen;
use crate::panel::Panel;
use crate::qp::QpSolution;

const RIDGE: f64 = 1e-8;
const FLAT_RATIO: f64 = 1.01;
const FLAT_DIAMETER: f64 = 0.1;

/// Result of the IV fit.
#[derive(Debug, Clone, PartialEq)]
pub struct IvFit {
    /// Weights, with `objective` holding the step-2 criterion.
    pub solution: QpSolution,
    /// `n` times the step-2 criterion at the estimate.
    pub j_statistic: f64,
    /// The near-optimal set (criterion within 1% of its minimum) is wider
    /// than 0.1 in weight space.
    pub flat_criterion: bool,
    /// Directions of the weight space the moments do not pin down.
    pub unidentified_directions: usize,
}

struct Moments {
    a: DVector<f64>,
    b: DMatrix<f64>,
    z: DMatrix<f64>,
    ydot0: DVector<f64>,
    ydot: DMatrix<f64>,
    n: usize,
}

fn moments(panel: &Panel) -> Moments {
    let j = panel.controls();
    let t0 = panel.t0();
    let y = panel.outcomes();
    let n = t0 - 1;
    // rows indexed by t = 1..t0-1
    let z = DMatrix::from_fn(j, n, |c, s| y[(c + 1, s)]);
    let ydot0 = DVector::from_fn(n, |s, _| y[(0, s + 1)] - y[(j, s + 1)]);
    let ydot = DMatrix::from_fn(j - 1, n, |c, s| y[(c + 1, s + 1)] - y[(j, s + 1)]);
    let nf = n as f64;
    Moments {
        a: &z * &ydot0 / nf,
        b: &z * ydot.transpose() / nf,
        z,
        ydot0,
        ydot,
        n,
    }
}

/// `M v + e_J`: full weights from the J-1 free ones.
fn expand(v: &DVector<f64>) -> DVector<f64> {
    let mut w = DVector::zeros(v.len() + 1);
    w.rows_mut(0, v.len()).copy_from(v);
    w[v.len()] = 1.0 - v.sum();
    w
}

fn criterion_at(m: &Moments, weight: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    let g = &m.a - &m.b * v;
    g.dot(&(weight * &g))
}

/// Identity-weighted criterion `g(w)'g(w)` at full weights `w` (which must
/// sum to one).
pub fn iv_criterion(panel: &Panel, w: &DVector<f64>) -> Result<f64> {
    check(panel)?;
    if w.len() != panel.controls() {
        return Err(Error::Dimension {
            what: "weights",
            expected: panel.controls(),
            got: w.len(),
        });
    }
    let m = moments(panel);
    let v = w.rows(0, w.len() - 1).into_owned();
    let eye = DMatrix::identity(m.a.len(), m.a.len());
    Ok(criterion_at(&m, &eye, &v))
}

fn check(panel: &Panel) -> Result<()> {
    let j = panel.controls();
    if j < 2 {
        return Err(Error::InvalidArgument("IV weights need at least two controls".into()));
    }
    if panel.t0() < j + 2 {
        return Err(Error::InvalidArgument(format!(
            "IV weights need t0 >= J + 2 = {}, got {}",
            j + 2,
            panel.t0()
        )));
    }
    Ok(())
}

struct Step {
    v: DVector<f64>,
    a_mat: DMatrix<f64>,
    unidentified: Vec<DVector<f64>>,
}

/// Minimize `(a - Bv)'W(a - Bv)`; directions where `B'WB` is negligible
/// relative to sampling noise are resolved by minimum weight norm.
fn gmm_step(m: &Moments, weight: &DMatrix<f64>) -> Step {
    let k = m.b.ncols();
    let a_mat = crate::linalg::symmetrize(&(m.b.transpose() * weight * &m.b));
    let rhs = m.b.transpose() * weight * &m.a;
    let eig = sym_eigen(&a_mat);
    let lmax = eig.eigenvalues.max().max(0.0);
    let cut = lmax / (m.n as f64).sqrt();
    let mut v = DVector::zeros(k);
    let mut unidentified = Vec::new();
    for (i, &lam) in eig.eigenvalues.iter().enumerate() {
        let u = eig.eigenvectors.column(i).into_owned();
        if lam > cut && lam > 0.0 {
            v += &u * (u.dot(&rhs) / lam);
        } else {
            unidentified.push(u);
        }
    }
    if !unidentified.is_empty() {
        // choose the free part to minimize |expand(v + N s)|
        let nmat = DMatrix::from_columns(&unidentified);
        let base = expand(&v);
        let mut dirs = DMatrix::zeros(k + 1, nmat.ncols());
        for c in 0..nmat.ncols() {
            let col = nmat.column(c);
            dirs.view_mut((0, c), (k, 1)).copy_from(&col);
            dirs[(k, c)] = -col.sum();
        }
        let s = crate::linalg::lstsq(&dirs, &(-base), 1e-12);
        v += nmat * s;
    }
    Step {
        v,
        a_mat,
        unidentified,
    }
}

/// Two-step GMM weights under the adding-up constraint.
pub fn iv_sc_weights(panel: &Panel) -> Result<IvFit> {
    check(panel)?;
    let m = moments(panel);
    let j = panel.controls();
    let eye = DMatrix::identity(j, j);
    let first = gmm_step(&m, &eye);

    let u = &m.ydot0 - m.ydot.transpose() * &first.v;
    let mut s = DMatrix::zeros(j, j);
    for t in 0..m.n {
        let zt = m.z.column(t);
        s += zt * zt.transpose() * (u[t] * u[t]);
    }
    s /= m.n as f64;
    s += DMatrix::identity(j, j) * RIDGE;
    let weight = s
        .cholesky()
        .map(|c| c.inverse())
        .ok_or(Error::Singular {
            what: "moment covariance",
            rank: 0,
            dim: j,
        })?;
    if weight.iter().any(|x| !x.is_finite()) {
        return Err(Error::Singular {
            what: "moment covariance",
            rank: 0,
            dim: j,
        });
    }
    let second = gmm_step(&m, &weight);
    let q = criterion_at(&m, &weight, &second.v);

    let flat = if !second.unidentified.is_empty() {
        true
    } else {
        // {v : Q(v) <= 1.01 Qmin} is the ellipsoid d'Ad <= 0.01 Qmin around v.
        // Its diameter in weight space is 2 sqrt(c * lambda_max(A^-1 M'M)).
        let c = (FLAT_RATIO - 1.0) * q.max(0.0);
        let k = j - 1;
        let mut mm = DMatrix::identity(k, k);
        mm.add_scalar_mut(1.0);
        match second.a_mat.clone().cholesky() {
            Some(ch) => {
                let l_inv = ch.l().try_inverse().unwrap_or_else(|| DMatrix::zeros(k, k));
                let g = &l_inv * mm * l_inv.transpose();
                let top = sym_eigen(&g).eigenvalues.max();
                2.0 * (c * top).sqrt() > FLAT_DIAMETER
            }
            None => true,
        }
    };
    let w = expand(&second.v);
    Ok(IvFit {
        solution: QpSolution {
            weights: w,
            intercept: 0.0,
            objective: q,
            kkt_residual: 0.0,
            iterations: 2,
            rank: j - 1 - second.unidentified.len(),
            nonunique: !second.unidentified.is_empty(),
        },
        j_statistic: m.n as f64 * q,
        flat_criterion: flat,
        unidentified_directions: second.unidentified.len(),
    })
}
