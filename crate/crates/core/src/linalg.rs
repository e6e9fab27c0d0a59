//! Small dense helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

pub(crate) fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

pub(crate) fn sym_eigen(a: &DMatrix<f64>) -> SymmetricEigen<f64, nalgebra::Dyn> {
    SymmetricEigen::new(symmetrize(a))
}

pub(crate) fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

pub(crate) fn max_abs_vec(a: &DVector<f64>) -> f64 {
    a.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

/// Orthonormal basis (as columns) of the null space of `rows`.
///
/// Singular values below `rel_tol * sigma_max` count as zero. A matrix with
/// no rows has the identity as its null-space basis.
pub(crate) fn null_space(rows: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let n = rows.ncols();
    if rows.nrows() == 0 || n == 0 {
        return DMatrix::identity(n, n);
    }
    let m = rows.nrows().max(n);
    let mut padded = DMatrix::zeros(m, n);
    padded.view_mut((0, 0), (rows.nrows(), n)).copy_from(rows);
    let svd = padded.svd(false, true);
    let v_t = svd.v_t.expect("v_t requested");
    let sigma_max = svd.singular_values.max();
    let cut = rel_tol * sigma_max;
    let keep: Vec<usize> = (0..n)
        .filter(|&i| sigma_max == 0.0 || svd.singular_values[i] <= cut)
        .collect();
    let mut basis = DMatrix::zeros(n, keep.len());
    for (c, &i) in keep.iter().enumerate() {
        basis.set_column(c, &v_t.row(i).transpose());
    }
    basis
}

/// Minimum-norm least-squares solution of `a x = b`.
pub(crate) fn lstsq(a: &DMatrix<f64>, b: &DVector<f64>, rel_tol: f64) -> DVector<f64> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return DVector::zeros(a.ncols());
    }
    let svd = a.clone().svd(true, true);
    let eps = rel_tol * svd.singular_values.max();
    svd.solve(b, eps.max(f64::MIN_POSITIVE))
        .expect("both factors computed")
}

/// Pairwise (cascade) summation; order-fixed so results do not depend on
/// how the inputs were produced.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const LEAF: usize = 8;
    if xs.len() <= LEAF {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Pairwise mean; NaN for an empty slice.
pub fn pairwise_mean(xs: &[f64]) -> f64 {
    pairwise_sum(xs) / xs.len() as f64
}

/// Sample standard deviation with the n-1 denominator (0 for n < 2).
pub fn sample_sd(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let mean = pairwise_mean(xs);
    let dev: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
    (pairwise_sum(&dev) / (xs.len() - 1) as f64).sqrt()
}
