//! Small dense helpers shared by the filters and field generator.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Unique symmetric positive semi-definite square root; negative round-off
/// eigenvalues are clamped to zero.
pub(crate) fn sym_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    sym_apply(a, |l| l.max(0.0).sqrt())
}

/// `V f(Lambda) V^T` for a symmetric matrix.
pub(crate) fn sym_apply(a: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let sym = (a + a.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mapped = DVector::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|&l| f(l)));
    let scaled = &eig.eigenvectors * DMatrix::from_diagonal(&mapped);
    let out = scaled * eig.eigenvectors.transpose();
    (&out + out.transpose()) * 0.5
}

/// Symmetric eigendecomposition with eigenvalues sorted descending.
pub(crate) fn sym_eigen_sorted(a: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let sym = (a + a.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let values = DVector::from_iterator(order.len(), order.iter().map(|&i| eig.eigenvalues[i]));
    let vectors = DMatrix::from_fn(a.nrows(), order.len(), |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

/// Moore-Penrose pseudo-inverse of a symmetric PSD matrix, dropping
/// eigenvalues below `rel_tol * lambda_max`.
pub(crate) fn sym_pinv(a: &DMatrix<f64>, rel_tol: f64) -> Result<DMatrix<f64>> {
    let (values, vectors) = sym_eigen_sorted(a);
    let lmax = values.iter().copied().fold(0.0, f64::max);
    if !(lmax > 0.0 && lmax.is_finite()) {
        return Err(Error::IllConditioned(format!(
            "largest eigenvalue {lmax} is not positive"
        )));
    }
    let cutoff = rel_tol * lmax;
    let inv = values.map(|l| if l > cutoff { 1.0 / l } else { 0.0 });
    Ok(&vectors * DMatrix::from_diagonal(&inv) * vectors.transpose())
}

pub(crate) fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}
