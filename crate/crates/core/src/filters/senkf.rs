use nalgebra::{DMatrix, DVector};

use super::{observed_moments, AnalysisTransform, PerturbationSet};
use crate::ensemble::EnsembleMatrix;
use crate::error::{ensure_dims, Error, Result};
use crate::obs::ObservationOperator;

/// Singular values below this fraction of the largest are discarded.
pub const SVD_TRUNCATION: f64 = 1e-10;

/// Truncated SVD of `S_e = H X' + Upsilon`: retained `U` and `sigma^2`.
fn truncated_svd(se: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let svd = se.clone().svd(true, false);
    let u = svd.u.expect("requested U");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let smax = order
        .first()
        .map(|&i| svd.singular_values[i])
        .unwrap_or(0.0);
    if !(smax > 0.0 && smax.is_finite()) {
        return Err(Error::DegenerateObservationEnsemble);
    }
    let keep: Vec<usize> = order
        .into_iter()
        .filter(|&i| svd.singular_values[i] >= SVD_TRUNCATION * smax)
        .collect();
    let left = DMatrix::from_fn(u.nrows(), keep.len(), |r, c| u[(r, keep[c])]);
    let lambda = DVector::from_iterator(
        keep.len(),
        keep.iter().map(|&i| svd.singular_values[i].powi(2)),
    );
    Ok((left, lambda))
}

/// Builds `X5 = I + (H X')^T U Lambda^-1 U^T (D - H X^f)` from the observed
/// forecast ensemble `hx = H X^f` (`m x Ne`).
pub fn senkf_transform(hx: &DMatrix<f64>, perts: &PerturbationSet) -> Result<AnalysisTransform> {
    let (m, ne) = (hx.nrows(), hx.ncols());
    if m == 0 {
        return Err(Error::invalid("observations", "need at least one"));
    }
    if ne < 2 {
        return Err(Error::TooFewMembers {
            required: 2,
            actual: ne,
        });
    }
    ensure_dims("perturbation rows", m, perts.obs_dim())?;
    ensure_dims("perturbation members", ne, perts.members())?;
    let (_, hxp) = observed_moments(hx);
    let se = &hxp + perts.perturbations();
    let (u, lambda) = truncated_svd(&se)?;
    let innovation = perts.virtual_obs() - hx;
    // Ne x Ne product evaluated right to left so nothing larger than m x Ne appears.
    let lam_inv = DMatrix::from_diagonal(&lambda.map(|l| 1.0 / l));
    let projected = &lam_inv * (u.transpose() * &innovation);
    let weights = hxp.transpose() * (&u * projected);
    let transform = DMatrix::identity(ne, ne) + weights;
    if !crate::ensemble::all_finite(transform.iter()) {
        return Err(Error::NonFinite("stochastic transform"));
    }
    Ok(AnalysisTransform {
        gain: None,
        svd_left: Some(u),
        svd_values: Some(lambda),
        transform: Some(transform),
        innovation,
    })
}

/// Stochastic EnKF analysis without forming `P^f` or any `n x n` matrix.
pub fn senkf_analysis_matrixfree(
    e: &EnsembleMatrix,
    h: &ObservationOperator,
    perts: &PerturbationSet,
) -> Result<(EnsembleMatrix, AnalysisTransform)> {
    let hx = h.apply_matrix(e.data())?;
    let t = senkf_transform(&hx, perts)?;
    let xa = e.data() * t.transform.as_ref().expect("stochastic transform");
    let mut out = e.replaced(xa)?;
    out.advance_generation();
    Ok((out, t))
}

/// Matrix-free gain `K* = X' (H X')^T U Lambda^-1 U^T` (`n x m`), formed
/// explicitly for cross-checks against the direct gain.
pub fn senkf_gain_matrixfree(
    e: &EnsembleMatrix,
    h: &ObservationOperator,
    perts: &PerturbationSet,
) -> Result<DMatrix<f64>> {
    let hx = h.apply_matrix(e.data())?;
    let (_, hxp) = observed_moments(&hx);
    let se = &hxp + perts.perturbations();
    let (u, lambda) = truncated_svd(&se)?;
    let lam_inv = DMatrix::from_diagonal(&lambda.map(|l| 1.0 / l));
    Ok(e.anomalies() * hxp.transpose() * &u * lam_inv * u.transpose())
}
