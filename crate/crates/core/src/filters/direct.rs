use nalgebra::{Cholesky, DMatrix};

use super::PerturbationSet;
use crate::ensemble::EnsembleMatrix;
use crate::error::{ensure_dims, Error, Result};
use crate::linalg::{sym_eigen_sorted, sym_pinv};
use crate::obs::ObservationOperator;

/// Relative eigenvalue cutoff of the pseudo-inverse used when `R_e` is singular.
const PINV_CUTOFF: f64 = 1e-12;

/// Textbook gain `K = P H^T (H P H^T + R)^-1` with `P = X' X'^T / (Ne - 1)`.
///
/// Forms the full `n x n` covariance and is meant as a reference only.
/// Fails with [`Error::IllConditioned`] when `H P H^T + R` is not positive
/// definite.
pub fn kalman_gain_direct(
    anomalies: &DMatrix<f64>,
    h: &ObservationOperator,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let (pht, c) = gain_terms(anomalies, h, r)?;
    let chol = Cholesky::new(c.clone())
        .ok_or_else(|| Error::IllConditioned("H P H^T + R is not positive definite".into()))?;
    Ok(chol.solve(&pht.transpose()).transpose())
}

fn gain_terms(
    anomalies: &DMatrix<f64>,
    h: &ObservationOperator,
    r: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    ensure_dims("anomaly rows", h.state_dim(), anomalies.nrows())?;
    ensure_dims("R rows", h.obs_dim(), r.nrows())?;
    ensure_dims("R columns", h.obs_dim(), r.ncols())?;
    let ne = anomalies.ncols();
    if ne < 2 {
        return Err(Error::TooFewMembers {
            required: 2,
            actual: ne,
        });
    }
    let p = anomalies * anomalies.transpose() / (ne - 1) as f64;
    let hd = h.to_dense();
    let pht = &p * hd.transpose();
    let c = &hd * &pht + r;
    Ok((pht, (&c + c.transpose()) * 0.5))
}

/// Direct gain with `R_e` estimated from the perturbations. A rank-deficient
/// `H P H^T + R_e` (typical when `m >= Ne`) is inverted with a truncated
/// pseudo-inverse instead of Cholesky.
fn ensemble_gain(e: &EnsembleMatrix, h: &ObservationOperator, perts: &PerturbationSet) -> Result<DMatrix<f64>> {
    let re = perts.sample_covariance();
    let (pht, c) = gain_terms(e.anomalies(), h, &re)?;
    let (values, _) = sym_eigen_sorted(&c);
    let lmax = values[0];
    let lmin = values[values.len() - 1];
    if lmax > 0.0 && lmin > PINV_CUTOFF * lmax {
        if let Some(chol) = Cholesky::new(c.clone()) {
            return Ok(chol.solve(&pht.transpose()).transpose());
        }
    }
    Ok(&pht * sym_pinv(&c, PINV_CUTOFF)?)
}

fn update_members(
    e: &EnsembleMatrix,
    h: &ObservationOperator,
    perts: &PerturbationSet,
    gain: &DMatrix<f64>,
) -> Result<EnsembleMatrix> {
    let hx = h.apply_matrix(e.data())?;
    let innovation = perts.virtual_obs() - hx;
    let mut out = e.replaced(e.data() + gain * innovation)?;
    out.advance_generation();
    Ok(out)
}

fn check(e: &EnsembleMatrix, h: &ObservationOperator, perts: &PerturbationSet) -> Result<()> {
    ensure_dims("observation operator state dimension", e.n(), h.state_dim())?;
    ensure_dims("perturbation rows", h.obs_dim(), perts.obs_dim())?;
    ensure_dims("perturbation members", e.members(), perts.members())
}

/// Member-by-member stochastic update `X_i + K (D_i - H X_i)` through the
/// explicit covariance. Reference implementation for the matrix-free route.
pub fn senkf_analysis_direct(
    e: &EnsembleMatrix,
    h: &ObservationOperator,
    perts: &PerturbationSet,
) -> Result<EnsembleMatrix> {
    check(e, h, perts)?;
    let gain = ensemble_gain(e, h, perts)?;
    update_members(e, h, perts, &gain)
}

/// Direct stochastic update with the gain tapered elementwise by `taper` (`n x m`).
pub fn senkf_analysis_direct_localized(
    e: &EnsembleMatrix,
    h: &ObservationOperator,
    perts: &PerturbationSet,
    taper: &DMatrix<f64>,
) -> Result<EnsembleMatrix> {
    check(e, h, perts)?;
    ensure_dims("taper rows", e.n(), taper.nrows())?;
    ensure_dims("taper columns", h.obs_dim(), taper.ncols())?;
    let gain = ensemble_gain(e, h, perts)?.component_mul(taper);
    update_members(e, h, perts, &gain)
}
