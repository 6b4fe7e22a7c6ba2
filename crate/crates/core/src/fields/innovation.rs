use nalgebra::{DMatrix, DVector};

use super::init::{member_perturbation, validate_spec};
use crate::ensemble::EnsembleMatrix;
use crate::error::{ensure_dims, Error, Result};
use crate::filters::{ObsErrorCov, PerturbationSet};
use crate::layout::StateLayout;
use crate::obs::ObservationOperator;

/// Uses the observed forecast anomalies as perturbations: `d_i = y + H X'_i`.
///
/// The recorded error covariance is the sample covariance of `H X'`.
pub fn innovation_strategy_anomaly(
    y: &DVector<f64>,
    e: &EnsembleMatrix,
    h: &ObservationOperator,
) -> Result<PerturbationSet> {
    ensure_dims("observation operator state dimension", e.n(), h.state_dim())?;
    ensure_dims("observation vector", h.obs_dim(), y.len())?;
    anomaly_perturbations(y, h.apply_matrix(e.anomalies())?)
}

/// Same as [`innovation_strategy_anomaly`] from the observed ensemble `H X` (`m x Ne`).
pub fn innovation_strategy_anomaly_observed(y: &DVector<f64>, hx: &DMatrix<f64>) -> Result<PerturbationSet> {
    ensure_dims("observation vector", hx.nrows(), y.len())?;
    let mean = crate::ensemble::row_mean(hx);
    anomaly_perturbations(y, crate::ensemble::centred(hx, &mean))
}

fn anomaly_perturbations(y: &DVector<f64>, hxp: DMatrix<f64>) -> Result<PerturbationSet> {
    let ne = hxp.ncols();
    if ne < 2 {
        return Err(Error::TooFewMembers {
            required: 2,
            actual: ne,
        });
    }
    let cov = &hxp * hxp.transpose() / (ne - 1) as f64;
    PerturbationSet::new(y, hxp, ObsErrorCov::Full(cov))
}

/// Perturbations from correlated random fields seen through `h`.
///
/// One unit-variance field per layout entry and member (decorrelation lengths
/// from `lengths`) is projected to observation space; each row is then
/// shifted to zero sample mean and scaled to sample stddev `obs_sigma[k]`.
/// `cycle` selects an independent draw per assimilation cycle.
#[allow(clippy::too_many_arguments)]
pub fn innovation_strategy_field(
    y: &DVector<f64>,
    obs_sigma: &DVector<f64>,
    h: &ObservationOperator,
    layout: &StateLayout,
    lengths: &[f64],
    members: usize,
    seed: u64,
    cycle: u64,
) -> Result<PerturbationSet> {
    if members < 2 {
        return Err(Error::TooFewMembers {
            required: 2,
            actual: members,
        });
    }
    ensure_dims("observation vector", h.obs_dim(), y.len())?;
    ensure_dims("observation sigmas", y.len(), obs_sigma.len())?;
    ensure_dims("observation operator state dimension", layout.len(), h.state_dim())?;
    if obs_sigma.iter().any(|&s| !(s >= 0.0 && s.is_finite())) {
        return Err(Error::invalid("obs_sigma", "must be finite and >= 0"));
    }
    let ones = vec![1.0; layout.entries().len()];
    validate_spec(layout, &ones, lengths)?;

    let m = y.len();
    let mut ups = DMatrix::zeros(m, members);
    for i in 0..members {
        let field = member_perturbation(layout, &ones, lengths, seed, "innovation", cycle, i)?;
        ups.set_column(i, &h.apply(&field)?);
    }
    for k in 0..m {
        let mut row = ups.row_mut(k);
        let mean = row.mean();
        row.add_scalar_mut(-mean);
        if obs_sigma[k] == 0.0 {
            row.fill(0.0);
            continue;
        }
        let sd = (row.norm_squared() / (members - 1) as f64).sqrt();
        if !(sd > 0.0) {
            return Err(Error::IllConditioned(format!(
                "perturbation row {k} has zero spread before rescaling"
            )));
        }
        row *= obs_sigma[k] / sd;
    }
    PerturbationSet::new(y, ups, ObsErrorCov::Diagonal(obs_sigma.map(|s| s * s)))
}
