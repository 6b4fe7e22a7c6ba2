//! Analysis steps.
//!
//! Every filter here can be written as a right-multiplication of the forecast
//! ensemble, `X^a = X^f T`, with an `Ne x Ne` transform `T` that depends only
//! on the observed ensemble `H X^f`, the observations and their errors. The
//! orchestrator relies on that: it only ever needs the `m x Ne` products to
//! build `T`, and applies it to member columns or row blocks independently.
//!
//! Conventions: anomalies are unnormalized (`X' = X - mean`) in the stochastic
//! filter, where the `1/(Ne-1)` factors of `P^f` and `R_e` cancel, and the
//! deterministic filters use the normalized `Y = H X' / sqrt(Ne - 1)`.

mod deterministic;
mod direct;
mod senkf;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dims, Error, Result};

pub use deterministic::{
    denkf_analysis, deterministic_transform, ensrf_analysis, ensrf_transform, entkf_analysis,
};
pub use direct::{kalman_gain_direct, senkf_analysis_direct, senkf_analysis_direct_localized};
pub use senkf::{senkf_analysis_matrixfree, senkf_gain_matrixfree, senkf_transform, SVD_TRUNCATION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterKind {
    /// Stochastic EnKF with the matrix-free SVD update.
    Senkf,
    /// Ensemble square-root filter.
    Ensrf,
    /// Ensemble transform Kalman filter.
    Entkf,
    /// Deterministic EnKF (half-gain anomaly update).
    Denkf,
}

impl FilterKind {
    pub fn is_stochastic(self) -> bool {
        matches!(self, FilterKind::Senkf)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FilterKind::Senkf => "senkf",
            FilterKind::Ensrf => "ensrf",
            FilterKind::Entkf => "entkf",
            FilterKind::Denkf => "denkf",
        }
    }
}

impl std::str::FromStr for FilterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "senkf" => Ok(FilterKind::Senkf),
            "ensrf" => Ok(FilterKind::Ensrf),
            "entkf" => Ok(FilterKind::Entkf),
            "denkf" => Ok(FilterKind::Denkf),
            other => Err(Error::invalid("filter", format!("unknown filter `{other}`"))),
        }
    }
}

/// Intermediates of one analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisTransform {
    /// `K` or `K_e` when the filter forms it (`n x m`).
    pub gain: Option<DMatrix<f64>>,
    /// Retained left singular vectors `U` of `H X' + Upsilon` (`m x r`).
    pub svd_left: Option<DMatrix<f64>>,
    /// Retained eigenvalues `Lambda = sigma^2`, descending.
    pub svd_values: Option<DVector<f64>>,
    /// `Ne x Ne` transform with `X^a = X^f T`.
    pub transform: Option<DMatrix<f64>>,
    /// Per-member innovations (`m x Ne`); deterministic filters repeat the
    /// mean innovation in every column.
    pub innovation: DMatrix<f64>,
}

/// Diagonal variances or a full observation error covariance.
#[derive(Debug, Clone, PartialEq)]
pub enum ObsErrorCov {
    Diagonal(DVector<f64>),
    Full(DMatrix<f64>),
}

impl ObsErrorCov {
    pub fn dim(&self) -> usize {
        match self {
            ObsErrorCov::Diagonal(d) => d.len(),
            ObsErrorCov::Full(m) => m.nrows(),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            ObsErrorCov::Diagonal(d) => DMatrix::from_diagonal(d),
            ObsErrorCov::Full(m) => m.clone(),
        }
    }
}

/// Observation perturbations `Upsilon` and virtual observations `D = y + Upsilon`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationSet {
    perturbations: DMatrix<f64>,
    virtual_obs: DMatrix<f64>,
    obs_error: ObsErrorCov,
}

impl PerturbationSet {
    pub fn new(y: &DVector<f64>, perturbations: DMatrix<f64>, obs_error: ObsErrorCov) -> Result<Self> {
        ensure_dims("perturbation rows", y.len(), perturbations.nrows())?;
        ensure_dims("observation error dimension", y.len(), obs_error.dim())?;
        if !crate::ensemble::all_finite(perturbations.iter()) {
            return Err(Error::NonFinite("observation perturbations"));
        }
        let mut virtual_obs = perturbations.clone();
        for mut col in virtual_obs.column_iter_mut() {
            col += y;
        }
        Ok(PerturbationSet {
            perturbations,
            virtual_obs,
            obs_error,
        })
    }

    pub fn perturbations(&self) -> &DMatrix<f64> {
        &self.perturbations
    }

    pub fn virtual_obs(&self) -> &DMatrix<f64> {
        &self.virtual_obs
    }

    pub fn obs_error(&self) -> &ObsErrorCov {
        &self.obs_error
    }

    pub fn members(&self) -> usize {
        self.perturbations.ncols()
    }

    pub fn obs_dim(&self) -> usize {
        self.perturbations.nrows()
    }

    /// Observations the set was built around (`D` minus `Upsilon`, column 0).
    pub fn observations(&self) -> DVector<f64> {
        self.virtual_obs.column(0) - self.perturbations.column(0)
    }

    /// Sample mean of each perturbation row.
    pub fn row_means(&self) -> DVector<f64> {
        crate::ensemble::row_mean(&self.perturbations)
    }

    /// Ensemble estimate `R_e = Upsilon Upsilon^T / (Ne - 1)`.
    pub fn sample_covariance(&self) -> DMatrix<f64> {
        let ne = self.members() as f64;
        &self.perturbations * self.perturbations.transpose() / (ne - 1.0)
    }

    /// Removes from every perturbation row its component along the rows of
    /// `hx_anomalies`, so that `H X' Upsilon^T = 0`.
    ///
    /// The matrix-free update factors `H X'X'^T H^T + Upsilon Upsilon^T` as
    /// `(H X' + Upsilon)(H X' + Upsilon)^T`, which is exact only when the cross
    /// terms vanish; this makes them vanish.
    pub fn decorrelated_from(&self, hx_anomalies: &DMatrix<f64>) -> Result<Self> {
        ensure_dims("anomaly rows", self.obs_dim(), hx_anomalies.nrows())?;
        ensure_dims("anomaly members", self.members(), hx_anomalies.ncols())?;
        let svd = hx_anomalies.transpose().svd(true, false);
        let u = svd.u.expect("requested U");
        let smax = svd.singular_values.iter().copied().fold(0.0, f64::max);
        let keep: Vec<usize> = (0..svd.singular_values.len())
            .filter(|&i| smax > 0.0 && svd.singular_values[i] > 1e-12 * smax)
            .collect();
        let q = DMatrix::from_fn(u.nrows(), keep.len(), |r, c| u[(r, keep[c])]);
        let projected = &self.perturbations - (&self.perturbations * &q) * q.transpose();
        PerturbationSet::new(&self.observations(), projected, self.obs_error.clone())
    }
}

/// Splits `H X^f` into its row mean and anomalies.
pub(crate) fn observed_moments(hx: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let mean = crate::ensemble::row_mean(hx);
    let anomalies = crate::ensemble::centred(hx, &mean);
    (mean, anomalies)
}

/// Computes the `Ne x Ne` transform of any filter from the observed ensemble.
///
/// `perts` is required for [`FilterKind::Senkf`] and ignored otherwise;
/// `obs_variances` is required for the deterministic filters.
pub fn analysis_transform(
    kind: FilterKind,
    hx: &DMatrix<f64>,
    y: &DVector<f64>,
    obs_variances: &DVector<f64>,
    perts: Option<&PerturbationSet>,
) -> Result<AnalysisTransform> {
    match kind {
        FilterKind::Senkf => {
            let perts = perts.ok_or_else(|| {
                Error::invalid("perturbations", "the stochastic filter needs observation perturbations")
            })?;
            senkf_transform(hx, perts)
        }
        other => deterministic_transform(other, hx, y, obs_variances),
    }
}
