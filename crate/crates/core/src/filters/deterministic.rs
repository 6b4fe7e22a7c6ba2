use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::{observed_moments, AnalysisTransform, FilterKind};
use crate::ensemble::EnsembleMatrix;
use crate::error::{ensure_dims, Error, Result};
use crate::linalg::{sym_apply, sym_sqrt};
use crate::obs::ObservationOperator;

/// Quantities shared by the three deterministic filters.
struct Observed {
    ne: usize,
    /// Normalized observed anomalies `Y = H X' / sqrt(Ne - 1)`.
    y_norm: DMatrix<f64>,
    /// Mean innovation `y - H x_bar`.
    d: DVector<f64>,
    /// Cholesky factor of `S = Y Y^T + R`.
    s_chol: Cholesky<f64, Dyn>,
}

fn observe(hx: &DMatrix<f64>, y: &DVector<f64>, r: &DVector<f64>) -> Result<Observed> {
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
    ensure_dims("observation vector", m, y.len())?;
    ensure_dims("observation variances", m, r.len())?;
    if r.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::NotPositiveDefinite(
            "observation error variances must be positive".into(),
        ));
    }
    let (mean, hxp) = observed_moments(hx);
    let y_norm = hxp / ((ne - 1) as f64).sqrt();
    let mut s = &y_norm * y_norm.transpose();
    for k in 0..m {
        s[(k, k)] += r[k];
    }
    let s_chol = Cholesky::new(s)
        .ok_or_else(|| Error::NotPositiveDefinite("innovation covariance S".into()))?;
    Ok(Observed {
        ne,
        y_norm,
        d: y - mean,
        s_chol,
    })
}

impl Observed {
    /// `G = Y^T S^-1 Y` (`Ne x Ne`).
    fn gram(&self) -> DMatrix<f64> {
        let g = self.y_norm.transpose() * self.s_chol.solve(&self.y_norm);
        (&g + g.transpose()) * 0.5
    }

    /// Ensemble weights of the mean update, `Y^T S^-1 d / sqrt(Ne - 1)`.
    fn mean_weights(&self) -> DVector<f64> {
        self.y_norm.transpose() * self.s_chol.solve(&self.d) / ((self.ne - 1) as f64).sqrt()
    }

    fn innovation(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.d.len(), self.ne, |r, _| self.d[r])
    }
}

/// Assembles `T = 11^T / Ne + w 1^T + (I - 11^T / Ne) W`.
fn assemble(ne: usize, w: &DVector<f64>, anomaly_transform: &DMatrix<f64>) -> DMatrix<f64> {
    let inv = 1.0 / ne as f64;
    let col_means: Vec<f64> = anomaly_transform
        .column_iter()
        .map(|c| c.sum() * inv)
        .collect();
    DMatrix::from_fn(ne, ne, |i, j| {
        inv + w[i] + anomaly_transform[(i, j)] - col_means[j]
    })
}

/// Square-root anomaly transform `(I - G)^{1/2}`, eigenvalues clamped to `[0, 1]`.
fn sqrt_transform(g: &DMatrix<f64>) -> DMatrix<f64> {
    let ne = g.nrows();
    sym_apply(&(DMatrix::identity(ne, ne) - g), |l| l.clamp(0.0, 1.0).sqrt())
}

/// `Ne x Ne` transform for the deterministic filters from `hx = H X^f`.
pub fn deterministic_transform(
    kind: FilterKind,
    hx: &DMatrix<f64>,
    y: &DVector<f64>,
    r: &DVector<f64>,
) -> Result<AnalysisTransform> {
    let obs = observe(hx, y, r)?;
    let ne = obs.ne;
    let transform = match kind {
        FilterKind::Ensrf => assemble(ne, &obs.mean_weights(), &sqrt_transform(&obs.gram())),
        FilterKind::Denkf => {
            let half = DMatrix::identity(ne, ne) - obs.gram() * 0.5;
            assemble(ne, &obs.mean_weights(), &half)
        }
        FilterKind::Entkf => {
            let (w, anomaly) = transform_weights(&obs, r)?;
            assemble(ne, &w, &anomaly)
        }
        FilterKind::Senkf => {
            return Err(Error::invalid(
                "filter",
                "the stochastic filter is not deterministic",
            ))
        }
    };
    Ok(AnalysisTransform {
        gain: None,
        svd_left: None,
        svd_values: None,
        transform: Some(transform),
        innovation: obs.innovation(),
    })
}

/// Ensemble-space weights of the transform filter: `Omega = (I + Y^T R^-1 Y)^-1`,
/// mean weights `Omega Y^T R^-1 d / sqrt(Ne - 1)` and anomaly transform
/// `Omega^{1/2}`.
fn transform_weights(obs: &Observed, r: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let ne = obs.ne;
    let rinv_y = DMatrix::from_fn(obs.y_norm.nrows(), ne, |k, j| obs.y_norm[(k, j)] / r[k]);
    let c = DMatrix::identity(ne, ne) + obs.y_norm.transpose() * &rinv_y;
    let (values, _) = crate::linalg::sym_eigen_sorted(&c);
    if values.iter().any(|&l| !(l > 0.0)) {
        return Err(Error::NotPositiveDefinite("ensemble-space precision".into()));
    }
    let omega = sym_apply(&c, |l| 1.0 / l);
    let rinv_d = obs.d.component_div(r);
    let w = &omega * (obs.y_norm.transpose() * rinv_d) / ((ne - 1) as f64).sqrt();
    Ok((w, sym_sqrt(&omega)))
}

fn check_obs(e: &EnsembleMatrix, h: &ObservationOperator) -> Result<DMatrix<f64>> {
    ensure_dims("observation operator state dimension", e.n(), h.state_dim())?;
    h.apply_matrix(e.data())
}

/// Square-root analysis: mean updated with `K_e = A Y^T S^-1` in state space,
/// anomalies with the symmetric square root of `I - Y^T S^-1 Y`.
pub fn ensrf_analysis(
    e: &EnsembleMatrix,
    h: &ObservationOperator,
    y: &DVector<f64>,
    r: &DVector<f64>,
) -> Result<(EnsembleMatrix, AnalysisTransform)> {
    let hx = check_obs(e, h)?;
    let obs = observe(&hx, y, r)?;
    let a = e.anomalies() / ((obs.ne - 1) as f64).sqrt();
    let gain = &a * obs.s_chol.solve(&obs.y_norm).transpose();
    let mean_a = e.mean() + &gain * &obs.d;
    let w = sqrt_transform(&obs.gram());
    let mut xa = e.anomalies() * &w;
    for mut col in xa.column_iter_mut() {
        col += &mean_a;
    }
    let transform = assemble(obs.ne, &obs.mean_weights(), &w);
    let mut out = e.replaced(xa)?;
    out.advance_generation();
    Ok((
        out,
        AnalysisTransform {
            gain: Some(gain),
            svd_left: None,
            svd_values: None,
            transform: Some(transform),
            innovation: obs.innovation(),
        },
    ))
}

/// Same as [`deterministic_transform`] with [`FilterKind::Ensrf`].
pub fn ensrf_transform(
    hx: &DMatrix<f64>,
    y: &DVector<f64>,
    r: &DVector<f64>,
) -> Result<AnalysisTransform> {
    deterministic_transform(FilterKind::Ensrf, hx, y, r)
}

fn apply_transform(
    e: &EnsembleMatrix,
    h: &ObservationOperator,
    kind: FilterKind,
    y: &DVector<f64>,
    r: &DVector<f64>,
) -> Result<(EnsembleMatrix, AnalysisTransform)> {
    let hx = check_obs(e, h)?;
    let t = deterministic_transform(kind, &hx, y, r)?;
    let mut out = e.replaced(e.data() * t.transform.as_ref().expect("transform"))?;
    out.advance_generation();
    Ok((out, t))
}

/// Transform analysis entirely in the `Ne`-dimensional ensemble space.
pub fn entkf_analysis(
    e: &EnsembleMatrix,
    h: &ObservationOperator,
    y: &DVector<f64>,
    r: &DVector<f64>,
) -> Result<(EnsembleMatrix, AnalysisTransform)> {
    let (out, mut t) = apply_transform(e, h, FilterKind::Entkf, y, r)?;
    let hx = check_obs(e, h)?;
    let obs = observe(&hx, y, r)?;
    let ne = obs.ne;
    let rinv_y = DMatrix::from_fn(obs.y_norm.nrows(), ne, |k, j| obs.y_norm[(k, j)] / r[k]);
    let omega = sym_apply(
        &(DMatrix::identity(ne, ne) + obs.y_norm.transpose() * &rinv_y),
        |l| 1.0 / l,
    );
    let a = e.anomalies() / ((ne - 1) as f64).sqrt();
    t.gain = Some(a * omega * rinv_y.transpose());
    Ok((out, t))
}

/// Deterministic EnKF: mean as in the square-root filter, anomalies updated
/// with half the gain, `X'^a = X' - K_e H X' / 2`.
pub fn denkf_analysis(
    e: &EnsembleMatrix,
    h: &ObservationOperator,
    y: &DVector<f64>,
    r: &DVector<f64>,
) -> Result<(EnsembleMatrix, AnalysisTransform)> {
    let (out, mut t) = apply_transform(e, h, FilterKind::Denkf, y, r)?;
    let hx = check_obs(e, h)?;
    let obs = observe(&hx, y, r)?;
    let a = e.anomalies() / ((obs.ne - 1) as f64).sqrt();
    t.gain = Some(a * obs.s_chol.solve(&obs.y_norm).transpose());
    Ok((out, t))
}
