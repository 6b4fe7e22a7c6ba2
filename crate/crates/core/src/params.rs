//! Joint state-parameter estimation: augmentation, adaptive bounds, bounded
//! Beta refresh of parameter rows, and the under-relaxed parameter update.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::ensemble::{inflate_rows_in_place, validate_inflation, EnsembleMatrix};
use crate::error::{ensure_dims, Error, Result};
use crate::layout::StateLayout;

/// Fraction of the observed range added on each side of estimated bounds.
pub const BOUND_MARGIN: f64 = 0.1;

/// Parameter rows of a joint layout with their bounds and spread floors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterBlock {
    pub names: Vec<String>,
    /// Joint-ensemble row of every parameter entry's first value.
    pub offsets: Vec<usize>,
    /// Per parameter row.
    pub bounds: Vec<Option<(f64, f64)>>,
    /// Per parameter row.
    pub spread_floor: Vec<f64>,
}

impl ParameterBlock {
    /// Block covering the parameter entries of `layout`, without bounds.
    pub fn from_layout(layout: &StateLayout, spread_floor: f64) -> Result<Self> {
        if !(spread_floor >= 0.0 && spread_floor.is_finite()) {
            return Err(Error::invalid("spread_floor", "must be finite and >= 0"));
        }
        let mut names = Vec::new();
        let mut offsets = Vec::new();
        for (i, entry) in layout.parameter_entries() {
            names.push(entry.name.clone());
            offsets.push(layout.offsets()[i]);
        }
        let rows = layout.param_rows().len();
        Ok(ParameterBlock {
            names,
            offsets,
            bounds: vec![None; rows],
            spread_floor: vec![spread_floor; rows],
        })
    }

    pub fn rows(&self) -> usize {
        self.spread_floor.len()
    }

    pub fn validate(&self) -> Result<()> {
        ensure_dims("parameter bounds", self.rows(), self.bounds.len())?;
        for (k, b) in self.bounds.iter().enumerate() {
            if let Some((lo, hi)) = *b {
                if !(lo < hi) {
                    return Err(Error::invalid("bounds", format!("row {k}: need lo < hi")));
                }
                if !(self.spread_floor[k] < (hi - lo) / 2.0) {
                    return Err(Error::invalid(
                        "spread_floor",
                        format!("row {k}: must be below half the bound width"),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Stacks a state ensemble and a parameter ensemble (parameters last).
pub fn augment(state: &EnsembleMatrix, params: Option<&EnsembleMatrix>) -> Result<EnsembleMatrix> {
    let Some(params) = params else {
        return Ok(state.clone());
    };
    if state.members() != params.members() {
        return Err(Error::DimensionMismatch {
            context: "augmented ensemble members",
            expected: state.members(),
            actual: params.members(),
        });
    }
    let layout = state.layout().stacked(params.layout())?;
    let mut data = DMatrix::zeros(state.n() + params.n(), state.members());
    data.rows_mut(0, state.n()).copy_from(state.data());
    data.rows_mut(state.n(), params.n()).copy_from(params.data());
    EnsembleMatrix::new(data, Arc::new(layout))
}

/// Inverse of [`augment`]: splits off the trailing parameter rows.
pub fn split(joint: &EnsembleMatrix) -> Result<(EnsembleMatrix, Option<EnsembleMatrix>)> {
    let layout = joint.layout();
    if !layout.has_parameters() {
        return Ok((joint.clone(), None));
    }
    let state_rows = layout.state_rows();
    let param_rows = layout.param_rows();
    let (state_specs, param_specs): (Vec<_>, Vec<_>) = layout
        .entries()
        .iter()
        .cloned()
        .partition(|e| e.kind == crate::layout::VarKind::State);
    let param_layout = crate::layout::build_state_layout(param_specs)?;
    let params = EnsembleMatrix::new(
        joint.data().rows(param_rows.start, param_rows.len()).into_owned(),
        Arc::new(param_layout),
    )?;
    if state_rows.is_empty() {
        return Err(Error::Layout("joint layout has no state rows".into()));
    }
    let state_layout = crate::layout::build_state_layout(state_specs)?;
    let state = EnsembleMatrix::new(
        joint.data().rows(0, state_rows.len()).into_owned(),
        Arc::new(state_layout),
    )?;
    Ok((state, Some(params)))
}

fn finite_min_max(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    values
        .filter(|v| v.is_finite())
        .fold(None, |acc, v| match acc {
            None => Some((v, v)),
            Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
        })
}

/// Per-row bounds for parameter rows (`p x Ne` matrices).
///
/// Observation-implied values (`obs[k]` for row `k`, when non-empty) take
/// precedence over the ensemble; otherwise the range is taken over the
/// current and previous ensembles together. The range is widened by
/// [`BOUND_MARGIN`] on each side. A zero range becomes
/// `x +/- max(1e-8, 2 floor)`, and any range narrower than `4 floor` is
/// widened symmetrically to that width so a spread of `floor` stays
/// representable.
pub fn estimate_bounds(
    current: &DMatrix<f64>,
    previous: Option<&DMatrix<f64>>,
    obs: Option<&[Vec<f64>]>,
    spread_floor: &[f64],
) -> Result<Vec<(f64, f64)>> {
    let p = current.nrows();
    ensure_dims("spread floors", p, spread_floor.len())?;
    if let Some(prev) = previous {
        ensure_dims("previous parameter rows", p, prev.nrows())?;
    }
    if let Some(o) = obs {
        ensure_dims("observation-implied parameter rows", p, o.len())?;
    }
    let mut out = Vec::with_capacity(p);
    for k in 0..p {
        let from_obs = obs.and_then(|o| finite_min_max(o[k].iter().copied()));
        let range = from_obs.or_else(|| {
            let cur = current.row(k).iter().copied().collect::<Vec<_>>();
            let prev = previous
                .map(|m| m.row(k).iter().copied().collect::<Vec<_>>())
                .unwrap_or_default();
            finite_min_max(cur.into_iter().chain(prev))
        });
        let (lo, hi) = range.ok_or_else(|| {
            Error::invalid("bounds", format!("no finite values to bound parameter row {k}"))
        })?;
        let floor = spread_floor[k];
        let (lo, hi) = if hi > lo {
            let margin = BOUND_MARGIN * (hi - lo);
            (lo - margin, hi + margin)
        } else {
            let eps = f64::max(1e-8, 2.0 * floor);
            (lo - eps, hi + eps)
        };
        let half = (hi - lo) / 2.0;
        let (lo, hi) = if half < 2.0 * floor {
            let mid = 0.5 * (lo + hi);
            (mid - 2.0 * floor, mid + 2.0 * floor)
        } else {
            (lo, hi)
        };
        out.push((lo, hi));
    }
    Ok(out)
}

/// Shape parameters of the Beta distribution on `[0, 1]` with the given mean
/// and variance, or `None` when no such Beta exists.
pub fn beta_from_moments(mean: f64, var: f64) -> Option<(f64, f64)> {
    if !(mean > 0.0 && mean < 1.0 && var > 0.0) {
        return None;
    }
    let limit = mean * (1.0 - mean);
    if var >= limit {
        return None;
    }
    let common = limit / var - 1.0;
    Some((mean * common, (1.0 - mean) * common))
}

/// Result of [`bounded_refresh`].
#[derive(Debug, Clone, PartialEq)]
pub struct RefreshOutcome {
    pub rows: DMatrix<f64>,
    /// Row used the fallback variance because the requested moments were
    /// infeasible for a Beta distribution on the bounds.
    pub fallback: Vec<bool>,
    /// Row spread had to be reduced to keep every member inside the bounds.
    pub shrunk: Vec<bool>,
}

/// Resamples every parameter row from a Beta distribution on its bounds.
///
/// The target mean is the row mean clipped into `(lo + d, hi - d)` with
/// `d = 1e-6 (hi - lo)`; the target variance is `max(var, floor^2)`. Draws are
/// standardized to reproduce both target moments exactly; if that would put
/// a member outside the bounds, the deviations are shrunk about the mean.
/// Each row uses its own random stream keyed by `(seed, cycle, row)`.
pub fn bounded_refresh(
    params: &DMatrix<f64>,
    bounds: &[(f64, f64)],
    spread_floor: &[f64],
    seed: u64,
    cycle: u64,
) -> Result<RefreshOutcome> {
    refresh_rows(params, bounds, spread_floor, seed, cycle, 0)
}

/// [`bounded_refresh`] for a block of rows whose first row has global
/// parameter index `first_row`, so a row draws the same stream whichever
/// block it is processed in.
pub(crate) fn refresh_rows(
    params: &DMatrix<f64>,
    bounds: &[(f64, f64)],
    spread_floor: &[f64],
    seed: u64,
    cycle: u64,
    first_row: usize,
) -> Result<RefreshOutcome> {
    let (p, ne) = (params.nrows(), params.ncols());
    ensure_dims("parameter bounds", p, bounds.len())?;
    ensure_dims("spread floors", p, spread_floor.len())?;
    if ne < 2 {
        return Err(Error::TooFewMembers {
            required: 2,
            actual: ne,
        });
    }
    let mut rows = DMatrix::zeros(p, ne);
    let mut fallback = vec![false; p];
    let mut shrunk = vec![false; p];
    for k in 0..p {
        let (lo, hi) = bounds[k];
        if !(lo < hi && lo.is_finite() && hi.is_finite()) {
            return Err(Error::invalid("bounds", format!("row {k}: need finite lo < hi")));
        }
        let width = hi - lo;
        let delta = 1e-6 * width;
        let row = params.row(k);
        let mean = row.mean().clamp(lo + delta, hi - delta);
        let var = row.variance() * ne as f64 / (ne - 1) as f64;
        let target_var = var.max(spread_floor[k].powi(2));

        let mu = (mean - lo) / width;
        let (a, b, used_var) = match beta_from_moments(mu, target_var / width.powi(2)) {
            Some((a, b)) => (a, b, target_var),
            None => {
                fallback[k] = true;
                let v = f64::min(1.0 / 12.0, 0.5 * mu * (1.0 - mu));
                let (a, b) = beta_from_moments(mu, v).expect("fallback variance is feasible");
                (a, b, v * width.powi(2))
            }
        };
        let dist = Beta::new(a, b).map_err(|e| Error::invalid("beta", e.to_string()))?;
        let mut rng = crate::rng::stream_rng(seed, "refresh", cycle, (first_row + k) as u64);
        let mut draws: Vec<f64> = (0..ne).map(|_| lo + width * dist.sample(&mut rng)).collect();

        let m = draws.iter().sum::<f64>() / ne as f64;
        let sd = (draws.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (ne - 1) as f64).sqrt();
        let mut scale = if sd > 0.0 { used_var.sqrt() / sd } else { 0.0 };
        // Largest scale keeping every member strictly inside the bounds.
        let inner_lo = lo + delta;
        let inner_hi = hi - delta;
        for &x in &draws {
            let dev = x - m;
            let room = if dev > 0.0 {
                (inner_hi - mean) / dev
            } else if dev < 0.0 {
                (inner_lo - mean) / dev
            } else {
                f64::INFINITY
            };
            if room < scale {
                scale = room;
                shrunk[k] = true;
            }
        }
        for x in draws.iter_mut() {
            *x = mean + scale * (*x - m);
        }
        rows.row_mut(k).copy_from_slice(&draws);
    }
    Ok(RefreshOutcome {
        rows,
        fallback,
        shrunk,
    })
}

/// Under-relaxation settings for snapshot parameter updates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelaxationParams {
    pub eta: f64,
    #[serde(default)]
    pub sigma_b: f64,
    pub dt: f64,
    #[serde(default = "default_alpha_cap")]
    pub alpha_cap: f64,
}

fn default_alpha_cap() -> f64 {
    0.5
}

impl RelaxationParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_cap > 0.0 && self.alpha_cap <= 1.0) {
            return Err(Error::invalid("alpha_cap", "must lie in (0, 1]"));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::invalid("dt", "must be finite and > 0"));
        }
        if !(self.sigma_b >= 0.0 && self.sigma_b.is_finite() && self.eta.is_finite()) {
            return Err(Error::invalid("relaxation", "need finite eta and sigma_b >= 0"));
        }
        Ok(())
    }

    /// `alpha = (eta + beta_t) dt + sqrt(dt) sigma_b rho`, capped at
    /// `alpha_cap` and floored at 0.
    pub fn alpha(&self, beta_t: f64, rho: f64) -> f64 {
        let raw = (self.eta + beta_t) * self.dt + self.dt.sqrt() * self.sigma_b * rho;
        raw.min(self.alpha_cap).max(0.0)
    }
}

/// `prior + alpha (assimilated - prior)` with `alpha` from [`RelaxationParams::alpha`].
pub fn under_relaxed_update(
    prior: &DVector<f64>,
    assimilated: &DVector<f64>,
    rp: &RelaxationParams,
    beta_t: f64,
    rho: f64,
) -> Result<DVector<f64>> {
    rp.validate()?;
    ensure_dims("assimilated parameters", prior.len(), assimilated.len())?;
    let alpha = rp.alpha(beta_t, rho);
    Ok(prior + (assimilated - prior) * alpha)
}

/// Bias term: mean normalized innovation `(y - H x_bar) / sigma`, clamped to
/// `[-|eta|, |eta|]`.
pub fn relaxation_bias(innovation: &DVector<f64>, sigma: &DVector<f64>, eta: f64) -> Result<f64> {
    ensure_dims("innovation sigmas", innovation.len(), sigma.len())?;
    if innovation.is_empty() {
        return Ok(0.0);
    }
    if sigma.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::invalid("sigma", "must be > 0"));
    }
    let mean = innovation.component_div(sigma).mean();
    Ok(mean.clamp(-eta.abs(), eta.abs()))
}

/// Standard normal draw truncated to `[-3, 3]`, one per cycle.
pub fn relaxation_draw(seed: u64, cycle: u64) -> f64 {
    let mut rng = crate::rng::stream_rng(seed, "relaxation", cycle, 0);
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 3.0 {
            return z;
        }
    }
}

/// Multiplicative inflation with separate state and parameter factors.
pub fn inflate_joint(e: &EnsembleMatrix, state_factor: f64, param_factor: f64) -> Result<EnsembleMatrix> {
    validate_inflation(state_factor)?;
    validate_inflation(param_factor)?;
    let layout = e.layout().clone();
    let mut data = e.data().clone();
    inflate_rows_in_place(&mut data, state_factor, layout.state_rows());
    inflate_rows_in_place(&mut data, param_factor, layout.param_rows());
    e.replaced(data)
}
