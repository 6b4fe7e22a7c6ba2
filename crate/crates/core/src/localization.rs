//! Gain localization with the Gaspari-Cohn taper, ensemble-estimated
//! localization radii, and additive inflation.
//!
//! Localization only applies to the direct stochastic update; the
//! matrix-free analysis works in the ensemble subspace and has no gain to
//! taper.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::ensemble::{all_finite, EnsembleMatrix};
use crate::error::{ensure_dims, Error, Result};
use crate::fields::init::{member_perturbation, validate_spec};
use crate::layout::StateLayout;
use crate::obs::ObservationOperator;

/// Default correlation below which two rows count as decorrelated.
pub const DEFAULT_CORRELATION_FLOOR: f64 = 1.0 / std::f64::consts::E;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LocalizationMode {
    #[default]
    None,
    Manual,
    Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalizationSpec {
    #[serde(default)]
    pub mode: LocalizationMode,
    /// Gaspari-Cohn half-width `c` in grid units; the taper vanishes at `2c`.
    #[serde(default)]
    pub radius: f64,
    #[serde(default = "default_floor")]
    pub correlation_floor: f64,
}

fn default_floor() -> f64 {
    DEFAULT_CORRELATION_FLOOR
}

impl Default for LocalizationSpec {
    fn default() -> Self {
        LocalizationSpec {
            mode: LocalizationMode::None,
            radius: 0.0,
            correlation_floor: DEFAULT_CORRELATION_FLOOR,
        }
    }
}

impl LocalizationSpec {
    pub fn manual(radius: f64) -> Self {
        LocalizationSpec {
            mode: LocalizationMode::Manual,
            radius,
            ..Default::default()
        }
    }

    pub fn adaptive(correlation_floor: f64) -> Self {
        LocalizationSpec {
            mode: LocalizationMode::Adaptive,
            correlation_floor,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            LocalizationMode::Manual if !(self.radius > 0.0 && self.radius.is_finite()) => {
                Err(Error::invalid("localization.radius", "must be > 0 in manual mode"))
            }
            LocalizationMode::Adaptive
                if !(self.correlation_floor > 0.0 && self.correlation_floor < 1.0) =>
            {
                Err(Error::invalid(
                    "localization.correlation_floor",
                    "must lie in (0, 1)",
                ))
            }
            _ => Ok(()),
        }
    }

    pub fn is_active(&self) -> bool {
        self.mode != LocalizationMode::None
    }
}

/// Fifth-order piecewise rational taper of Gaspari and Cohn with half-width `c`.
pub fn gaspari_cohn(r: f64, c: f64) -> Result<f64> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::invalid("c", "must be finite and > 0"));
    }
    if !r.is_finite() {
        return Err(Error::NonFinite("taper distance"));
    }
    let z = r.abs() / c;
    let v = if z <= 1.0 {
        (((-0.25 * z + 0.5) * z + 0.625) * z - 5.0 / 3.0) * z * z + 1.0
    } else if z < 2.0 {
        ((((z / 12.0 - 0.5) * z + 0.625) * z + 5.0 / 3.0) * z - 5.0) * z + 4.0 - 2.0 / (3.0 * z)
    } else {
        0.0
    };
    Ok(v.clamp(0.0, 1.0))
}

/// Schur product `K o taper`.
pub fn localize_gain(k: &DMatrix<f64>, taper: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    ensure_dims("taper rows", k.nrows(), taper.nrows())?;
    ensure_dims("taper columns", k.ncols(), taper.ncols())?;
    Ok(k.component_mul(taper))
}

/// Grid coordinates of row `row`, if its variable has a grid.
fn row_position(layout: &StateLayout, row: usize) -> Option<(f64, f64)> {
    let (name, local) = layout.locate(row)?;
    let entry = layout.entry(name).ok()?;
    entry.grid.as_ref().map(|g| g.node(local))
}

/// Location of an observation: the node of its largest-weight support entry.
fn obs_position(layout: &StateLayout, h: &ObservationOperator, k: usize) -> Option<(f64, f64)> {
    let (idx, _) = h.rows()[k]
        .iter()
        .copied()
        .fold(None, |best: Option<(usize, f64)>, (i, w)| match best {
            Some((_, bw)) if bw >= w.abs() => best,
            _ => Some((i, w.abs())),
        })?;
    row_position(layout, idx)
}

/// `n x m` Gaspari-Cohn taper between state rows and observations.
///
/// `radii[i]` is the half-width used for row `i`. Rows or observations without
/// a grid position are not localized (weight 1).
pub fn gain_taper(layout: &StateLayout, h: &ObservationOperator, radii: &[f64]) -> Result<DMatrix<f64>> {
    ensure_dims("observation operator state dimension", layout.len(), h.state_dim())?;
    ensure_dims("localization radii", layout.len(), radii.len())?;
    let obs_pos: Vec<_> = (0..h.obs_dim()).map(|k| obs_position(layout, h, k)).collect();
    let mut taper = DMatrix::from_element(layout.len(), h.obs_dim(), 1.0);
    for i in 0..layout.len() {
        let Some((xi, yi)) = row_position(layout, i) else {
            continue;
        };
        for (k, pos) in obs_pos.iter().enumerate() {
            if let Some((xk, yk)) = pos {
                let d = ((xi - xk).powi(2) + (yi - yk).powi(2)).sqrt();
                taper[(i, k)] = gaspari_cohn(d, radii[i])?;
            }
        }
    }
    Ok(taper)
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>();
    if na == 0.0 || nb == 0.0 {
        // A row without spread carries no correlation information.
        return 0.0;
    }
    dot / (na * nb).sqrt()
}

/// Per-row localization radius estimated from ensemble correlations.
///
/// For each row of a gridded variable, the radius is the smallest distance to
/// another node of the same variable whose sample correlation with the row
/// drops below `floor`, clamped to `[cell size, domain diagonal]`. Rows of
/// variables without a grid get `None`.
pub fn adaptive_localization_lengths(e: &EnsembleMatrix, floor: f64) -> Result<Vec<Option<f64>>> {
    if e.members() < 10 {
        return Err(Error::TooFewMembers {
            required: 10,
            actual: e.members(),
        });
    }
    if !(floor > 0.0 && floor < 1.0) {
        return Err(Error::invalid("correlation floor", "must lie in (0, 1)"));
    }
    let layout = e.layout().clone();
    let xp = e.anomalies();
    let rows: Vec<Vec<f64>> = xp.row_iter().map(|r| r.iter().copied().collect()).collect();
    let mut out = vec![None; e.n()];
    for (v, entry) in layout.entries().iter().enumerate() {
        let Some(grid) = &entry.grid else { continue };
        let range = layout.range_at(v);
        let (lo, hi) = (grid.cell_size(), grid.diagonal());
        for a in 0..entry.length {
            let mut neighbours: Vec<(f64, usize)> = (0..entry.length)
                .filter(|&b| b != a)
                .map(|b| (grid.distance(a, b), b))
                .collect();
            neighbours.sort_by(|p, q| p.0.total_cmp(&q.0));
            let row_a = &rows[range.start + a];
            let radius = neighbours
                .iter()
                .find(|(_, b)| correlation(row_a, &rows[range.start + b]) < floor)
                .map(|(d, _)| *d)
                .unwrap_or(hi);
            out[range.start + a] = Some(radius.clamp(lo, hi));
        }
    }
    Ok(out)
}

/// Adds a re-centred correlated noise draw to every member.
///
/// `sigma[k]` and `lengths[k]` apply to layout entry `k`. The noise of each row
/// has zero sample mean, so the ensemble mean is unchanged.
pub fn additive_inflate(
    e: &EnsembleMatrix,
    sigma: &[f64],
    lengths: &[f64],
    seed: u64,
    cycle: u64,
) -> Result<EnsembleMatrix> {
    let layout = e.layout().clone();
    validate_spec(&layout, sigma, lengths)?;
    if sigma.iter().all(|&s| s == 0.0) {
        return Ok(e.clone());
    }
    let mut noise = DMatrix::zeros(e.n(), e.members());
    for i in 0..e.members() {
        let draw = member_perturbation(&layout, sigma, lengths, seed, "additive", cycle, i)?;
        noise.set_column(i, &nalgebra::DVector::from_vec(draw));
    }
    for mut row in noise.row_iter_mut() {
        let mean = row.mean();
        row.add_scalar_mut(-mean);
    }
    let data = e.data() + noise;
    if !all_finite(data.iter()) {
        return Err(Error::NonFinite("additive inflation"));
    }
    e.replaced(data)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::ensemble::ensemble_spread;
    use crate::fields::{initialize_ensemble, EnsembleInitSpec};
    use crate::grid::GridSpec;
    use crate::layout::{build_state_layout, VarSpec};
    use nalgebra::DVector;

    #[test]
    fn taper_endpoints() {
        assert_eq!(gaspari_cohn(0.0, 3.0).unwrap(), 1.0);
        assert_eq!(gaspari_cohn(6.0, 3.0).unwrap(), 0.0);
        assert_eq!(gaspari_cohn(60.0, 3.0).unwrap(), 0.0);
        assert!((gaspari_cohn(3.0, 3.0).unwrap() - 5.0 / 24.0).abs() < 1e-14);
        assert!(gaspari_cohn(1.0, 0.0).is_err());
    }

    #[test]
    fn taper_is_monotone_and_continuous() {
        let c = 1.7;
        let mut prev = 1.0;
        for i in 0..=1000 {
            let r = 2.0 * c * i as f64 / 1000.0;
            let v = gaspari_cohn(r, c).unwrap();
            assert!(v <= prev + 1e-15, "not monotone at {r}");
            assert!((prev - v) < 0.01, "jump at {r}");
            prev = v;
        }
        // Both pieces meet at z = 1.
        let below = gaspari_cohn(c * (1.0 - 1e-12), c).unwrap();
        let above = gaspari_cohn(c * (1.0 + 1e-12), c).unwrap();
        assert!((below - above).abs() < 1e-10);
    }

    #[test]
    fn gain_localization_is_schur_product() {
        let k = DMatrix::from_fn(5, 3, |i, j| (i * 3 + j) as f64 - 4.0);
        let ones = DMatrix::from_element(5, 3, 1.0);
        assert_eq!(localize_gain(&k, &ones).unwrap(), k);
        assert_eq!(localize_gain(&k, &DMatrix::zeros(5, 3)).unwrap(), DMatrix::zeros(5, 3));
        let band = DMatrix::from_fn(5, 3, |i, j| if i.abs_diff(j) <= 1 { 0.5 } else { 0.0 });
        let out = localize_gain(&k, &band).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                assert_eq!(out[(i, j)], k[(i, j)] * band[(i, j)]);
            }
        }
        assert!(localize_gain(&k, &DMatrix::zeros(3, 5)).is_err());
    }

    #[test]
    fn taper_depends_on_distance_to_observation() {
        let g = GridSpec::line(10.0, 10).unwrap();
        let layout = build_state_layout([VarSpec::state("x", 10).with_grid(g), VarSpec::parameter("p", 1)]).unwrap();
        let h = ObservationOperator::selection(11, &[2]).unwrap();
        let t = gain_taper(&layout, &h, &[1.5; 11]).unwrap();
        assert_eq!(t[(2, 0)], 1.0);
        assert!(t[(3, 0)] > t[(4, 0)]);
        assert_eq!(t[(8, 0)], 0.0);
        // Parameters are not localized.
        assert_eq!(t[(10, 0)], 1.0);
    }

    fn line_ensemble(data: DMatrix<f64>) -> EnsembleMatrix {
        let n = data.nrows();
        let layout = build_state_layout([VarSpec::state("x", n).with_grid(GridSpec::line(n as f64, n).unwrap())])
            .unwrap();
        EnsembleMatrix::new(data, Arc::new(layout)).unwrap()
    }

    #[test]
    fn adaptive_radius_clamps() {
        // Identical rows: correlation 1 everywhere, radius runs to the diagonal.
        let common: Vec<f64> = (0..12).map(|j| (j as f64 * 0.7).sin()).collect();
        let e = line_ensemble(DMatrix::from_fn(8, 12, |_, j| common[j]));
        for r in adaptive_localization_lengths(&e, DEFAULT_CORRELATION_FLOOR).unwrap() {
            assert_eq!(r, Some((64.0_f64 + 1.0).sqrt()));
        }
        // Disjoint supports: orthogonal rows, radius is one cell.
        let e = line_ensemble(DMatrix::from_fn(6, 12, |i, j| {
            if j == 2 * i {
                1.0
            } else if j == 2 * i + 1 {
                -1.0
            } else {
                0.0
            }
        }));
        for r in adaptive_localization_lengths(&e, DEFAULT_CORRELATION_FLOOR).unwrap() {
            assert_eq!(r, Some(1.0));
        }
        assert!(adaptive_localization_lengths(&line_ensemble(DMatrix::zeros(4, 9)), 0.3).is_err());
    }

    #[test]
    fn adaptive_radius_recovers_field_length() {
        let n = 60;
        let g = GridSpec::line(n as f64, n).unwrap();
        let layout = Arc::new(build_state_layout([VarSpec::state("x", n).with_grid(g)]).unwrap());
        let length = 5.0;
        let spec = EnsembleInitSpec {
            spreads: vec![1.0],
            lengths: vec![length],
        };
        let e = initialize_ensemble(&DVector::zeros(n), layout, &spec, 100, 8).unwrap();
        let mut radii: Vec<f64> = adaptive_localization_lengths(&e, DEFAULT_CORRELATION_FLOOR)
            .unwrap()
            .into_iter()
            .flatten()
            .collect();
        radii.sort_by(f64::total_cmp);
        let median = radii[radii.len() / 2];
        assert!(median >= length / 2.0 && median <= length * 2.0, "median radius {median}");
    }

    #[test]
    fn additive_inflation_keeps_mean_and_adds_spread() {
        let g = GridSpec::line(20.0, 20).unwrap();
        let layout = Arc::new(build_state_layout([VarSpec::state("x", 20).with_grid(g)]).unwrap());
        let spec = EnsembleInitSpec {
            spreads: vec![0.5],
            lengths: vec![2.0],
        };
        let e = initialize_ensemble(&DVector::from_element(20, 3.0), layout, &spec, 15, 1).unwrap();
        let same = additive_inflate(&e, &[0.0], &[2.0], 4, 0).unwrap();
        assert_eq!(same.data(), e.data());
        let out = additive_inflate(&e, &[0.3], &[2.0], 4, 0).unwrap();
        let drift = (out.mean() - e.mean()).abs().max();
        assert!(drift <= 1e-12 * e.mean().abs().max());
        assert!(ensemble_spread(&out).sum() > ensemble_spread(&e).sum());
    }

    #[test]
    fn spec_validation() {
        assert!(LocalizationSpec::manual(0.0).validate().is_err());
        assert!(LocalizationSpec::manual(2.0).validate().is_ok());
        assert!(LocalizationSpec::adaptive(1.0).validate().is_err());
        assert!(LocalizationSpec::default().validate().is_ok());
    }
}
