//! Ensemble container and moment operations.
//!
//! Members are stored as columns of a column-major [`DMatrix`], so each member
//! is one contiguous slice and right-multiplication by an `Ne x Ne` transform
//! is a plain matrix product.

use std::ops::Range;
use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, DVector};

use crate::error::{ensure_dims, Error, Result};
use crate::layout::StateLayout;

#[derive(Debug, Clone)]
pub struct EnsembleMatrix {
    data: DMatrix<f64>,
    layout: Arc<StateLayout>,
    generation: u64,
    moments: OnceLock<(DVector<f64>, DMatrix<f64>)>,
}

pub(crate) fn all_finite<'a>(values: impl IntoIterator<Item = &'a f64>) -> bool {
    values.into_iter().all(|v| v.is_finite())
}

impl EnsembleMatrix {
    pub fn new(data: DMatrix<f64>, layout: Arc<StateLayout>) -> Result<Self> {
        ensure_dims("ensemble rows vs layout", layout.len(), data.nrows())?;
        if data.ncols() < 2 {
            return Err(Error::TooFewMembers {
                required: 2,
                actual: data.ncols(),
            });
        }
        if !all_finite(data.iter()) {
            return Err(Error::NonFinite("ensemble construction"));
        }
        Ok(EnsembleMatrix {
            data,
            layout,
            generation: 0,
            moments: OnceLock::new(),
        })
    }

    /// Ensemble over a flat single-variable layout.
    pub fn from_matrix(data: DMatrix<f64>) -> Result<Self> {
        let layout = Arc::new(StateLayout::flat(data.nrows().max(1))?);
        Self::new(data, layout)
    }

    pub fn with_generation(mut self, generation: u64) -> Self {
        self.generation = generation;
        self
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_data(self) -> DMatrix<f64> {
        self.data
    }

    pub fn layout(&self) -> &Arc<StateLayout> {
        &self.layout
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn n(&self) -> usize {
        self.data.nrows()
    }

    pub fn members(&self) -> usize {
        self.data.ncols()
    }

    pub fn member(&self, i: usize) -> &[f64] {
        let n = self.n();
        &self.data.as_slice()[i * n..(i + 1) * n]
    }

    /// Replaces the data in place, dropping cached moments.
    pub fn set_data(&mut self, data: DMatrix<f64>) -> Result<()> {
        ensure_dims("ensemble rows", self.n(), data.nrows())?;
        ensure_dims("ensemble members", self.members(), data.ncols())?;
        if !all_finite(data.iter()) {
            return Err(Error::NonFinite("ensemble update"));
        }
        self.data = data;
        self.moments = OnceLock::new();
        Ok(())
    }

    /// Returns a new ensemble with the same layout and the given data.
    pub fn replaced(&self, data: DMatrix<f64>) -> Result<Self> {
        let mut out = EnsembleMatrix {
            data: self.data.clone(),
            layout: self.layout.clone(),
            generation: self.generation,
            moments: OnceLock::new(),
        };
        out.set_data(data)?;
        Ok(out)
    }

    pub fn advance_generation(&mut self) {
        self.generation += 1;
    }

    fn moments(&self) -> &(DVector<f64>, DMatrix<f64>) {
        self.moments.get_or_init(|| {
            let mean = row_mean(&self.data);
            let anomalies = centred(&self.data, &mean);
            (mean, anomalies)
        })
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.moments().0
    }

    pub fn anomalies(&self) -> &DMatrix<f64> {
        &self.moments().1
    }
}

pub(crate) fn row_mean(data: &DMatrix<f64>) -> DVector<f64> {
    let ne = data.ncols() as f64;
    let mut mean = DVector::zeros(data.nrows());
    for col in data.column_iter() {
        mean += col;
    }
    mean / ne
}

pub(crate) fn centred(data: &DMatrix<f64>, mean: &DVector<f64>) -> DMatrix<f64> {
    let mut out = data.clone();
    for mut col in out.column_iter_mut() {
        col -= mean;
    }
    out
}

pub fn ensemble_mean(e: &EnsembleMatrix) -> DVector<f64> {
    e.mean().clone()
}

pub fn anomalies(e: &EnsembleMatrix) -> DMatrix<f64> {
    e.anomalies().clone()
}

/// Sample covariance `X' X'^T / (Ne - 1)`. Builds an `n x n` matrix, so it is
/// only meant for oracles and small problems.
pub fn forecast_covariance(e: &EnsembleMatrix) -> Result<DMatrix<f64>> {
    let ne = e.members();
    if ne < 2 {
        return Err(Error::TooFewMembers {
            required: 2,
            actual: ne,
        });
    }
    let xp = e.anomalies();
    let p = xp * xp.transpose() / (ne as f64 - 1.0);
    // Symmetrize against round-off in the product.
    Ok((&p + p.transpose()) * 0.5)
}

/// Per-row sample standard deviation with divisor `Ne - 1`.
pub fn ensemble_spread(e: &EnsembleMatrix) -> DVector<f64> {
    row_spread(e.anomalies())
}

pub(crate) fn row_spread(anomalies: &DMatrix<f64>) -> DVector<f64> {
    let denom = anomalies.ncols() as f64 - 1.0;
    DVector::from_iterator(
        anomalies.nrows(),
        anomalies
            .row_iter()
            .map(|r| (r.iter().map(|v| v * v).sum::<f64>() / denom).sqrt()),
    )
}

/// Scales anomalies by `factor` about the unchanged mean on the selected rows.
pub fn multiplicative_inflate(
    e: &EnsembleMatrix,
    factor: f64,
    rows: Range<usize>,
) -> Result<EnsembleMatrix> {
    validate_inflation(factor)?;
    if rows.end > e.n() || rows.start > rows.end {
        return Err(Error::IndexOutOfRange {
            index: rows.end,
            len: e.n(),
        });
    }
    let mut data = e.data().clone();
    inflate_rows_in_place(&mut data, factor, rows);
    e.replaced(data)
}

pub(crate) fn validate_inflation(factor: f64) -> Result<()> {
    if !factor.is_finite() || factor < 1.0 {
        return Err(Error::invalid(
            "inflation factor",
            format!("must be finite and >= 1, got {factor}"),
        ));
    }
    Ok(())
}

/// Row-local multiplicative inflation; each row only needs its own values.
pub(crate) fn inflate_rows_in_place(data: &mut DMatrix<f64>, factor: f64, rows: Range<usize>) {
    if factor == 1.0 {
        return;
    }
    let ne = data.ncols() as f64;
    for r in rows {
        let mut row = data.row_mut(r);
        let mean = row.iter().sum::<f64>() / ne;
        for v in row.iter_mut() {
            *v = mean + factor * (*v - mean);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, ne: usize, seed: u64) -> EnsembleMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        EnsembleMatrix::from_matrix(DMatrix::from_fn(n, ne, |_, _| rng.gen_range(-3.0..3.0)))
            .unwrap()
    }

    #[test]
    fn mean_of_two_members() {
        let e = EnsembleMatrix::from_matrix(DMatrix::from_row_slice(2, 2, &[1.0, 3.0, 2.0, 4.0]))
            .unwrap();
        assert_eq!(ensemble_mean(&e).as_slice(), &[2.0, 3.0]);
        assert_eq!(
            anomalies(&e),
            DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, -1.0, 1.0])
        );
    }

    #[test]
    fn identical_columns() {
        let v = [1.5, -2.0, 7.25];
        let e = EnsembleMatrix::from_matrix(DMatrix::from_fn(3, 4, |i, _| v[i])).unwrap();
        assert_eq!(ensemble_mean(&e).as_slice(), &v);
        assert!(anomalies(&e).iter().all(|&x| x == 0.0));
        assert!(forecast_covariance(&e).unwrap().iter().all(|&x| x == 0.0));
        assert!(ensemble_spread(&e).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn mean_matches_double_loop() {
        let e = random(5, 7, 1);
        let m = ensemble_mean(&e);
        for i in 0..5 {
            let mut s = 0.0;
            for j in 0..7 {
                s += e.data()[(i, j)];
            }
            assert!((m[i] - s / 7.0).abs() <= 1e-14);
        }
    }

    #[test]
    fn anomaly_rows_sum_to_zero() {
        let e = random(6, 4, 2);
        let xp = anomalies(&e);
        for (i, row) in xp.row_iter().enumerate() {
            let sum: f64 = row.iter().sum();
            let scale = e.data().row(i).norm().max(1.0);
            assert!(sum.abs() <= 1e-12 * scale);
            for j in 0..4 {
                let direct = e.data()[(i, j)] - e.data().row(i).sum() / 4.0;
                assert!((xp[(i, j)] - direct).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn two_member_variance() {
        let (a, b) = (1.25, -0.5);
        let e = EnsembleMatrix::from_matrix(DMatrix::from_row_slice(1, 2, &[a, b])).unwrap();
        let p = forecast_covariance(&e).unwrap();
        assert!((p[(0, 0)] - (a - b) * (a - b) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn covariance_matches_outer_product_sum() {
        let e = random(4, 6, 3);
        let p = forecast_covariance(&e).unwrap();
        let mean = ensemble_mean(&e);
        let mut oracle = DMatrix::zeros(4, 4);
        for j in 0..6 {
            let d = e.data().column(j) - &mean;
            oracle += &d * d.transpose();
        }
        oracle /= 5.0;
        assert!((&p - &oracle).abs().max() <= 1e-12);
        assert!((&p - p.transpose()).abs().max() <= 1e-12);
        let eig = p.clone().symmetric_eigen();
        assert!(eig.eigenvalues.min() >= -1e-10 * p.trace());
    }

    #[test]
    fn spread_of_row() {
        let e = EnsembleMatrix::from_matrix(DMatrix::from_row_slice(1, 2, &[1.0, 3.0])).unwrap();
        assert!((ensemble_spread(&e)[0] - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn spread_matches_two_pass() {
        let e = random(5, 9, 4);
        let s = ensemble_spread(&e);
        for i in 0..5 {
            let row: Vec<f64> = e.data().row(i).iter().copied().collect();
            let mean = row.iter().sum::<f64>() / 9.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!((s[i] - var.sqrt()).abs() <= 1e-13);
        }
    }

    #[test]
    fn inflation_examples() {
        let e = EnsembleMatrix::from_matrix(DMatrix::from_row_slice(1, 2, &[1.0, 3.0])).unwrap();
        let out = multiplicative_inflate(&e, 2.0, 0..1).unwrap();
        assert_eq!(out.data().as_slice(), &[0.0, 4.0]);
        let same = multiplicative_inflate(&e, 1.0, 0..1).unwrap();
        assert_eq!(same.data(), e.data());
        assert!(multiplicative_inflate(&e, 0.9, 0..1).is_err());
        assert!(multiplicative_inflate(&e, f64::NAN, 0..1).is_err());
    }

    #[test]
    fn inflation_on_subset_leaves_other_rows() {
        let e = random(5, 6, 9);
        let out = multiplicative_inflate(&e, 1.12, 3..5).unwrap();
        for r in 0..3 {
            assert_eq!(out.data().row(r), e.data().row(r));
        }
        let s0 = ensemble_spread(&e);
        let s1 = ensemble_spread(&out);
        for r in 3..5 {
            assert!((s1[r] - 1.12 * s0[r]).abs() <= 1e-12 * s0[r]);
        }
    }

    #[test]
    fn cache_invalidated_on_mutation() {
        let mut e = random(3, 4, 5);
        let before = e.mean().clone();
        e.set_data(DMatrix::from_element(3, 4, 2.0)).unwrap();
        assert_ne!(&before, e.mean());
        assert!(e.mean().iter().all(|&m| m == 2.0));
    }

    #[test]
    fn rejects_invalid_ensembles() {
        assert!(matches!(
            EnsembleMatrix::from_matrix(DMatrix::zeros(3, 1)),
            Err(Error::TooFewMembers { .. })
        ));
        let mut bad = DMatrix::zeros(2, 3);
        bad[(1, 1)] = f64::INFINITY;
        assert!(matches!(
            EnsembleMatrix::from_matrix(bad),
            Err(Error::NonFinite(_))
        ));
    }

    proptest! {
        #[test]
        fn inflation_preserves_mean_and_scales_spread(
            seed in 0u64..10_000,
            factor in 1.0f64..3.0,
            n in 1usize..6,
            ne in 2usize..10,
        ) {
            let e = random(n, ne, seed);
            let out = multiplicative_inflate(&e, factor, 0..n).unwrap();
            let m0 = ensemble_mean(&e);
            let m1 = ensemble_mean(&out);
            for i in 0..n {
                prop_assert!((m0[i] - m1[i]).abs() <= 1e-12 * m0[i].abs().max(1.0));
            }
            let s0 = ensemble_spread(&e);
            let s1 = ensemble_spread(&out);
            for i in 0..n {
                prop_assert!((s1[i] - factor * s0[i]).abs() <= 1e-12 * (factor * s0[i]).max(1e-300));
            }
        }

        #[test]
        fn covariance_equals_anomaly_product(seed in 0u64..10_000, n in 1usize..6, ne in 2usize..9) {
            let e = random(n, ne, seed);
            let xp = anomalies(&e);
            let via_anomalies = &xp * xp.transpose() / (ne as f64 - 1.0);
            let p = forecast_covariance(&e).unwrap();
            prop_assert!((p - via_anomalies).abs().max() <= 1e-12);
        }
    }
}
