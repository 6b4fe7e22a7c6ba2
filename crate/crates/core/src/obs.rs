//! Observation operator, observation batches and synthetic observations.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dims, Error, Result};
use crate::models::Trajectory;

/// Linear map `H: R^n -> R^m`. Each observation row is a weighted combination
/// of state entries whose weights sum to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationOperator {
    n: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl ObservationOperator {
    pub fn new(n: usize, rows: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::invalid("observation operator", "needs at least one row"));
        }
        for (k, row) in rows.iter().enumerate() {
            if row.is_empty() {
                return Err(Error::invalid(
                    "observation operator",
                    format!("row {k} has no entries"),
                ));
            }
            for &(idx, w) in row {
                if idx >= n {
                    return Err(Error::IndexOutOfRange { index: idx, len: n });
                }
                if !w.is_finite() {
                    return Err(Error::NonFinite("observation weights"));
                }
            }
            let total: f64 = row.iter().map(|(_, w)| w).sum();
            if (total - 1.0).abs() > 1e-12 {
                return Err(Error::invalid(
                    "observation operator",
                    format!("weights of row {k} sum to {total}, not 1"),
                ));
            }
        }
        Ok(ObservationOperator { n, rows })
    }

    /// Pure selection of the given state indices.
    pub fn selection(n: usize, indices: &[usize]) -> Result<Self> {
        Self::new(n, indices.iter().map(|&i| vec![(i, 1.0)]).collect())
    }

    pub fn identity(n: usize) -> Result<Self> {
        Self::selection(n, &(0..n).collect::<Vec<_>>())
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn obs_dim(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<(usize, f64)>] {
        &self.rows
    }

    /// Dense `m x n` matrix; for oracles.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(self.rows.len(), self.n);
        for (k, row) in self.rows.iter().enumerate() {
            for &(i, w) in row {
                h[(k, i)] += w;
            }
        }
        h
    }

    pub fn apply(&self, x: &[f64]) -> Result<DVector<f64>> {
        ensure_dims("observation operator input", self.n, x.len())?;
        Ok(DVector::from_iterator(
            self.rows.len(),
            self.rows
                .iter()
                .map(|row| row.iter().map(|&(i, w)| w * x[i]).sum()),
        ))
    }

    /// `H X` for an `n x Ne` matrix.
    pub fn apply_matrix(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        ensure_dims("observation operator input", self.n, x.nrows())?;
        let mut out = DMatrix::zeros(self.rows.len(), x.ncols());
        for (j, col) in x.column_iter().enumerate() {
            for (k, row) in self.rows.iter().enumerate() {
                out[(k, j)] = row.iter().map(|&(i, w)| w * col[i]).sum();
            }
        }
        Ok(out)
    }

    /// Contribution of the state rows `rows` (block `block`, laid out as
    /// `rows.len() x Ne`) to `H X`. Summing the partial products of a row
    /// partition reproduces [`apply_matrix`](Self::apply_matrix).
    pub fn apply_row_block(
        &self,
        rows: std::ops::Range<usize>,
        block: &DMatrix<f64>,
    ) -> Result<DMatrix<f64>> {
        ensure_dims("row block height", rows.len(), block.nrows())?;
        let mut out = DMatrix::zeros(self.rows.len(), block.ncols());
        for (k, row) in self.rows.iter().enumerate() {
            for &(i, w) in row {
                if rows.contains(&i) {
                    for j in 0..block.ncols() {
                        out[(k, j)] += w * block[(i - rows.start, j)];
                    }
                }
            }
        }
        Ok(out)
    }

    /// State indices touched by each row, in row order.
    pub fn support(&self) -> Vec<usize> {
        self.rows
            .iter()
            .flat_map(|r| r.iter().map(|&(i, _)| i))
            .collect()
    }
}

/// `H x`.
pub fn apply_h(h: &ObservationOperator, x: &[f64]) -> Result<DVector<f64>> {
    h.apply(x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationBatch {
    pub time: f64,
    pub step: usize,
    pub values: DVector<f64>,
    pub sigma: DVector<f64>,
    pub indices: Vec<usize>,
}

impl ObservationBatch {
    pub fn new(
        time: f64,
        step: usize,
        values: DVector<f64>,
        sigma: DVector<f64>,
        indices: Vec<usize>,
    ) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("observation batch", "needs at least one value"));
        }
        ensure_dims("observation sigma", values.len(), sigma.len())?;
        ensure_dims("observation indices", values.len(), indices.len())?;
        if sigma.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::invalid("observation sigma", "must be finite and positive"));
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid(
                "observation indices",
                "must be strictly increasing",
            ));
        }
        Ok(ObservationBatch {
            time,
            step,
            values,
            sigma,
            indices,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Observation error variances (diagonal of `R`).
    pub fn variances(&self) -> DVector<f64> {
        self.sigma.map(|s| s * s)
    }
}

/// Draws `y(t) = H truth(t) + eps` at the requested trajectory steps.
///
/// Noise comes from a ChaCha20 stream keyed by `seed` with one stream per
/// batch, so batches are independent of how many are requested.
pub fn synthesize_observations(
    truth: &Trajectory,
    h: &ObservationOperator,
    sigma: &DVector<f64>,
    steps: &[usize],
    seed: u64,
) -> Result<Vec<ObservationBatch>> {
    ensure_dims("observation sigma", h.obs_dim(), sigma.len())?;
    if sigma.iter().any(|&s| !(s >= 0.0 && s.is_finite())) {
        return Err(Error::invalid("observation sigma", "must be finite and >= 0"));
    }
    let indices = h.support();
    let mut sorted = steps.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut batches = Vec::with_capacity(sorted.len());
    for &step in &sorted {
        if step >= truth.len() {
            return Err(Error::TimeOutOfSpan {
                time: truth.time_of(step),
                start: truth.times[0],
                end: *truth.times.last().unwrap(),
            });
        }
        let clean = h.apply(truth.state(step))?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(step as u64);
        let values = DVector::from_iterator(
            clean.len(),
            clean.iter().zip(sigma.iter()).map(|(&v, &s)| {
                let z: f64 = StandardNormal.sample(&mut rng);
                v + s * z
            }),
        );
        // Zero-sigma observations are exact; batches still need positive sigma
        // for the analysis, which callers supply separately in that case.
        let batch_sigma = sigma.map(|s| if s > 0.0 { s } else { f64::MIN_POSITIVE });
        let mut idx = indices.clone();
        if idx.windows(2).any(|w| w[0] >= w[1]) {
            // Interpolating operators reuse state indices; record row ids instead.
            idx = (0..h.obs_dim()).collect();
        }
        batches.push(ObservationBatch::new(
            truth.times[step],
            step,
            values,
            batch_sigma,
            idx,
        )?);
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn identity_selection() {
        let h = ObservationOperator::identity(4).unwrap();
        let x = [1.0, -2.0, 3.5, 0.25];
        assert_eq!(h.apply(&x).unwrap().as_slice(), &x);
    }

    #[test]
    fn two_point_interpolation() {
        let h = ObservationOperator::new(5, vec![vec![(2, 0.5), (4, 0.5)]]).unwrap();
        let x = [0.0, 0.0, 2.0, 0.0, 4.0];
        assert_eq!(h.apply(&x).unwrap()[0], 3.0);
    }

    #[test]
    fn sparse_matches_dense() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let n = 12;
        let rows: Vec<Vec<(usize, f64)>> = (0..5)
            .map(|_| {
                let a = rng.gen_range(0..n);
                let b = rng.gen_range(0..n);
                let w: f64 = rng.gen_range(0.0..1.0);
                vec![(a, w), (b, 1.0 - w)]
            })
            .collect();
        let h = ObservationOperator::new(n, rows).unwrap();
        let x = DMatrix::from_fn(n, 3, |_, _| rng.gen_range(-1.0..1.0));
        let dense = h.to_dense() * &x;
        let sparse = h.apply_matrix(&x).unwrap();
        assert!((dense - &sparse).abs().max() <= 1e-14);
        // Row-block partial products sum to the full product.
        let top = h
            .apply_row_block(0..7, &x.rows(0, 7).into_owned())
            .unwrap();
        let bottom = h
            .apply_row_block(7..n, &x.rows(7, n - 7).into_owned())
            .unwrap();
        assert!((top + bottom - sparse).abs().max() <= 1e-14);
    }

    #[test]
    fn linearity() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let h = ObservationOperator::new(6, vec![vec![(1, 0.3), (2, 0.7)], vec![(5, 1.0)]])
            .unwrap();
        let x: Vec<f64> = (0..6).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let z: Vec<f64> = (0..6).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let (a, b) = (1.7, -0.4);
        let combo: Vec<f64> = x.iter().zip(&z).map(|(p, q)| a * p + b * q).collect();
        let lhs = h.apply(&combo).unwrap();
        let rhs = h.apply(&x).unwrap() * a + h.apply(&z).unwrap() * b;
        assert!((lhs - rhs).abs().max() <= 1e-12);
    }

    #[test]
    fn rejects_invalid_operators() {
        assert!(matches!(
            ObservationOperator::selection(3, &[3]),
            Err(Error::IndexOutOfRange { .. })
        ));
        assert!(ObservationOperator::new(3, vec![vec![(0, 0.4), (1, 0.4)]]).is_err());
        let h = ObservationOperator::identity(3).unwrap();
        assert!(h.apply(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn batch_invariants() {
        let v = DVector::from_vec(vec![1.0, 2.0]);
        assert!(ObservationBatch::new(0.0, 0, v.clone(), DVector::from_vec(vec![1.0, 0.0]), vec![0, 1]).is_err());
        assert!(ObservationBatch::new(0.0, 0, v.clone(), DVector::from_vec(vec![1.0, 1.0]), vec![1, 1]).is_err());
        assert!(ObservationBatch::new(0.0, 0, v, DVector::from_vec(vec![1.0, 1.0]), vec![0, 3]).is_ok());
    }

    fn ramp_trajectory(steps: usize, n: usize) -> Trajectory {
        let mut t = Trajectory::new(0.0, 0.5, DVector::from_fn(n, |i, _| i as f64));
        for k in 1..=steps {
            t.push(DVector::from_fn(n, |i, _| (i + k) as f64));
        }
        t
    }

    #[test]
    fn zero_sigma_reproduces_truth() {
        let truth = ramp_trajectory(6, 5);
        let h = ObservationOperator::selection(5, &[0, 2, 4]).unwrap();
        let batches =
            synthesize_observations(&truth, &h, &DVector::zeros(3), &[4, 2], 1).unwrap();
        assert_eq!(batches.len(), 2);
        assert_eq!(batches[0].step, 2);
        assert_eq!(batches[1].time, 2.0);
        assert_eq!(batches[1].values.as_slice(), &[4.0, 6.0, 8.0]);
    }

    #[test]
    fn out_of_span_rejected() {
        let truth = ramp_trajectory(3, 2);
        let h = ObservationOperator::identity(2).unwrap();
        let err = synthesize_observations(&truth, &h, &DVector::from_element(2, 1.0), &[9], 1);
        assert!(matches!(err, Err(Error::TimeOutOfSpan { .. })));
    }

    #[test]
    fn noise_statistics() {
        // 10^4 draws spread across many single-entry batches.
        let truth = ramp_trajectory(9999, 1);
        let h = ObservationOperator::identity(1).unwrap();
        let sigma = 2.5;
        let steps: Vec<usize> = (0..10_000).collect();
        let batches =
            synthesize_observations(&truth, &h, &DVector::from_element(1, sigma), &steps, 3)
                .unwrap();
        let resid: Vec<f64> = batches
            .iter()
            .map(|b| b.values[0] - truth.state(b.step)[0])
            .collect();
        let mean = resid.iter().sum::<f64>() / resid.len() as f64;
        let sd = (resid.iter().map(|r| (r - mean).powi(2)).sum::<f64>()
            / (resid.len() - 1) as f64)
            .sqrt();
        assert!((sd - sigma).abs() / sigma < 0.03, "sd = {sd}");
    }
}
