//! Seeded pseudo-random fields, ensemble initialization, innovation
//! perturbations and persistent model noise.
//!
//! Fields use the isotropic Gaussian correlation `exp(-d^2 / (2 l^2))`. On a
//! rectangular grid that kernel factorizes into an x-part and a y-part, so the
//! node covariance is the Kronecker product `Cy (x) Cx` and its square root is
//! `Sy (x) Sx`. A field is then `Sy Z Sx^T` for a white-noise matrix `Z`,
//! which costs `O(nx^3 + ny^3)` for the factors instead of `O((nx ny)^3)`.
//! The per-axis square roots come from a symmetric eigendecomposition with
//! negative round-off eigenvalues clamped to zero: the Gaussian kernel is
//! numerically rank deficient for long correlation lengths, where a plain
//! Cholesky factorization breaks down.

pub(crate) mod init;
mod innovation;
mod noise;

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::grid::GridSpec;

pub use crate::grid::decorrelation_length;
pub use init::{initialize_ensemble, EnsembleInitSpec};
pub use innovation::{
    innovation_strategy_anomaly, innovation_strategy_anomaly_observed, innovation_strategy_field,
};
pub use noise::NoiseState;

type FactorKey = (usize, u64, u64);

fn factor_cache() -> &'static Mutex<HashMap<FactorKey, Arc<DMatrix<f64>>>> {
    static CACHE: OnceLock<Mutex<HashMap<FactorKey, Arc<DMatrix<f64>>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Symmetric square root of the 1D Gaussian correlation matrix on `n` nodes
/// with spacing `spacing`.
fn axis_factor(n: usize, spacing: f64, length: f64) -> Arc<DMatrix<f64>> {
    let key = (n, spacing.to_bits(), length.to_bits());
    if let Some(f) = factor_cache().lock().unwrap().get(&key) {
        return f.clone();
    }
    let corr = DMatrix::from_fn(n, n, |i, j| {
        let d = (i as f64 - j as f64) * spacing;
        (-d * d / (2.0 * length * length)).exp()
    });
    let factor = Arc::new(crate::linalg::sym_sqrt(&corr));
    factor_cache()
        .lock()
        .unwrap()
        .entry(key)
        .or_insert(factor)
        .clone()
}

/// Unit-variance correlated field on the grid nodes, not mean-corrected.
pub(crate) fn raw_field<R: Rng + ?Sized>(grid: &GridSpec, length: f64, rng: &mut R) -> Vec<f64> {
    let (nx, ny) = (grid.nx, grid.ny);
    let z = DMatrix::from_fn(ny, nx, |_, _| rng.sample::<f64, _>(StandardNormal));
    let sx = axis_factor(nx, grid.dx(), length);
    let sy = axis_factor(ny, grid.dy(), length);
    let f = &*sy * z * sx.transpose();
    let mut out = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            out.push(f[(j, i)]);
        }
    }
    out
}

pub(crate) fn validate_field_args(length: f64, sigma: f64) -> Result<()> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::invalid("sigma", format!("must be finite and >= 0, got {sigma}")));
    }
    if !(length > 0.0 && length.is_finite()) {
        return Err(Error::invalid("length", format!("must be finite and > 0, got {length}")));
    }
    Ok(())
}

/// Zero-mean stationary field with marginal standard deviation `sigma`.
///
/// The spatial sample mean is subtracted when the grid has more than one node.
/// With a `prior` field the result is `rho * prior + sqrt(1 - rho^2) * fresh`.
/// The output is a pure function of `(grid, length, sigma, seed, prior, rho)`.
pub fn gaussian_random_field(
    grid: &GridSpec,
    length: f64,
    sigma: f64,
    seed: u64,
    prior: Option<(&[f64], f64)>,
) -> Result<Vec<f64>> {
    let mut rng = crate::rng::stream_rng(seed, "field", 0, 0);
    sample_field(grid, length, sigma, prior, &mut rng)
}

pub(crate) fn sample_field<R: Rng + ?Sized>(
    grid: &GridSpec,
    length: f64,
    sigma: f64,
    prior: Option<(&[f64], f64)>,
    rng: &mut R,
) -> Result<Vec<f64>> {
    grid.validate()?;
    validate_field_args(length, sigma)?;
    let mut field = raw_field(grid, length, rng);
    if field.len() > 1 {
        let mean = field.iter().sum::<f64>() / field.len() as f64;
        field.iter_mut().for_each(|v| *v -= mean);
    }
    field.iter_mut().for_each(|v| *v *= sigma);
    if let Some((prev, rho)) = prior {
        if prev.len() != field.len() {
            return Err(Error::DimensionMismatch {
                context: "prior noise field",
                expected: field.len(),
                actual: prev.len(),
            });
        }
        if !(0.0..1.0).contains(&rho) {
            return Err(Error::invalid("autocorrelation", "must lie in [0, 1)"));
        }
        let fresh_w = (1.0 - rho * rho).sqrt();
        for (v, p) in field.iter_mut().zip(prev) {
            *v = rho * p + fresh_w * *v;
        }
    }
    Ok(field)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_sigma_gives_zero_field() {
        let g = GridSpec::new(10.0, 10.0, 5, 4).unwrap();
        let f = gaussian_random_field(&g, 2.0, 0.0, 1, None).unwrap();
        assert!(f.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn same_seed_same_field() {
        let g = GridSpec::new(10.0, 6.0, 7, 3).unwrap();
        let a = gaussian_random_field(&g, 2.0, 1.3, 99, None).unwrap();
        let b = gaussian_random_field(&g, 2.0, 1.3, 99, None).unwrap();
        let c = gaussian_random_field(&g, 2.0, 1.3, 100, None).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let mean = a.iter().sum::<f64>() / a.len() as f64;
        assert!(mean.abs() < 1e-14);
    }

    #[test]
    fn prior_blending() {
        let g = GridSpec::new(10.0, 1.0, 10, 1).unwrap();
        let prior = gaussian_random_field(&g, 1.0, 1.0, 5, None).unwrap();
        let fresh = gaussian_random_field(&g, 1.0, 1.0, 6, None).unwrap();
        let blended = gaussian_random_field(&g, 1.0, 1.0, 6, Some((&prior, 0.9))).unwrap();
        for k in 0..10 {
            let expected = 0.9 * prior[k] + (1.0 - 0.81f64).sqrt() * fresh[k];
            assert!((blended[k] - expected).abs() < 1e-14);
        }
        assert!(gaussian_random_field(&g, 1.0, 1.0, 6, Some((&prior, 1.0))).is_err());
        assert!(gaussian_random_field(&g, 1.0, 1.0, 6, Some((&prior[..3], 0.5))).is_err());
    }

    #[test]
    fn rejects_negative_sigma() {
        let g = GridSpec::new(1.0, 1.0, 2, 2).unwrap();
        assert!(gaussian_random_field(&g, 1.0, -1.0, 0, None).is_err());
        assert!(gaussian_random_field(&g, 0.0, 1.0, 0, None).is_err());
    }

    #[test]
    fn empirical_correlation_at_one_length() {
        // 64 x 64 grid of unit cells, correlation length 8 cells.
        let g = GridSpec::new(64.0, 64.0, 64, 64).unwrap();
        let lag = 8;
        let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
        for r in 0..200u64 {
            let f = gaussian_random_field(&g, 8.0, 1.0, 1000 + r, None).unwrap();
            for j in 0..64 {
                for i in 0..64 - lag {
                    let a = f[j * 64 + i];
                    let b = f[j * 64 + i + lag];
                    sxy += a * b;
                    sxx += a * a;
                    syy += b * b;
                }
            }
        }
        let corr = sxy / (sxx * syy).sqrt();
        assert!((0.5..=0.72).contains(&corr), "corr = {corr}");
    }
}
