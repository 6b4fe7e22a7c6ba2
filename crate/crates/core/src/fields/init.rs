use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use super::sample_field;
use crate::ensemble::EnsembleMatrix;
use crate::error::{ensure_dims, Error, Result};
use crate::layout::StateLayout;

/// Per-variable perturbation spec, in layout order.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleInitSpec {
    pub spreads: Vec<f64>,
    pub lengths: Vec<f64>,
}

/// Draws one perturbation for every layout entry of one member.
///
/// Gridded variables get a correlated field; variables without a grid get
/// independent normal draws.
pub(crate) fn member_perturbation(
    layout: &StateLayout,
    spreads: &[f64],
    lengths: &[f64],
    seed: u64,
    tag: &str,
    index: u64,
    member: usize,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(layout.len());
    for (k, entry) in layout.entries().iter().enumerate() {
        let mut rng = crate::rng::stream_rng(
            seed,
            &format!("{tag}/{}", entry.name),
            index,
            member as u64,
        );
        match &entry.grid {
            Some(grid) => {
                out.extend(sample_field(grid, lengths[k], spreads[k], None, &mut rng)?);
            }
            None => out.extend(
                (0..entry.length).map(|_| spreads[k] * rng.sample::<f64, _>(StandardNormal)),
            ),
        }
    }
    Ok(out)
}

pub(crate) fn validate_spec(layout: &StateLayout, spreads: &[f64], lengths: &[f64]) -> Result<()> {
    ensure_dims("per-variable spreads", layout.entries().len(), spreads.len())?;
    ensure_dims("per-variable lengths", layout.entries().len(), lengths.len())?;
    if spreads.iter().any(|&s| !(s >= 0.0 && s.is_finite())) {
        return Err(Error::invalid("spreads", "must be finite and >= 0"));
    }
    if lengths.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
        return Err(Error::invalid("lengths", "must be finite and > 0"));
    }
    Ok(())
}

/// Column `i` is `guess` plus an independent per-variable field draw.
pub fn initialize_ensemble(
    guess: &DVector<f64>,
    layout: Arc<StateLayout>,
    spec: &EnsembleInitSpec,
    members: usize,
    seed: u64,
) -> Result<EnsembleMatrix> {
    ensure_dims("initial guess", layout.len(), guess.len())?;
    validate_spec(&layout, &spec.spreads, &spec.lengths)?;
    if members < 2 {
        return Err(Error::TooFewMembers {
            required: 2,
            actual: members,
        });
    }
    let mut data = DMatrix::zeros(layout.len(), members);
    for i in 0..members {
        let pert = member_perturbation(&layout, &spec.spreads, &spec.lengths, seed, "init", 0, i)?;
        for (r, p) in pert.into_iter().enumerate() {
            data[(r, i)] = guess[r] + p;
        }
    }
    EnsembleMatrix::new(data, layout)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::ensemble_spread;
    use crate::grid::GridSpec;
    use crate::layout::{build_state_layout, VarSpec};

    fn icepack_like() -> Arc<StateLayout> {
        let g = GridSpec::new(5000.0, 1200.0, 12, 8).unwrap();
        Arc::new(
            build_state_layout([
                VarSpec::state("h", 96).with_grid(g),
                VarSpec::state("u", 96).with_grid(g),
                VarSpec::state("v", 96).with_grid(g),
                VarSpec::parameter("smb", 96).with_grid(g),
            ])
            .unwrap(),
        )
    }

    #[test]
    fn zero_spread_copies_guess() {
        let layout = icepack_like();
        let guess = DVector::from_fn(layout.len(), |i, _| i as f64 * 0.5);
        let spec = EnsembleInitSpec {
            spreads: vec![0.0; 4],
            lengths: vec![96.0; 4],
        };
        let e = initialize_ensemble(&guess, layout, &spec, 5, 1).unwrap();
        for col in e.data().column_iter() {
            assert_eq!(col, guess);
        }
    }

    #[test]
    fn per_variable_spreads_applied() {
        let layout = icepack_like();
        let guess = DVector::zeros(layout.len());
        let spec = EnsembleInitSpec {
            spreads: vec![0.8, 0.4, 0.01, 0.08],
            lengths: vec![96.0, 96.0, 96.0, 75.0],
        };
        let e = initialize_ensemble(&guess, layout.clone(), &spec, 40, 2).unwrap();
        let spread = ensemble_spread(&e);
        for (k, sigma) in spec.spreads.iter().enumerate() {
            let r = layout.range_at(k);
            let mean_spread = spread.rows(r.start, r.len()).mean();
            assert!(
                (mean_spread / sigma - 1.0).abs() < 0.25,
                "variable {k}: {mean_spread} vs {sigma}"
            );
        }
    }

    #[test]
    fn sample_spread_near_sigma() {
        let g = GridSpec::line(30.0, 30).unwrap();
        let layout = Arc::new(build_state_layout([VarSpec::state("x", 30).with_grid(g)]).unwrap());
        let spec = EnsembleInitSpec {
            spreads: vec![1.0],
            lengths: vec![0.5],
        };
        let e = initialize_ensemble(&DVector::zeros(30), layout, &spec, 40, 3).unwrap();
        for s in ensemble_spread(&e).iter() {
            assert!((0.6..=1.4).contains(s), "row spread {s}");
        }
        let avg = ensemble_spread(&e).mean();
        assert!((0.75..=1.25).contains(&avg));
    }

    #[test]
    fn mismatched_spec_rejected() {
        let layout = icepack_like();
        let spec = EnsembleInitSpec {
            spreads: vec![1.0; 3],
            lengths: vec![1.0; 4],
        };
        assert!(initialize_ensemble(&DVector::zeros(layout.len()), layout, &spec, 5, 0).is_err());
    }
}
