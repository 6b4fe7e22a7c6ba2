use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::sample_field;
use crate::error::{Error, Result};
use crate::grid::GridSpec;

/// Model-noise memory of one ensemble member.
///
/// Each draw blends the previous field of the variable with a fresh one, so
/// noise evolves slowly between forecast steps. The state is persisted between
/// steps and reproduces the same future draws after a reload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseState {
    pub previous_field: BTreeMap<String, Vec<f64>>,
    pub rng_seed: u64,
    pub autocorrelation: f64,
}

impl NoiseState {
    pub fn new(rng_seed: u64, autocorrelation: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&autocorrelation) {
            return Err(Error::invalid("autocorrelation", "must lie in [0, 1)"));
        }
        Ok(NoiseState {
            previous_field: BTreeMap::new(),
            rng_seed,
            autocorrelation,
        })
    }

    /// Draws the noise field of `variable` for `(member, step)` and remembers it.
    pub fn next_field(
        &mut self,
        variable: &str,
        grid: &GridSpec,
        length: f64,
        sigma: f64,
        member: usize,
        step: usize,
    ) -> Result<Vec<f64>> {
        let mut rng = crate::rng::stream_rng(
            self.rng_seed,
            &format!("noise/{variable}"),
            step as u64,
            member as u64,
        );
        let prior = self
            .previous_field
            .get(variable)
            .map(|p| (p.as_slice(), self.autocorrelation));
        let field = sample_field(grid, length, sigma, prior, &mut rng)?;
        self.previous_field
            .insert(variable.to_string(), field.clone());
        Ok(field)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
