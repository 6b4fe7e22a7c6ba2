use std::sync::Arc;

use nalgebra::DVector;

use super::{Model, StepContext};
use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::layout::{build_state_layout, StateLayout, VarSpec};

/// Cyclic tendencies `(x[i+1] - x[i-2]) x[i-1] - x[i] + F`.
pub fn lorenz96_tendency(x: &[f64], forcing: f64, out: &mut [f64]) {
    let n = x.len();
    for i in 0..n {
        let ip1 = x[(i + 1) % n];
        let im1 = x[(i + n - 1) % n];
        let im2 = x[(i + n - 2) % n];
        out[i] = (ip1 - im2) * im1 - x[i] + forcing;
    }
}

/// One classical RK4 step of the Lorenz-96 system.
pub fn lorenz96_step(x: &[f64], forcing: f64, dt: f64) -> Result<Vec<f64>> {
    let mut out = x.to_vec();
    lorenz96_step_in_place(&mut out, forcing, dt)?;
    Ok(out)
}

fn lorenz96_step_in_place(x: &mut [f64], forcing: f64, dt: f64) -> Result<()> {
    let n = x.len();
    if n < 4 {
        return Err(Error::invalid("lorenz96", "needs at least 4 variables"));
    }
    if !(dt > 0.0 && dt <= 0.5) {
        return Err(Error::invalid("dt", format!("must lie in (0, 0.5], got {dt}")));
    }
    if x.iter().any(|v| !v.is_finite()) || !forcing.is_finite() {
        return Err(Error::NonFinite("lorenz96 input"));
    }
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    lorenz96_tendency(x, forcing, &mut k1);
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * dt * k1[i];
    }
    lorenz96_tendency(&tmp, forcing, &mut k2);
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * dt * k2[i];
    }
    lorenz96_tendency(&tmp, forcing, &mut k3);
    for i in 0..n {
        tmp[i] = x[i] + dt * k3[i];
    }
    lorenz96_tendency(&tmp, forcing, &mut k4);
    for i in 0..n {
        x[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("lorenz96 step"));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Lorenz96 {
    pub forcing: f64,
    /// Steps of length `spinup_dt` taken from the perturbed rest state before
    /// the trajectory starts, so that the truth begins on the attractor.
    pub spinup_steps: usize,
    pub spinup_dt: f64,
    layout: Arc<StateLayout>,
}

impl Lorenz96 {
    pub fn new(n: usize, forcing: f64) -> Result<Self> {
        if n < 4 {
            return Err(Error::invalid("lorenz96", "needs at least 4 variables"));
        }
        let grid = GridSpec::line(n as f64, n)?;
        let layout = build_state_layout([VarSpec::state("x", n).with_grid(grid)])?;
        Ok(Lorenz96 {
            forcing,
            spinup_steps: 1000,
            spinup_dt: 0.05,
            layout: Arc::new(layout),
        })
    }

    pub fn with_spinup(mut self, steps: usize, dt: f64) -> Self {
        self.spinup_steps = steps;
        self.spinup_dt = dt;
        self
    }

    pub fn n(&self) -> usize {
        self.layout.len()
    }
}

impl Model for Lorenz96 {
    fn name(&self) -> &str {
        "lorenz96"
    }

    fn layout(&self) -> Arc<StateLayout> {
        self.layout.clone()
    }

    fn initial_state(&self) -> Result<DVector<f64>> {
        let mut x = vec![self.forcing; self.n()];
        x[0] += 0.01;
        for _ in 0..self.spinup_steps {
            lorenz96_step_in_place(&mut x, self.forcing, self.spinup_dt)?;
        }
        Ok(DVector::from_vec(x))
    }

    fn forecast_step_single(&self, state: &mut [f64], dt: f64, _ctx: &StepContext) -> Result<()> {
        lorenz96_step_in_place(state, self.forcing, dt)
    }
}
