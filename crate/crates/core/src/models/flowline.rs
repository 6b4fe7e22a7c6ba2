//! Minimal 1D marine-terminating flowline used as a joint-estimation testbed.
//!
//! Thickness is advected with first-order upwind fluxes
//! `dh/dt = smb(x) - d(u h)/dx`, and the velocity is diagnosed from a power
//! law of the driving stress. With a fixed surface slope the driving stress is
//! proportional to thickness, so `u = u_ref * (h / h_ref)^n`. The ice divide
//! at `x = 0` carries no flux; ice leaves through the calving front at `x = L`.
//!
//! The accumulation profile is `smb(x) = a * (1 + g x / L)` where `a` is the
//! estimated parameter (inflow accumulation) and `g` the fixed relative
//! downstream gradient. Scaling `a` therefore scales the inflow rate and the
//! downstream change together.

use std::sync::Arc;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::{Model, StepContext};
use crate::error::{ensure_dims, Error, Result};
use crate::grid::GridSpec;
use crate::layout::{build_state_layout, StateLayout, VarSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowlineParams {
    pub length: f64,
    pub cells: usize,
    pub u_ref: f64,
    pub h_ref: f64,
    pub glen_n: f64,
    /// Inflow accumulation rate of the true state (m/yr).
    pub smb_inflow: f64,
    /// Relative downstream change, `smb(L) = smb_inflow * (1 + gradient)`.
    pub smb_gradient: f64,
}

impl Default for FlowlineParams {
    fn default() -> Self {
        FlowlineParams {
            length: 50_000.0,
            cells: 50,
            u_ref: 50.0,
            h_ref: 500.0,
            glen_n: 3.0,
            smb_inflow: 1.7,
            smb_gradient: -2.7 / 1.7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowlineStep {
    pub h: Vec<f64>,
    pub u: Vec<f64>,
    /// Surface mass balance actually applied per cell over the step (m);
    /// ablation is limited to the ice available.
    pub applied_smb: Vec<f64>,
    /// Volume per unit width leaving through the front during the step.
    pub outflow: f64,
}

impl FlowlineParams {
    pub fn dx(&self) -> f64 {
        self.length / self.cells as f64
    }

    pub fn velocity(&self, h: f64) -> f64 {
        self.u_ref * (h.max(0.0) / self.h_ref).powf(self.glen_n)
    }

    pub fn smb_profile(&self, inflow: f64) -> Vec<f64> {
        let dx = self.dx();
        (0..self.cells)
            .map(|i| {
                let x = (i as f64 + 0.5) * dx;
                inflow * (1.0 + self.smb_gradient * x / self.length)
            })
            .collect()
    }

    /// Thickness whose upwind flux balances the accumulation profile.
    pub fn steady_thickness(&self, inflow: f64) -> Vec<f64> {
        let dx = self.dx();
        let smb = self.smb_profile(inflow);
        let mut flux = 0.0;
        smb.iter()
            .map(|a| {
                flux += a * dx;
                // q = u h = u_ref h_ref (h / h_ref)^(n+1)
                let q = flux.max(0.0);
                self.h_ref * (q / (self.u_ref * self.h_ref)).powf(1.0 / (self.glen_n + 1.0))
            })
            .collect()
    }
}

/// One explicit upwind step. `smb` holds the per-cell rate (m/yr).
pub fn flowline_step(
    params: &FlowlineParams,
    h: &[f64],
    smb: &[f64],
    dt: f64,
) -> Result<FlowlineStep> {
    ensure_dims("flowline thickness", params.cells, h.len())?;
    ensure_dims("flowline smb", params.cells, smb.len())?;
    if h.iter().chain(smb).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("flowline input"));
    }
    if h.iter().any(|&v| v < 0.0) {
        return Err(Error::invalid("thickness", "must be non-negative"));
    }
    let dx = params.dx();
    let u: Vec<f64> = h.iter().map(|&v| params.velocity(v)).collect();
    let courant = u.iter().fold(0.0f64, |m, &v| m.max(v)) * dt / dx;
    if courant > 1.0 {
        return Err(Error::Cfl { courant });
    }
    // Face i carries flux out of cell i; face -1 (the divide) carries none.
    let flux: Vec<f64> = h.iter().zip(&u).map(|(a, b)| a * b).collect();
    let mut h_new = Vec::with_capacity(h.len());
    let mut applied = Vec::with_capacity(h.len());
    for i in 0..h.len() {
        let inflow = if i == 0 { 0.0 } else { flux[i - 1] };
        let transported = h[i] + dt / dx * (inflow - flux[i]);
        // Courant <= 1 keeps `transported` non-negative; ablation is capped.
        let mass = (smb[i] * dt).max(-transported);
        applied.push(mass);
        h_new.push(transported + mass);
    }
    let u_new = h_new.iter().map(|&v| params.velocity(v)).collect();
    Ok(FlowlineStep {
        h: h_new,
        u: u_new,
        applied_smb: applied,
        outflow: flux[h.len() - 1] * dt,
    })
}

/// Flowline with state `[h, u]` and the scalar inflow accumulation as the
/// trailing parameter `smb`.
#[derive(Debug, Clone)]
pub struct Flowline {
    pub params: FlowlineParams,
    layout: Arc<StateLayout>,
}

impl Flowline {
    pub fn new(params: FlowlineParams) -> Result<Self> {
        if params.cells < 2 {
            return Err(Error::invalid("flowline cells", "need at least 2 cells"));
        }
        let grid = GridSpec::line(params.length, params.cells)?;
        let layout = build_state_layout([
            VarSpec::state("h", params.cells).with_grid(grid),
            VarSpec::state("u", params.cells).with_grid(grid),
            VarSpec::parameter("smb", 1),
        ])?;
        Ok(Flowline {
            params,
            layout: Arc::new(layout),
        })
    }
}

impl Model for Flowline {
    fn name(&self) -> &str {
        "flowline"
    }

    fn layout(&self) -> Arc<StateLayout> {
        self.layout.clone()
    }

    fn initial_state(&self) -> Result<DVector<f64>> {
        let p = &self.params;
        let h = p.steady_thickness(p.smb_inflow);
        let u: Vec<f64> = h.iter().map(|&v| p.velocity(v)).collect();
        let mut x = h;
        x.extend(u);
        x.push(p.smb_inflow);
        Ok(DVector::from_vec(x))
    }

    fn forecast_step_single(&self, state: &mut [f64], dt: f64, _ctx: &StepContext) -> Result<()> {
        let nc = self.params.cells;
        let inflow = state[2 * nc];
        let smb = self.params.smb_profile(inflow);
        // Analysis updates may push thickness slightly negative.
        let h: Vec<f64> = state[..nc].iter().map(|v| v.max(0.0)).collect();
        let out = flowline_step(&self.params, &h, &smb, dt)?;
        state[..nc].copy_from_slice(&out.h);
        state[nc..2 * nc].copy_from_slice(&out.u);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small() -> FlowlineParams {
        FlowlineParams {
            cells: 10,
            length: 10_000.0,
            ..Default::default()
        }
    }

    #[test]
    fn no_flow_no_smb_is_identity() {
        let p = FlowlineParams {
            u_ref: 0.0,
            ..small()
        };
        let h = vec![100.0; 10];
        let out = flowline_step(&p, &h, &[0.0; 10], 1.0).unwrap();
        assert_eq!(out.h, h);
    }

    #[test]
    fn uniform_smb_without_flow() {
        let p = FlowlineParams {
            u_ref: 0.0,
            ..small()
        };
        let h = vec![50.0; 10];
        let out = flowline_step(&p, &h, &[0.3; 10], 2.0).unwrap();
        assert!(out.h.iter().all(|&v| (v - 50.6).abs() < 1e-12));
    }

    #[test]
    fn mass_budget_closes() {
        let p = small();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let h: Vec<f64> = (0..10).map(|_| rng.gen_range(0.0..600.0)).collect();
            let smb: Vec<f64> = (0..10).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let out = flowline_step(&p, &h, &smb, 1.0).unwrap();
            let dx = p.dx();
            let before: f64 = h.iter().sum::<f64>() * dx;
            let after: f64 = out.h.iter().sum::<f64>() * dx;
            let source: f64 = out.applied_smb.iter().sum::<f64>() * dx;
            let expected = before + source - out.outflow;
            assert!(((after - expected) / before).abs() <= 1e-10);
            assert!(out.h.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn cfl_violation_reported() {
        let p = small();
        let h = vec![2000.0; 10];
        assert!(matches!(
            flowline_step(&p, &h, &[0.0; 10], 10.0),
            Err(Error::Cfl { .. })
        ));
    }

    #[test]
    fn steady_state_is_nearly_stationary() {
        let model = Flowline::new(FlowlineParams::default()).unwrap();
        let x0 = model.initial_state().unwrap();
        let mut x = x0.clone();
        for k in 0..10 {
            model
                .forecast_step_single(x.as_mut_slice(), 1.0, &StepContext::serial(0, k))
                .unwrap();
        }
        let nc = model.params.cells;
        let drift = (0..nc).map(|i| (x[i] - x0[i]).abs()).fold(0.0, f64::max);
        assert!(drift < 1e-6, "drift {drift}");
        assert_eq!(x[2 * nc], x0[2 * nc]);
    }
}
