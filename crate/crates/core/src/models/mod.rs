//! Forecast models and the contract the orchestrator drives them through.

mod flowline;
mod lorenz96;
mod synthetic;

use std::sync::Arc;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::StateLayout;

pub use flowline::{flowline_step, Flowline, FlowlineParams, FlowlineStep};
pub use lorenz96::{lorenz96_step, lorenz96_tendency, Lorenz96};
pub use synthetic::FixedCost;

/// Per-call context handed to [`Model::forecast_step_single`].
#[derive(Debug, Clone, Copy)]
pub struct StepContext {
    pub member: usize,
    pub step: usize,
    /// Workers assigned to this member; above 1 only when members are fewer
    /// than workers.
    pub threads: usize,
}

impl StepContext {
    pub fn serial(member: usize, step: usize) -> Self {
        StepContext {
            member,
            step,
            threads: 1,
        }
    }
}

/// What a model has to provide to be assimilated.
///
/// `forecast_step_single` must be deterministic in `(state, dt, ctx.member)`
/// and must leave parameter rows untouched; the orchestrator checks both.
pub trait Model: Send + Sync {
    fn name(&self) -> &str;

    fn layout(&self) -> Arc<StateLayout>;

    /// True initial condition, parameters included.
    fn initial_state(&self) -> Result<DVector<f64>>;

    /// Advances one member by one step of length `dt`, in place.
    fn forecast_step_single(&self, state: &mut [f64], dt: f64, ctx: &StepContext) -> Result<()>;

    fn generate_true_state(&self, steps: usize, dt: f64) -> Result<Trajectory> {
        let x0 = self.initial_state()?;
        let mut traj = Trajectory::new(0.0, dt, x0.clone());
        let mut x = x0;
        for k in 0..steps {
            self.forecast_step_single(x.as_mut_slice(), dt, &StepContext::serial(0, k))?;
            traj.push(x.clone());
        }
        Ok(traj)
    }

    fn generate_nurged_state(&self, biases: &[BiasSpec]) -> Result<DVector<f64>> {
        let mut x = self.initial_state()?;
        apply_biases(&self.layout(), &mut x, biases)?;
        Ok(x)
    }
}

/// State history sampled every `dt` from `t0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    t0: f64,
    dt: f64,
}

impl Trajectory {
    pub fn new(t0: f64, dt: f64, initial: DVector<f64>) -> Self {
        Trajectory {
            times: vec![t0],
            states: vec![initial],
            t0,
            dt,
        }
    }

    pub fn push(&mut self, state: DVector<f64>) {
        let k = self.states.len();
        self.times.push(self.time_of(k));
        self.states.push(state);
    }

    pub fn time_of(&self, step: usize) -> f64 {
        self.t0 + step as f64 * self.dt
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state(&self, step: usize) -> &[f64] {
        self.states[step].as_slice()
    }
}

/// Deliberate error applied to the true initial state to build the first guess.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum BiasSpec {
    /// Multiply every entry of `variable` by `factor`.
    Scale { variable: String, factor: f64 },
    /// Add `value` to every entry of `variable`.
    Offset { variable: String, value: f64 },
    /// Add a linear ramp that starts at `amplitude` on the first node and
    /// falls to zero at `fraction` of the variable's extent.
    Bump {
        variable: String,
        amplitude: f64,
        fraction: f64,
    },
}

impl BiasSpec {
    pub fn variable(&self) -> &str {
        match self {
            BiasSpec::Scale { variable, .. }
            | BiasSpec::Offset { variable, .. }
            | BiasSpec::Bump { variable, .. } => variable,
        }
    }
}

pub fn apply_biases(layout: &StateLayout, x: &mut DVector<f64>, biases: &[BiasSpec]) -> Result<()> {
    for bias in biases {
        let range = layout.range(bias.variable())?;
        let slice = &mut x.as_mut_slice()[range];
        match bias {
            BiasSpec::Scale { factor, .. } => slice.iter_mut().for_each(|v| *v *= factor),
            BiasSpec::Offset { value, .. } => slice.iter_mut().for_each(|v| *v += value),
            BiasSpec::Bump {
                amplitude,
                fraction,
                ..
            } => {
                if !(0.0..=1.0).contains(fraction) {
                    return Err(Error::invalid("bump fraction", "must lie in [0, 1]"));
                }
                let width = ((slice.len() as f64) * fraction).ceil() as usize;
                for (k, v) in slice.iter_mut().take(width).enumerate() {
                    *v += amplitude * (1.0 - k as f64 / width as f64);
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{build_state_layout, VarSpec};

    fn layout() -> StateLayout {
        build_state_layout([VarSpec::state("h", 8), VarSpec::parameter("smb", 1)]).unwrap()
    }

    #[test]
    fn empty_bias_list_is_identity() {
        let mut x = DVector::from_fn(9, |i, _| i as f64);
        let before = x.clone();
        apply_biases(&layout(), &mut x, &[]).unwrap();
        assert_eq!(x, before);
    }

    #[test]
    fn smb_scale() {
        let mut x = DVector::from_element(9, 100.0);
        x[8] = 1.7;
        apply_biases(
            &layout(),
            &mut x,
            &[BiasSpec::Scale {
                variable: "smb".into(),
                factor: 0.1,
            }],
        )
        .unwrap();
        assert!((x[8] - 0.17).abs() < 1e-15);
        assert_eq!(x[0], 100.0);
    }

    #[test]
    fn bump_peaks_at_amplitude() {
        let mut x = DVector::zeros(9);
        apply_biases(
            &layout(),
            &mut x,
            &[BiasSpec::Bump {
                variable: "h".into(),
                amplitude: -350.0,
                fraction: 0.25,
            }],
        )
        .unwrap();
        let max_dev = x.iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert_eq!(max_dev, 350.0);
        assert!(x.iter().skip(2).all(|&v| v == 0.0));
    }

    #[test]
    fn unknown_variable_rejected() {
        let mut x = DVector::zeros(9);
        let err = apply_biases(
            &layout(),
            &mut x,
            &[BiasSpec::Offset {
                variable: "nope".into(),
                value: 1.0,
            }],
        );
        assert!(matches!(err, Err(Error::UnknownVariable(_))));
    }
}
