use std::sync::Arc;
use std::time::Duration;

use nalgebra::DVector;

use super::{Model, StepContext};
use crate::error::Result;
use crate::layout::{StateLayout, VarSpec};

/// Model whose step costs a fixed wall-clock time per member, for timing the
/// orchestration itself. The state decays slightly each step so that steps
/// remain observable.
#[derive(Debug, Clone)]
pub struct FixedCost {
    pub cost: Duration,
    layout: Arc<StateLayout>,
}

impl FixedCost {
    pub fn new(n: usize, cost: Duration) -> Result<Self> {
        let layout = crate::layout::build_state_layout([VarSpec::state("x", n)])?;
        Ok(FixedCost {
            cost,
            layout: Arc::new(layout),
        })
    }
}

impl Model for FixedCost {
    fn name(&self) -> &str {
        "fixed_cost"
    }

    fn layout(&self) -> Arc<StateLayout> {
        self.layout.clone()
    }

    fn initial_state(&self) -> Result<DVector<f64>> {
        Ok(DVector::from_fn(self.layout.len(), |i, _| 1.0 + i as f64))
    }

    fn forecast_step_single(&self, state: &mut [f64], dt: f64, ctx: &StepContext) -> Result<()> {
        // A member spread over several workers finishes proportionally sooner.
        std::thread::sleep(self.cost / ctx.threads.max(1) as u32);
        for v in state.iter_mut() {
            *v *= 1.0 - 0.01 * dt;
        }
        Ok(())
    }
}
