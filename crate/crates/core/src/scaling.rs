//! Speedup and efficiency bookkeeping plus a strong/weak scaling harness
//! driven by the fixed-cost model.

use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{initialize_ensemble, EnsembleInitSpec};
use crate::filters::FilterKind;
use crate::models::{FixedCost, Model};
use crate::obs::{ObservationBatch, ObservationOperator};
use crate::orchestrator::{Orchestrator, OrchestratorConfig, ParallelMode, PhaseTimings};
use crate::store::EnsembleStore;

/// Wall time of one configuration next to its baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingRecord {
    pub workers: usize,
    pub wall_time: f64,
    pub baseline_workers: usize,
    pub baseline_time: f64,
}

impl ScalingRecord {
    pub fn new(workers: usize, wall_time: f64, baseline_workers: usize, baseline_time: f64) -> Result<Self> {
        let r = ScalingRecord {
            workers,
            wall_time,
            baseline_workers,
            baseline_time,
        };
        r.validate()?;
        Ok(r)
    }

    /// A run that is its own baseline.
    pub fn baseline(workers: usize, wall_time: f64) -> Result<Self> {
        Self::new(workers, wall_time, workers, wall_time)
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 || self.baseline_workers == 0 {
            return Err(Error::invalid("workers", "must be positive"));
        }
        for t in [self.wall_time, self.baseline_time] {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::invalid("wall_time", "times must be finite and > 0"));
            }
        }
        Ok(())
    }
}

/// Strong scaling: `S = T(base) / T(run)` and `E = S * N_base / N_run`.
pub fn speedup_efficiency(base: &ScalingRecord, run: &ScalingRecord) -> Result<(f64, f64)> {
    base.validate()?;
    run.validate()?;
    let s = base.wall_time / run.wall_time;
    Ok((s, s * base.workers as f64 / run.workers as f64))
}

/// Weak scaling: `E = T(base) / T(run)` with the load per worker held fixed.
pub fn weak_efficiency(base: &ScalingRecord, run: &ScalingRecord) -> Result<f64> {
    base.validate()?;
    run.validate()?;
    Ok(base.wall_time / run.wall_time)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalingMode {
    /// Fixed ensemble, varying workers.
    Strong,
    /// Ensemble grows in proportion to the workers.
    Weak,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    /// Members at the first worker count of the list.
    pub members: usize,
    pub state_dim: usize,
    pub cost: Duration,
    /// Forecast steps before the single analysis.
    pub steps: usize,
    pub mode: ParallelMode,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            members: 32,
            state_dim: 64,
            cost: Duration::from_millis(50),
            steps: 1,
            mode: ParallelMode::Partial,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub members: usize,
    pub record: ScalingRecord,
    pub speedup: f64,
    pub efficiency: f64,
    /// Efficiency of the forecast phase alone.
    pub forecast_efficiency: f64,
    pub phases: PhaseTimings,
    pub total: Duration,
}

impl BenchRow {
    /// Relative gap between the summed phases and the measured total.
    pub fn phase_gap(&self) -> f64 {
        let total = self.total.as_secs_f64();
        (self.phases.total().as_secs_f64() - total).abs() / total
    }
}

/// One timed run: ensemble initialization, `steps` forecast steps and one
/// EnSRF analysis of every other state component.
fn timed_run(cfg: &BenchConfig, members: usize, workers: usize, root: &Path) -> Result<(PhaseTimings, Duration)> {
    let t0 = Instant::now();
    let model: Arc<dyn Model> = Arc::new(FixedCost::new(cfg.state_dim, cfg.cost)?);
    let layout = model.layout();
    let store = EnsembleStore::create(root)?;
    let x0 = model.initial_state()?;
    let spec = EnsembleInitSpec {
        spreads: vec![0.1],
        lengths: vec![1.0],
    };
    let ens = initialize_ensemble(&x0, layout.clone(), &spec, members, cfg.seed)?;
    let mut oc = OrchestratorConfig::new(workers, cfg.mode, FilterKind::Ensrf);
    oc.seed = cfg.seed;
    let mut orch = Orchestrator::new(store, model.clone(), members, 1.0, oc)?;
    orch.initialize(&ens)?;
    let init = t0.elapsed();

    let rows: Vec<usize> = (0..cfg.state_dim).step_by(2).collect();
    let h = ObservationOperator::selection(cfg.state_dim, &rows)?;
    let values = DVector::from_iterator(rows.len(), rows.iter().map(|&r| x0[r]));
    let batch = ObservationBatch::new(
        cfg.steps as f64,
        cfg.steps,
        values,
        DVector::from_element(rows.len(), 1.0),
        rows,
    )?;
    orch.assimilate(&batch, &h)?;
    let total = t0.elapsed();
    let mut phases = orch.timings();
    // The orchestrator's own init time is part of the measured span.
    phases.init = init;
    Ok((phases, total))
}

/// Times the harness at every worker count; the first entry is the baseline.
///
/// Each run uses a fresh store below `scratch`.
pub fn scaling_benchmark(
    cfg: &BenchConfig,
    workers: &[usize],
    mode: ScalingMode,
    scratch: &Path,
) -> Result<Vec<BenchRow>> {
    let Some(&w0) = workers.first() else {
        return Err(Error::invalid("workers", "need at least one worker count"));
    };
    if workers.contains(&0) {
        return Err(Error::invalid("workers", "worker counts must be positive"));
    }
    if cfg.steps == 0 {
        return Err(Error::invalid("steps", "need at least one forecast step"));
    }
    let mut rows = Vec::with_capacity(workers.len());
    let mut base: Option<(f64, f64)> = None;
    for (i, &w) in workers.iter().enumerate() {
        let members = match mode {
            ScalingMode::Strong => cfg.members,
            ScalingMode::Weak => (cfg.members * w).div_ceil(w0),
        };
        let root = scratch.join(format!("run-{i:02}-w{w}"));
        let (phases, total) = timed_run(cfg, members, w, &root)?;
        let t = total.as_secs_f64();
        let tf = phases.forecast.as_secs_f64();
        let (bt, btf) = *base.get_or_insert((t, tf));
        let record = ScalingRecord::new(w, t, w0, bt)?;
        let base_rec = ScalingRecord::baseline(w0, bt)?;
        let (speedup, efficiency, forecast_efficiency) = match mode {
            ScalingMode::Strong => {
                let (s, e) = speedup_efficiency(&base_rec, &record)?;
                let (_, ef) = speedup_efficiency(
                    &ScalingRecord::baseline(w0, btf)?,
                    &ScalingRecord::new(w, tf, w0, btf)?,
                )?;
                (s, e, ef)
            }
            ScalingMode::Weak => {
                let e = weak_efficiency(&base_rec, &record)?;
                (bt / t, e, btf / tf)
            }
        };
        rows.push(BenchRow {
            members,
            record,
            speedup,
            efficiency,
            forecast_efficiency,
            phases,
            total,
        });
    }
    Ok(rows)
}

/// CSV with one row per worker count and the phase breakdown in seconds.
pub fn write_bench_csv(path: &Path, rows: &[BenchRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "workers",
        "members",
        "wall_time",
        "speedup",
        "efficiency",
        "forecast_efficiency",
        "init",
        "forecast",
        "analysis",
        "io",
    ])?;
    for r in rows {
        w.write_record([
            r.record.workers.to_string(),
            r.members.to_string(),
            r.record.wall_time.to_string(),
            r.speedup.to_string(),
            r.efficiency.to_string(),
            r.forecast_efficiency.to_string(),
            r.phases.init.as_secs_f64().to_string(),
            r.phases.forecast.as_secs_f64().to_string(),
            r.phases.analysis.as_secs_f64().to_string(),
            r.phases.io.as_secs_f64().to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_runs_are_fully_efficient() {
        let r = ScalingRecord::baseline(4, 12.5).unwrap();
        assert_eq!(speedup_efficiency(&r, &r).unwrap(), (1.0, 1.0));
        assert_eq!(weak_efficiency(&r, &r).unwrap(), 1.0);
    }

    #[test]
    fn rejects_non_positive_times() {
        assert!(ScalingRecord::new(2, 0.0, 1, 1.0).is_err());
        assert!(ScalingRecord::new(2, 1.0, 1, -1.0).is_err());
        assert!(ScalingRecord::new(0, 1.0, 1, 1.0).is_err());
    }

    #[test]
    fn ideal_halving() {
        let base = ScalingRecord::baseline(2, 100.0).unwrap();
        let run = ScalingRecord::new(4, 50.0, 2, 100.0).unwrap();
        let (s, e) = speedup_efficiency(&base, &run).unwrap();
        assert_eq!(s, 2.0);
        assert_eq!(e, 1.0);
    }
}
