//! Parallel forecast/analysis cycling over an [`EnsembleStore`].
//!
//! Forecast: members are independent and run on a worker pool following a
//! [`RoundSchedule`]. In partial mode the coordinator reads the ensemble,
//! hands columns to workers and writes the assembled result; in full mode
//! every worker reads and writes its own member columns directly.
//!
//! Analysis: every filter reduces to `X^a = X^f T` with an `Ne x Ne` transform
//! built from `H X^f`. In partial mode the coordinator forms `T` and the
//! workers apply it to member-column chunks. In full mode each worker owns a
//! block of state rows, contributes its share of `H X^f` to a fixed-order tree
//! sum, builds `T` itself from the reduced product, and updates its rows in
//! place. Inflation, parameter relaxation and the bounded parameter refresh
//! are row-local, so both modes run the same per-row code.
//!
//! Dataset names: `ensemble/<t>` holds the ensemble at step `t` (the analysis
//! when `t` is an observation step), `forecast/<t>` the forecast at an
//! observation step, `mean/<t>` and `forecast_mean/<t>` their row means, and
//! `noise/<variable>/<t>` the model-noise memory after the forecast ending at `t`.

use std::ops::Range;
use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::{all_finite, inflate_rows_in_place, row_mean, validate_inflation, EnsembleMatrix};
use crate::error::{ensure_dims, Error, Result};
use crate::fields::{innovation_strategy_anomaly_observed, innovation_strategy_field, NoiseState};
use crate::filters::{analysis_transform, senkf_analysis_direct_localized, FilterKind, PerturbationSet};
use crate::layout::{StateLayout, VarKind};
use crate::localization::{adaptive_localization_lengths, gain_taper, LocalizationMode, LocalizationSpec};
use crate::models::{Model, StepContext};
use crate::obs::{ObservationBatch, ObservationOperator};
use crate::params::{estimate_bounds, refresh_rows, relaxation_bias, relaxation_draw, RelaxationParams};
use crate::schedule::{schedule_rounds, RoundSchedule};
use crate::store::{step_name, EnsembleStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParallelMode {
    #[default]
    Partial,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InnovationKind {
    #[default]
    Anomaly,
    Field,
}

/// Temporally correlated additive model noise on state variables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelNoise {
    /// Per layout entry; parameter entries are ignored.
    pub sigma: Vec<f64>,
    pub lengths: Vec<f64>,
    #[serde(default = "default_autocorrelation")]
    pub autocorrelation: f64,
}

fn default_autocorrelation() -> f64 {
    0.9
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrchestratorConfig {
    pub workers: usize,
    pub mode: ParallelMode,
    pub filter: FilterKind,
    pub innovation: InnovationKind,
    pub state_inflation: f64,
    pub param_inflation: f64,
    pub localization: LocalizationSpec,
    /// Per layout entry, used by the field innovation strategy.
    pub field_lengths: Vec<f64>,
    pub model_noise: Option<ModelNoise>,
    /// Spread floor of the bounded parameter refresh; `None` disables it.
    pub param_spread_floor: Option<f64>,
    pub relaxation: Option<RelaxationParams>,
    pub seed: u64,
}

impl OrchestratorConfig {
    pub fn new(workers: usize, mode: ParallelMode, filter: FilterKind) -> Self {
        OrchestratorConfig {
            workers,
            mode,
            filter,
            innovation: InnovationKind::Anomaly,
            state_inflation: 1.0,
            param_inflation: 1.0,
            localization: LocalizationSpec::default(),
            field_lengths: Vec::new(),
            model_noise: None,
            param_spread_floor: None,
            relaxation: None,
            seed: 0,
        }
    }

    pub fn validate(&self, layout: &StateLayout) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::invalid("workers", "need at least one worker"));
        }
        validate_inflation(self.state_inflation)?;
        validate_inflation(self.param_inflation)?;
        self.localization.validate()?;
        if self.localization.is_active() {
            if self.filter != FilterKind::Senkf {
                return Err(Error::invalid(
                    "localization",
                    "only the stochastic filter has a localized (direct) path",
                ));
            }
            if self.mode == ParallelMode::Full {
                return Err(Error::invalid(
                    "localization",
                    "the localized direct update runs in partial mode only",
                ));
            }
        }
        if self.filter == FilterKind::Senkf && self.innovation == InnovationKind::Field {
            ensure_dims("field innovation lengths", layout.entries().len(), self.field_lengths.len())?;
        }
        if let Some(noise) = &self.model_noise {
            ensure_dims("model noise sigmas", layout.entries().len(), noise.sigma.len())?;
            ensure_dims("model noise lengths", layout.entries().len(), noise.lengths.len())?;
            if !(0.0..1.0).contains(&noise.autocorrelation) {
                return Err(Error::invalid("model_noise.autocorrelation", "must lie in [0, 1)"));
            }
        }
        if let Some(floor) = self.param_spread_floor {
            if !(floor >= 0.0 && floor.is_finite()) {
                return Err(Error::invalid("param_spread_floor", "must be finite and >= 0"));
            }
        }
        if let Some(rp) = &self.relaxation {
            rp.validate()?;
        }
        Ok(())
    }
}

/// Wall time per phase, accumulated over the run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub init: Duration,
    pub forecast: Duration,
    pub analysis: Duration,
    pub io: Duration,
}

impl PhaseTimings {
    pub fn total(&self) -> Duration {
        self.init + self.forecast + self.analysis + self.io
    }
}

/// What one analysis did, for diagnostics and tests.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisReport {
    pub step: usize,
    pub transform: Option<DMatrix<f64>>,
    /// Largest elementwise difference between the transforms formed by the
    /// workers (zero in partial mode).
    pub transform_spread: f64,
    /// `y - H x_bar` of the forecast.
    pub innovation: DVector<f64>,
    pub alpha: Option<f64>,
    pub refresh_fallback: Vec<bool>,
    pub refresh_shrunk: Vec<bool>,
}

/// Member index, its forecast trajectory and its advanced noise state.
type MemberOutput = (usize, Vec<Vec<f64>>, Option<NoiseState>);

/// Analysis rows, forecast rows and post-processing flags of one row block.
type RowBlockOutput = (DMatrix<f64>, DMatrix<f64>, RowOutcome);

pub type PostAnalysisHook = Box<dyn FnMut(&mut DMatrix<f64>, &StateLayout, usize) -> Result<()> + Send + Sync>;

pub struct Orchestrator {
    store: EnsembleStore,
    model: Arc<dyn Model>,
    layout: Arc<StateLayout>,
    cfg: OrchestratorConfig,
    pool: rayon::ThreadPool,
    schedule: RoundSchedule,
    members: usize,
    dt: f64,
    step: Option<usize>,
    cycle: u64,
    noise: Vec<NoiseState>,
    prev_params: Option<DMatrix<f64>>,
    hook: Option<PostAnalysisHook>,
    timings: PhaseTimings,
}

/// Splits `0..n` into `parts` contiguous ranges, the first `n mod parts` one longer.
pub fn split_ranges(n: usize, parts: usize) -> Vec<Range<usize>> {
    let parts = parts.max(1);
    let base = n / parts;
    let extra = n % parts;
    let mut start = 0;
    (0..parts)
        .map(|p| {
            let len = base + usize::from(p < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .filter(|r| !r.is_empty())
        .collect()
}

/// Sum of partial products in a fixed pairwise order.
fn tree_sum(mut parts: Vec<DMatrix<f64>>) -> DMatrix<f64> {
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(a) = it.next() {
            match it.next() {
                Some(b) => next.push(a + b),
                None => next.push(a),
            }
        }
        parts = next;
    }
    parts.pop().expect("at least one partial product")
}

fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    crate::linalg::max_abs(&(a - b))
}

/// Everything a worker needs to finish its rows after the transform.
struct RowContext<'a> {
    layout: &'a StateLayout,
    cfg: &'a OrchestratorConfig,
    alpha: Option<f64>,
    prev_params: Option<&'a DMatrix<f64>>,
    cycle: u64,
}

struct RowOutcome {
    fallback: Vec<bool>,
    shrunk: Vec<bool>,
}

impl RowContext<'_> {
    /// Relaxation, inflation and bounded refresh of rows `rows` (global
    /// indices) given their forecast and analysis values.
    fn finish(&self, rows: &Range<usize>, xf: &DMatrix<f64>, xa: &mut DMatrix<f64>) -> Result<RowOutcome> {
        let params = self.layout.param_rows();
        let local = |r: usize| r - rows.start;
        let p_lo = rows.start.max(params.start);
        let p_hi = rows.end.min(params.end);
        let state_hi = rows.end.min(params.start);

        if let Some(alpha) = self.alpha {
            for r in p_lo..p_hi {
                let (f, mut a) = (xf.row(local(r)), xa.row_mut(local(r)));
                for j in 0..a.len() {
                    a[j] = f[j] + alpha * (a[j] - f[j]);
                }
            }
        }
        if rows.start < state_hi {
            inflate_rows_in_place(xa, self.cfg.state_inflation, 0..local(state_hi));
        }
        if p_lo < p_hi {
            inflate_rows_in_place(xa, self.cfg.param_inflation, local(p_lo)..local(p_hi));
        }
        let mut outcome = RowOutcome {
            fallback: Vec::new(),
            shrunk: Vec::new(),
        };
        if let (Some(floor), true) = (self.cfg.param_spread_floor, p_lo < p_hi) {
            let block = xa.rows(local(p_lo), p_hi - p_lo).into_owned();
            let prev = self
                .prev_params
                .map(|m| m.rows(p_lo - params.start, p_hi - p_lo).into_owned());
            let floors = vec![floor; p_hi - p_lo];
            let bounds = estimate_bounds(&block, prev.as_ref(), None, &floors)?;
            let out = refresh_rows(&block, &bounds, &floors, self.cfg.seed, self.cycle, p_lo - params.start)?;
            xa.rows_mut(local(p_lo), p_hi - p_lo).copy_from(&out.rows);
            outcome.fallback = out.fallback;
            outcome.shrunk = out.shrunk;
        }
        if !all_finite(xa.iter()) {
            return Err(Error::NonFinite("analysis rows"));
        }
        Ok(outcome)
    }
}

impl Orchestrator {
    pub fn new(
        store: EnsembleStore,
        model: Arc<dyn Model>,
        members: usize,
        dt: f64,
        cfg: OrchestratorConfig,
    ) -> Result<Self> {
        let layout = model.layout();
        cfg.validate(&layout)?;
        if members == 0 {
            return Err(Error::TooFewMembers {
                required: 1,
                actual: 0,
            });
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::invalid("dt", "must be finite and > 0"));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .thread_name(|i| format!("enkf-worker-{i}"))
            .build()
            .map_err(|e| Error::invalid("workers", e.to_string()))?;
        let schedule = schedule_rounds(members, cfg.workers)?;
        let noise = match &cfg.model_noise {
            Some(n) => (0..members)
                .map(|i| NoiseState::new(crate::rng::derive_seed(cfg.seed, "model-noise", i as u64), n.autocorrelation))
                .collect::<Result<_>>()?,
            None => Vec::new(),
        };
        Ok(Orchestrator {
            store,
            model,
            layout,
            cfg,
            pool,
            schedule,
            members,
            dt,
            step: None,
            cycle: 0,
            noise,
            prev_params: None,
            hook: None,
            timings: PhaseTimings::default(),
        })
    }

    pub fn store(&self) -> &EnsembleStore {
        &self.store
    }

    pub fn schedule(&self) -> &RoundSchedule {
        &self.schedule
    }

    pub fn timings(&self) -> PhaseTimings {
        self.timings
    }

    pub fn step(&self) -> Option<usize> {
        self.step
    }

    pub fn config(&self) -> &OrchestratorConfig {
        &self.cfg
    }

    /// Registers a callback run on the full analysis ensemble before it is
    /// written (partial mode only).
    pub fn set_post_analysis(&mut self, hook: PostAnalysisHook) -> Result<()> {
        if self.cfg.mode == ParallelMode::Full {
            return Err(Error::invalid(
                "post-analysis hook",
                "needs the assembled ensemble, which only partial mode has",
            ));
        }
        self.hook = Some(hook);
        Ok(())
    }

    /// Writes the initial ensemble as step 0.
    pub fn initialize(&mut self, ensemble: &EnsembleMatrix) -> Result<()> {
        self.initialize_matrix(ensemble.data())
    }

    /// Same as [`Orchestrator::initialize`] from a raw `n x Ne` matrix, which
    /// also admits a single member (forecast only).
    pub fn initialize_matrix(&mut self, data: &DMatrix<f64>) -> Result<()> {
        let t0 = Instant::now();
        ensure_dims("initial ensemble rows", self.layout.len(), data.nrows())?;
        ensure_dims("initial ensemble members", self.members, data.ncols())?;
        if !all_finite(data.iter()) {
            return Err(Error::NonFinite("initial ensemble"));
        }
        if self.step.is_some() {
            return Err(Error::invalid("initialize", "orchestrator already initialized"));
        }
        self.store.write_matrix(&step_name("ensemble", 0), data)?;
        self.store.write_vector(&step_name("mean", 0), &row_mean(data))?;
        if self.layout.has_parameters() {
            let p = self.layout.param_rows();
            self.prev_params = Some(data.rows(p.start, p.len()).into_owned());
        }
        self.step = Some(0);
        self.timings.init += t0.elapsed();
        Ok(())
    }

    fn current(&self) -> Result<usize> {
        self.step
            .ok_or_else(|| Error::invalid("orchestrator", "initialize must be called first"))
    }

    /// Current ensemble as stored.
    pub fn read_ensemble(&self) -> Result<EnsembleMatrix> {
        let t = self.current()?;
        let data = self.store.read_matrix(&step_name("ensemble", t))?;
        EnsembleMatrix::new(data, self.layout.clone())
    }

    /// Forecasts to `to_step` without assimilating.
    pub fn advance(&mut self, to_step: usize) -> Result<()> {
        let from = self.current()?;
        if to_step <= from {
            return Ok(());
        }
        self.run_forecast_phase(from, to_step, "ensemble")?;
        self.step = Some(to_step);
        Ok(())
    }

    /// Forecasts to the batch's step and assimilates it.
    pub fn assimilate(&mut self, batch: &ObservationBatch, h: &ObservationOperator) -> Result<AnalysisReport> {
        let from = self.current()?;
        if batch.step <= from {
            return Err(Error::invalid(
                "observation step",
                format!("batch at step {} is not after the current step {from}", batch.step),
            ));
        }
        ensure_dims("observation operator rows", batch.len(), h.obs_dim())?;
        ensure_dims("observation operator state dimension", self.layout.len(), h.state_dim())?;
        let cycle = self.cycle;
        let wrap = |e: Error| Error::Cycle {
            cycle: cycle as usize,
            source: Box::new(e),
        };
        self.run_forecast_phase(from, batch.step, "forecast").map_err(wrap)?;
        let report = self.run_analysis_phase(batch, h).map_err(wrap)?;
        self.step = Some(batch.step);
        self.cycle += 1;
        Ok(report)
    }

    /// Advances every member from `from` to `to`; the state at `to` goes to
    /// `<last_group>/<to>`, intermediate states to `ensemble/<t>`.
    pub fn run_forecast_phase(&mut self, from: usize, to: usize, last_group: &str) -> Result<()> {
        let names: Vec<String> = (from + 1..=to)
            .map(|t| if t == to { step_name(last_group, t) } else { step_name("ensemble", t) })
            .collect();
        let (n, ne) = (self.layout.len(), self.members);
        let full = self.cfg.mode == ParallelMode::Full;

        let t_io = Instant::now();
        for name in &names {
            self.store.create_dataset(name, n, ne)?;
        }
        let start = step_name("ensemble", from);
        let initial = if full { None } else { Some(self.store.read_matrix(&start)?) };
        self.timings.io += t_io.elapsed();

        let t_fc = Instant::now();
        let model = self.model.clone();
        let layout = self.layout.clone();
        let dt = self.dt;
        let noise_cfg = self.cfg.model_noise.clone();
        let store = self.store.clone();
        let mut noise = std::mem::take(&mut self.noise);
        let mut results: Vec<Option<Vec<Vec<f64>>>> = vec![None; ne];
        let mut noise_slots: Vec<Option<NoiseState>> = noise.drain(..).map(Some).collect();
        let has_noise = !noise_slots.is_empty();

        for round in &self.schedule.rounds {
            let tasks: Vec<(usize, usize, Option<NoiseState>)> = round
                .iter()
                .map(|&i| {
                    let ns = if has_noise { noise_slots[i].take() } else { None };
                    (i, self.schedule.threads_for(i), ns)
                })
                .collect();
            let outputs: Vec<Result<MemberOutput>> = self.pool.install(|| {
                tasks
                    .into_par_iter()
                    .map(|(member, threads, mut ns)| {
                        let x0: Vec<f64> = match &initial {
                            Some(m) => m.column(member).iter().copied().collect(),
                            None => store
                                .read_hyperslab(&start, 0..n, member..member + 1)?
                                .iter()
                                .copied()
                                .collect(),
                        };
                        let states = forecast_member(
                            model.as_ref(),
                            &layout,
                            x0,
                            member,
                            from,
                            to - from,
                            dt,
                            threads,
                            ns.as_mut().zip(noise_cfg.as_ref()),
                        )
                        .map_err(|e| Error::Member {
                            member,
                            source: Box::new(e),
                        })?;
                        if full {
                            for (state, name) in states.iter().zip(&names) {
                                let col = DMatrix::from_column_slice(n, 1, state);
                                store.write_hyperslab(name, 0..n, member..member + 1, &col)?;
                            }
                            Ok((member, Vec::new(), ns))
                        } else {
                            Ok((member, states, ns))
                        }
                    })
                    .collect()
            });
            for out in outputs {
                let (member, states, ns) = out?;
                results[member] = Some(states);
                if has_noise {
                    noise_slots[member] = ns;
                }
            }
        }
        self.noise = noise_slots.into_iter().map(|s| s.expect("noise state returned")).collect();
        self.timings.forecast += t_fc.elapsed();

        let t_io = Instant::now();
        if !full {
            let steps = to - from;
            for (k, name) in names.iter().enumerate() {
                let mut m = DMatrix::zeros(n, ne);
                for (member, r) in results.iter().enumerate() {
                    let states = r.as_ref().expect("member result");
                    m.column_mut(member).copy_from_slice(&states[k]);
                }
                self.store.write_hyperslab(name, 0..n, 0..ne, &m)?;
                let mean_group = if k + 1 == steps && last_group == "forecast" { "forecast_mean" } else { "mean" };
                self.store.write_vector(&step_name(mean_group, from + k + 1), &row_mean(&m))?;
            }
        }
        for name in &names {
            self.store.finalize(name)?;
        }
        if has_noise {
            self.persist_noise(to)?;
        }
        self.timings.io += t_io.elapsed();
        Ok(())
    }

    /// Forecasts `initial` with no assimilation and returns the ensemble
    /// mean at every step in `checkpoints`. Model noise restarts from the
    /// same seeds as the assimilated run, so the two are paired.
    pub fn free_run(&self, initial: &DMatrix<f64>, checkpoints: &[usize]) -> Result<Vec<DVector<f64>>> {
        ensure_dims("free-run ensemble rows", self.layout.len(), initial.nrows())?;
        ensure_dims("free-run members", self.members, initial.ncols())?;
        let Some(&last) = checkpoints.iter().max() else {
            return Ok(Vec::new());
        };
        let noise_cfg = self.cfg.model_noise.as_ref();
        let runs: Vec<Result<Vec<Vec<f64>>>> = self.pool.install(|| {
            (0..self.members)
                .into_par_iter()
                .map(|member| {
                    let mut ns = match noise_cfg {
                        Some(n) => Some(NoiseState::new(
                            crate::rng::derive_seed(self.cfg.seed, "model-noise", member as u64),
                            n.autocorrelation,
                        )?),
                        None => None,
                    };
                    let x0 = initial.column(member).iter().copied().collect();
                    forecast_member(
                        self.model.as_ref(),
                        &self.layout,
                        x0,
                        member,
                        0,
                        last,
                        self.dt,
                        1,
                        ns.as_mut().zip(noise_cfg),
                    )
                    .map_err(|e| Error::Member {
                        member,
                        source: Box::new(e),
                    })
                })
                .collect()
        });
        let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
        Ok(checkpoints
            .iter()
            .map(|&t| {
                let m = DMatrix::from_fn(self.layout.len(), self.members, |r, c| {
                    if t == 0 { initial[(r, c)] } else { runs[c][t - 1][r] }
                });
                row_mean(&m)
            })
            .collect())
    }

    fn persist_noise(&self, step: usize) -> Result<()> {
        for (v, entry) in self.layout.entries().iter().enumerate() {
            if entry.kind != VarKind::State || entry.grid.is_none() {
                continue;
            }
            if self.cfg.model_noise.as_ref().map(|n| n.sigma[v]) == Some(0.0) {
                continue;
            }
            let mut m = DMatrix::zeros(entry.length, self.members);
            for (i, ns) in self.noise.iter().enumerate() {
                if let Some(f) = ns.previous_field.get(&entry.name) {
                    m.column_mut(i).copy_from_slice(f);
                }
            }
            self.store.write_matrix(&format!("noise/{}/{step:06}", entry.name), &m)?;
        }
        Ok(())
    }

    fn relaxation_alpha(&self, innovation: &DVector<f64>, sigma: &DVector<f64>) -> Result<Option<f64>> {
        match &self.cfg.relaxation {
            Some(rp) if self.layout.has_parameters() => {
                let beta = relaxation_bias(innovation, sigma, rp.eta)?;
                let rho = relaxation_draw(self.cfg.seed, self.cycle);
                Ok(Some(rp.alpha(beta, rho)))
            }
            _ => Ok(None),
        }
    }

    /// Analysis of the forecast stored at the batch's step.
    pub fn run_analysis_phase(&mut self, batch: &ObservationBatch, h: &ObservationOperator) -> Result<AnalysisReport> {
        match self.cfg.mode {
            ParallelMode::Partial => self.analysis_partial(batch, h),
            ParallelMode::Full => self.analysis_full(batch, h),
        }
    }

    fn analysis_partial(&mut self, batch: &ObservationBatch, h: &ObservationOperator) -> Result<AnalysisReport> {
        let t = batch.step;
        let (n, ne) = (self.layout.len(), self.members);
        let t_io = Instant::now();
        let xf = self.store.read_matrix(&step_name("forecast", t))?;
        self.timings.io += t_io.elapsed();

        let t_an = Instant::now();
        let hx = h.apply_matrix(&xf)?;
        let innovation = &batch.values - row_mean(&hx);
        let perts = build_perturbations(&self.cfg, &self.layout, ne, self.cycle, batch, h, &hx)?;
        let alpha = self.relaxation_alpha(&innovation, &batch.sigma)?;

        let (mut xa, transform) = if self.cfg.localization.is_active() {
            let e = EnsembleMatrix::new(xf.clone(), self.layout.clone())?;
            let radii = self.localization_radii(&e)?;
            let taper = gain_taper(&self.layout, h, &radii)?;
            let perts = perts.as_ref().expect("stochastic filter has perturbations");
            (senkf_analysis_direct_localized(&e, h, perts, &taper)?.into_data(), None)
        } else {
            let tr = analysis_transform(self.cfg.filter, &hx, &batch.values, &batch.variances(), perts.as_ref())?
                .transform
                .expect("filters return a transform");
            let chunks = split_ranges(ne, self.cfg.workers);
            let parts: Vec<(Range<usize>, DMatrix<f64>)> = self.pool.install(|| {
                chunks
                    .into_par_iter()
                    .map(|c| {
                        let tc = tr.columns(c.start, c.len());
                        (c.clone(), &xf * tc)
                    })
                    .collect()
            });
            let mut xa = DMatrix::zeros(n, ne);
            for (c, part) in parts {
                xa.columns_mut(c.start, c.len()).copy_from(&part);
            }
            (xa, Some(tr))
        };

        let ctx = RowContext {
            layout: &self.layout,
            cfg: &self.cfg,
            alpha,
            prev_params: self.prev_params.as_ref(),
            cycle: self.cycle,
        };
        let outcome = ctx.finish(&(0..n), &xf, &mut xa)?;
        if let Some(hook) = self.hook.as_mut() {
            hook(&mut xa, &self.layout, self.cycle as usize)?;
            if !all_finite(xa.iter()) {
                return Err(Error::NonFinite("post-analysis hook output"));
            }
        }
        self.timings.analysis += t_an.elapsed();

        let t_io = Instant::now();
        self.store.write_matrix(&step_name("ensemble", t), &xa)?;
        self.store.write_vector(&step_name("mean", t), &row_mean(&xa))?;
        self.timings.io += t_io.elapsed();

        if self.layout.has_parameters() {
            let p = self.layout.param_rows();
            self.prev_params = Some(xa.rows(p.start, p.len()).into_owned());
        }
        Ok(AnalysisReport {
            step: t,
            transform,
            transform_spread: 0.0,
            innovation,
            alpha,
            refresh_fallback: outcome.fallback,
            refresh_shrunk: outcome.shrunk,
        })
    }

    fn localization_radii(&self, e: &EnsembleMatrix) -> Result<Vec<f64>> {
        let spec = &self.cfg.localization;
        match spec.mode {
            LocalizationMode::Manual => Ok(vec![spec.radius; e.n()]),
            LocalizationMode::Adaptive => {
                let radii = adaptive_localization_lengths(e, spec.correlation_floor)?;
                let fallback = self
                    .layout
                    .entries()
                    .iter()
                    .filter_map(|v| v.grid.map(|g| g.diagonal()))
                    .fold(1.0, f64::max);
                Ok(radii.into_iter().map(|r| r.unwrap_or(fallback)).collect())
            }
            LocalizationMode::None => Ok(vec![f64::INFINITY; e.n()]),
        }
    }

    fn analysis_full(&mut self, batch: &ObservationBatch, h: &ObservationOperator) -> Result<AnalysisReport> {
        let t = batch.step;
        let (n, ne) = (self.layout.len(), self.members);
        let blocks = split_ranges(n, self.cfg.workers);
        let forecast = step_name("forecast", t);
        let fmean = step_name("forecast_mean", t);
        let analysis = step_name("ensemble", t);
        let amean = step_name("mean", t);

        let t_io = Instant::now();
        for (name, cols) in [(&fmean, 1), (&analysis, ne), (&amean, 1)] {
            self.store.create_dataset(name, n, cols)?;
        }
        self.timings.io += t_io.elapsed();

        let t_an = Instant::now();
        let store = self.store.clone();
        // Each worker reads its row block and forms its share of H X^f.
        let stage1: Vec<Result<(DMatrix<f64>, DMatrix<f64>)>> = self.pool.install(|| {
            blocks
                .par_iter()
                .map(|rows| {
                    let xf = store.read_hyperslab(&forecast, rows.clone(), 0..ne)?;
                    let mean = row_mean(&xf);
                    store.write_hyperslab(&fmean, rows.clone(), 0..1, &DMatrix::from_column_slice(rows.len(), 1, mean.as_slice()))?;
                    let partial = h.apply_row_block(rows.clone(), &xf)?;
                    Ok((xf, partial))
                })
                .collect()
        });
        let mut xf_blocks = Vec::with_capacity(blocks.len());
        let mut partials = Vec::with_capacity(blocks.len());
        for r in stage1 {
            let (xf, p) = r?;
            xf_blocks.push(xf);
            partials.push(p);
        }
        let hx = tree_sum(partials);
        let innovation = &batch.values - row_mean(&hx);
        let alpha = self.relaxation_alpha(&innovation, &batch.sigma)?;
        let variances = batch.variances();

        let ctx = RowContext {
            layout: &self.layout,
            cfg: &self.cfg,
            alpha,
            prev_params: self.prev_params.as_ref(),
            cycle: self.cycle,
        };
        let (cfg, layout, cycle) = (&self.cfg, &*self.layout, self.cycle);
        let stage2: Vec<Result<RowBlockOutput>> = self.pool.install(|| {
            blocks
                .par_iter()
                .zip(xf_blocks.par_iter())
                .map(|(rows, xf)| {
                    // Every worker builds the transform from the same reduced product.
                    let perts = build_perturbations(cfg, layout, ne, cycle, batch, h, &hx)?;
                    let tr = analysis_transform(cfg.filter, &hx, &batch.values, &variances, perts.as_ref())?
                        .transform
                        .expect("filters return a transform");
                    let mut xa = xf * &tr;
                    let outcome = ctx.finish(rows, xf, &mut xa)?;
                    store.write_hyperslab(&analysis, rows.clone(), 0..ne, &xa)?;
                    let mean = row_mean(&xa);
                    store.write_hyperslab(&amean, rows.clone(), 0..1, &DMatrix::from_column_slice(rows.len(), 1, mean.as_slice()))?;
                    Ok((tr, xa, outcome))
                })
                .collect()
        });
        let mut transforms = Vec::new();
        let mut fallback = Vec::new();
        let mut shrunk = Vec::new();
        let mut param_rows: Vec<(usize, DMatrix<f64>)> = Vec::new();
        let prange = self.layout.param_rows();
        for (rows, r) in blocks.iter().zip(stage2) {
            let (tr, xa, outcome) = r?;
            transforms.push(tr);
            fallback.extend(outcome.fallback);
            shrunk.extend(outcome.shrunk);
            let lo = rows.start.max(prange.start);
            let hi = rows.end.min(prange.end);
            if lo < hi {
                param_rows.push((lo, xa.rows(lo - rows.start, hi - lo).into_owned()));
            }
        }
        let spread = transforms
            .iter()
            .map(|t| max_abs_diff(t, &transforms[0]))
            .fold(0.0, f64::max);
        self.timings.analysis += t_an.elapsed();

        let t_io = Instant::now();
        for name in [&fmean, &analysis, &amean] {
            self.store.finalize(name)?;
        }
        self.timings.io += t_io.elapsed();

        if self.layout.has_parameters() {
            let mut p = DMatrix::zeros(prange.len(), ne);
            for (lo, block) in param_rows {
                p.rows_mut(lo - prange.start, block.nrows()).copy_from(&block);
            }
            self.prev_params = Some(p);
        }
        Ok(AnalysisReport {
            step: t,
            transform: transforms.into_iter().next(),
            transform_spread: spread,
            innovation,
            alpha,
            refresh_fallback: fallback,
            refresh_shrunk: shrunk,
        })
    }
}

/// Observation perturbations for the stochastic filter; `None` otherwise.
#[allow(clippy::too_many_arguments)]
fn build_perturbations(
    cfg: &OrchestratorConfig,
    layout: &StateLayout,
    members: usize,
    cycle: u64,
    batch: &ObservationBatch,
    h: &ObservationOperator,
    hx: &DMatrix<f64>,
) -> Result<Option<PerturbationSet>> {
    if !cfg.filter.is_stochastic() {
        return Ok(None);
    }
    let p = match cfg.innovation {
        InnovationKind::Anomaly => innovation_strategy_anomaly_observed(&batch.values, hx)?,
        InnovationKind::Field => innovation_strategy_field(
            &batch.values,
            &batch.sigma,
            h,
            layout,
            &cfg.field_lengths,
            members,
            cfg.seed,
            cycle,
        )?,
    };
    Ok(Some(p))
}

/// Runs one member for `steps` steps from `start_step`, returning the state
/// after each step. Parameter rows must come back unchanged.
#[allow(clippy::too_many_arguments)]
pub(crate) fn forecast_member(
    model: &dyn Model,
    layout: &StateLayout,
    mut x: Vec<f64>,
    member: usize,
    start_step: usize,
    steps: usize,
    dt: f64,
    threads: usize,
    mut noise: Option<(&mut NoiseState, &ModelNoise)>,
) -> Result<Vec<Vec<f64>>> {
    let params = layout.param_rows();
    let mut out = Vec::with_capacity(steps);
    for k in 0..steps {
        let step = start_step + k;
        let before: Vec<u64> = x[params.clone()].iter().map(|v| v.to_bits()).collect();
        let ctx = StepContext {
            member,
            step,
            threads,
        };
        model.forecast_step_single(&mut x, dt, &ctx)?;
        if x[params.clone()].iter().map(|v| v.to_bits()).ne(before.iter().copied()) {
            return Err(Error::ParameterMutated(member));
        }
        if let Some((state, cfg)) = noise.as_mut() {
            for (v, entry) in layout.entries().iter().enumerate() {
                let (Some(grid), VarKind::State) = (&entry.grid, entry.kind) else {
                    continue;
                };
                if cfg.sigma[v] == 0.0 {
                    continue;
                }
                let field = state.next_field(&entry.name, grid, cfg.lengths[v], cfg.sigma[v], member, step)?;
                for (xi, e) in x[layout.range_at(v)].iter_mut().zip(field) {
                    *xi += e;
                }
            }
        }
        if !all_finite(x.iter()) {
            return Err(Error::NonFinite("forecast state"));
        }
        out.push(x.clone());
    }
    Ok(out)
}
