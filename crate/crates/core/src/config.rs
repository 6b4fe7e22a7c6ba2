//! YAML run configuration.
//!
//! Parsing is strict: unknown keys are rejected and every error carries the
//! dotted path of the offending field. [`RunConfig::normalized`] fills in all
//! defaults so that saving a loaded file gives its canonical form.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::FilterKind;
use crate::layout::{StateLayout, VarKind};
use crate::localization::LocalizationSpec;
use crate::models::{BiasSpec, FixedCost, Flowline, FlowlineParams, Lorenz96, Model};
use crate::obs::ObservationOperator;
use crate::orchestrator::{InnovationKind, ModelNoise, OrchestratorConfig, ParallelMode};
use crate::params::RelaxationParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    Lorenz96 {
        #[serde(default = "default_l96_n")]
        n: usize,
        #[serde(default = "default_l96_forcing")]
        forcing: f64,
        #[serde(default = "default_l96_spinup")]
        spinup_steps: usize,
    },
    Flowline(FlowlineParams),
    FixedCost {
        n: usize,
        cost_ms: u64,
    },
}

fn default_l96_n() -> usize {
    40
}

fn default_l96_forcing() -> f64 {
    8.0
}

fn default_l96_spinup() -> usize {
    1000
}

impl ModelConfig {
    pub fn build(&self, dt: f64) -> Result<Arc<dyn Model>> {
        Ok(match self {
            ModelConfig::Lorenz96 {
                n,
                forcing,
                spinup_steps,
            } => Arc::new(Lorenz96::new(*n, *forcing)?.with_spinup(*spinup_steps, dt)),
            ModelConfig::Flowline(p) => Arc::new(Flowline::new(*p)?),
            ModelConfig::FixedCost { n, cost_ms } => {
                Arc::new(FixedCost::new(*n, Duration::from_millis(*cost_ms))?)
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InflationConfig {
    #[serde(default = "one")]
    pub state: f64,
    /// Must be at least `state`: parameters have no dynamics to regrow spread.
    #[serde(default)]
    pub parameter: Option<f64>,
}

fn one() -> f64 {
    1.0
}

impl Default for InflationConfig {
    fn default() -> Self {
        InflationConfig {
            state: 1.0,
            parameter: None,
        }
    }
}

/// Where and when observations are taken.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObsConfig {
    /// Observed variable; defaults to the first state variable.
    #[serde(default)]
    pub variable: Option<String>,
    pub sigma: f64,
    /// Explicit node indices within the variable. Overrides the stride mask.
    #[serde(default)]
    pub indices: Option<Vec<usize>>,
    #[serde(default = "one_usize")]
    pub stride: usize,
    #[serde(default)]
    pub offset: usize,
    /// Explicit model times. Overrides `start`/`every`/`end`.
    #[serde(default)]
    pub times: Option<Vec<f64>>,
    #[serde(default)]
    pub start: Option<f64>,
    #[serde(default)]
    pub every: Option<f64>,
    #[serde(default)]
    pub end: Option<f64>,
}

fn one_usize() -> usize {
    1
}

/// Initial ensemble around the biased first guess.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitConfig {
    #[serde(default)]
    pub spreads: BTreeMap<String, f64>,
    #[serde(default)]
    pub lengths: BTreeMap<String, f64>,
    #[serde(default)]
    pub biases: Vec<BiasSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelNoiseConfig {
    #[serde(default)]
    pub sigma: BTreeMap<String, f64>,
    #[serde(default)]
    pub lengths: BTreeMap<String, f64>,
    #[serde(default = "default_autocorrelation")]
    pub autocorrelation: f64,
}

fn default_autocorrelation() -> f64 {
    0.9
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParameterConfig {
    #[serde(default)]
    pub spread_floor: Option<f64>,
    #[serde(default)]
    pub relaxation: Option<RelaxationParams>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParallelConfig {
    #[serde(default)]
    pub mode: ParallelMode,
    #[serde(default = "one_usize")]
    pub workers: usize,
}

impl Default for ParallelConfig {
    fn default() -> Self {
        ParallelConfig {
            mode: ParallelMode::Partial,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsConfig {
    /// Leading assimilation cycles left out of the time means.
    #[serde(default)]
    pub spinup_cycles: usize,
    /// Variables entering RMSE and spread; all state variables by default.
    #[serde(default)]
    pub variables: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub members: usize,
    pub dt: f64,
    pub total_time: f64,
    #[serde(default = "default_filter")]
    pub filter: FilterKind,
    /// Only meaningful for the stochastic filter.
    #[serde(default)]
    pub innovation: Option<InnovationKind>,
    #[serde(default)]
    pub inflation: InflationConfig,
    #[serde(default)]
    pub localization: LocalizationSpec,
    #[serde(default)]
    pub observations: Option<ObsConfig>,
    #[serde(default)]
    pub initial: InitConfig,
    /// Decorrelation lengths of the field innovation strategy.
    #[serde(default)]
    pub field_lengths: BTreeMap<String, f64>,
    #[serde(default)]
    pub model_noise: Option<ModelNoiseConfig>,
    #[serde(default)]
    pub parameters: ParameterConfig,
    #[serde(default)]
    pub parallel: ParallelConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
}

fn default_filter() -> FilterKind {
    FilterKind::Senkf
}

fn default_output() -> PathBuf {
    PathBuf::from("enkf-run")
}

/// Converts a model time to a step index, requiring it to sit on the grid.
fn time_to_step(path: &str, t: f64, dt: f64) -> Result<usize> {
    let k = t / dt;
    let r = k.round();
    if !(t >= 0.0 && t.is_finite()) || (k - r).abs() > 1e-6 * r.max(1.0) {
        return Err(Error::config(path, format!("time {t} is not a non-negative multiple of dt = {dt}")));
    }
    Ok(r as usize)
}

/// Looks up per-variable values; unknown names are rejected, missing ones get `default`.
fn per_variable(
    path: &str,
    layout: &StateLayout,
    map: &BTreeMap<String, f64>,
    default: impl Fn(usize) -> f64,
) -> Result<Vec<f64>> {
    for name in map.keys() {
        if layout.index_of(name).is_none() {
            return Err(Error::config(format!("{path}.{name}"), "unknown state variable"));
        }
    }
    Ok(layout
        .entries()
        .iter()
        .enumerate()
        .map(|(i, v)| map.get(&v.name).copied().unwrap_or_else(|| default(i)))
        .collect())
}

/// Default decorrelation length: one grid cell, or 1 without a grid.
fn cell_length(layout: &StateLayout) -> impl Fn(usize) -> f64 + '_ {
    move |i| layout.entries()[i].grid.map(|g| g.cell_size()).unwrap_or(1.0)
}

impl RunConfig {
    pub fn from_yaml(text: &str) -> Result<Self> {
        let de = serde_yaml::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(if path == "." { "<root>".to_string() } else { path }, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg.normalized())
    }

    /// Every default made explicit; `innovation` is set exactly when the
    /// filter is stochastic.
    pub fn normalized(&self) -> Self {
        let mut c = self.clone();
        if c.inflation.parameter.is_none() {
            c.inflation.parameter = Some(c.inflation.state);
        }
        c.innovation = if c.filter.is_stochastic() {
            Some(c.innovation.unwrap_or_default())
        } else {
            c.innovation.filter(|_| false)
        };
        c
    }

    pub fn to_yaml(&self) -> Result<String> {
        serde_yaml::to_string(&self.normalized()).map_err(|e| Error::config("<root>", e.to_string()))
    }

    pub fn parameter_inflation(&self) -> f64 {
        self.inflation.parameter.unwrap_or(self.inflation.state)
    }

    pub fn total_steps(&self) -> Result<usize> {
        time_to_step("total_time", self.total_time, self.dt)
    }

    pub fn validate(&self) -> Result<()> {
        if self.members < 2 {
            return Err(Error::config("members", "need at least 2 members"));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::config("dt", "must be finite and > 0"));
        }
        self.total_steps()?;
        let (state, param) = (self.inflation.state, self.parameter_inflation());
        if !(state >= 1.0 && state.is_finite()) {
            return Err(Error::config("inflation.state", "must be finite and >= 1"));
        }
        if !(param >= state && param.is_finite()) {
            return Err(Error::config(
                "inflation.parameter",
                format!("parameter inflation {param} must be at least the state inflation {state}"),
            ));
        }
        if let Some(innov) = self.innovation {
            if !self.filter.is_stochastic() {
                return Err(Error::config(
                    "innovation",
                    format!("`{innov:?}` innovation only applies to the senkf filter, not {}", self.filter.as_str()),
                ));
            }
        }
        self.localization
            .validate()
            .map_err(|e| Error::config("localization", e.to_string()))?;
        if self.localization.is_active() {
            if self.filter != FilterKind::Senkf {
                return Err(Error::config("localization", "localization is only available with the senkf filter"));
            }
            if self.parallel.mode == ParallelMode::Full {
                return Err(Error::config("localization", "localization requires parallel.mode = partial"));
            }
        }
        if self.parallel.workers == 0 {
            return Err(Error::config("parallel.workers", "need at least one worker"));
        }
        if let Some(obs) = &self.observations {
            if !(obs.sigma > 0.0 && obs.sigma.is_finite()) {
                return Err(Error::config("observations.sigma", "must be finite and > 0"));
            }
            if obs.stride == 0 {
                return Err(Error::config("observations.stride", "must be >= 1"));
            }
            if obs.times.is_none() && obs.every.is_some_and(|e| !(e > 0.0)) {
                return Err(Error::config("observations.every", "must be > 0"));
            }
        }
        if let Some(floor) = self.parameters.spread_floor {
            if !(floor >= 0.0 && floor.is_finite()) {
                return Err(Error::config("parameters.spread_floor", "must be finite and >= 0"));
            }
        }
        if let Some(rp) = &self.parameters.relaxation {
            rp.validate()
                .map_err(|e| Error::config("parameters.relaxation", e.to_string()))?;
        }
        // Checks that need the model layout.
        let model = self.model.build(self.dt).map_err(|e| Error::config("model", e.to_string()))?;
        let layout = model.layout();
        self.orchestrator_config(&layout)?;
        self.observation_operator(&layout)?;
        self.observation_steps()?;
        self.init_spec(&layout)?;
        for b in &self.initial.biases {
            if layout.index_of(b.variable()).is_none() {
                return Err(Error::config(
                    "initial.biases",
                    format!("unknown variable `{}`", b.variable()),
                ));
            }
        }
        if let Some(vars) = &self.diagnostics.variables {
            for v in vars {
                if layout.index_of(v).is_none() {
                    return Err(Error::config("diagnostics.variables", format!("unknown variable `{v}`")));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
        Self::from_yaml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_yaml()?).map_err(|e| Error::io(path, e))
    }

    pub fn build_model(&self) -> Result<Arc<dyn Model>> {
        self.model.build(self.dt)
    }

    pub fn orchestrator_config(&self, layout: &StateLayout) -> Result<OrchestratorConfig> {
        let mut oc = OrchestratorConfig::new(self.parallel.workers, self.parallel.mode, self.filter);
        oc.innovation = self.innovation.unwrap_or_default();
        oc.state_inflation = self.inflation.state;
        oc.param_inflation = self.parameter_inflation();
        oc.localization = self.localization;
        oc.field_lengths = per_variable("field_lengths", layout, &self.field_lengths, cell_length(layout))?;
        oc.model_noise = match &self.model_noise {
            Some(n) => Some(ModelNoise {
                sigma: per_variable("model_noise.sigma", layout, &n.sigma, |_| 0.0)?,
                lengths: per_variable("model_noise.lengths", layout, &n.lengths, cell_length(layout))?,
                autocorrelation: n.autocorrelation,
            }),
            None => None,
        };
        oc.param_spread_floor = self.parameters.spread_floor;
        oc.relaxation = self.parameters.relaxation;
        oc.seed = self.seed;
        oc.validate(layout).map_err(|e| Error::config("<root>", e.to_string()))?;
        Ok(oc)
    }

    pub fn init_spec(&self, layout: &StateLayout) -> Result<crate::fields::EnsembleInitSpec> {
        let spreads = per_variable("initial.spreads", layout, &self.initial.spreads, |_| 0.0)?;
        let lengths = per_variable("initial.lengths", layout, &self.initial.lengths, cell_length(layout))?;
        if let Some((name, _)) = self.initial.spreads.iter().find(|(_, s)| !(**s >= 0.0 && s.is_finite())) {
            return Err(Error::config(format!("initial.spreads.{name}"), "must be finite and >= 0"));
        }
        if let Some((name, _)) = self.initial.lengths.iter().find(|(_, l)| !(**l > 0.0 && l.is_finite())) {
            return Err(Error::config(format!("initial.lengths.{name}"), "must be finite and > 0"));
        }
        Ok(crate::fields::EnsembleInitSpec { spreads, lengths })
    }

    /// Observed state rows (absolute indices), or `None` without observations.
    pub fn observed_rows(&self, layout: &StateLayout) -> Result<Option<Vec<usize>>> {
        let Some(obs) = &self.observations else {
            return Ok(None);
        };
        let var = match &obs.variable {
            Some(v) => v.clone(),
            None => layout
                .entries()
                .iter()
                .find(|e| e.kind == VarKind::State)
                .map(|e| e.name.clone())
                .ok_or_else(|| Error::config("observations.variable", "model has no state variable"))?,
        };
        let range = layout
            .range(&var)
            .map_err(|_| Error::config("observations.variable", format!("unknown variable `{var}`")))?;
        let local: Vec<usize> = match &obs.indices {
            Some(idx) => idx.clone(),
            None => (obs.offset..range.len()).step_by(obs.stride).collect(),
        };
        if local.is_empty() {
            return Err(Error::config("observations", "mask selects no nodes"));
        }
        if local.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("observations.indices", "must be strictly increasing"));
        }
        if let Some(&bad) = local.iter().find(|&&i| i >= range.len()) {
            return Err(Error::config(
                "observations.indices",
                format!("index {bad} outside `{var}` of length {}", range.len()),
            ));
        }
        Ok(Some(local.into_iter().map(|i| range.start + i).collect()))
    }

    pub fn observation_operator(&self, layout: &StateLayout) -> Result<Option<ObservationOperator>> {
        match self.observed_rows(layout)? {
            Some(rows) => Ok(Some(ObservationOperator::selection(layout.len(), &rows)?)),
            None => Ok(None),
        }
    }

    /// Sorted, distinct observation steps in `1..=total_steps`.
    pub fn observation_steps(&self) -> Result<Vec<usize>> {
        let Some(obs) = &self.observations else {
            return Ok(Vec::new());
        };
        let total = self.total_steps()?;
        let mut steps = match &obs.times {
            Some(times) => times
                .iter()
                .enumerate()
                .map(|(i, &t)| time_to_step(&format!("observations.times[{i}]"), t, self.dt))
                .collect::<Result<Vec<_>>>()?,
            None => {
                let every = obs.every.unwrap_or(self.dt);
                let start = obs.start.unwrap_or(every);
                let end = obs.end.unwrap_or(self.total_time);
                let s0 = time_to_step("observations.start", start, self.dt)?;
                let ds = time_to_step("observations.every", every, self.dt)?;
                let s1 = end.min(self.total_time) / self.dt;
                if ds == 0 {
                    return Err(Error::config("observations.every", "must be at least one step"));
                }
                (s0..).step_by(ds).take_while(|&s| s as f64 <= s1 + 1e-9).collect()
            }
        };
        steps.sort_unstable();
        steps.dedup();
        if let Some(&s) = steps.iter().find(|&&s| s == 0 || s > total) {
            return Err(Error::config(
                "observations",
                format!("observation step {s} is outside 1..={total}"),
            ));
        }
        Ok(steps)
    }

    /// State rows entering RMSE and spread.
    pub fn diagnostic_rows(&self, layout: &StateLayout) -> Result<Vec<usize>> {
        let rows: Vec<usize> = match &self.diagnostics.variables {
            Some(vars) => vars
                .iter()
                .map(|v| layout.range(v))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .flatten()
                .collect(),
            None => layout.state_rows().collect(),
        };
        if rows.is_empty() {
            return Err(Error::config("diagnostics.variables", "selects no rows"));
        }
        Ok(rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "
model: {name: lorenz96}
members: 10
dt: 0.05
total_time: 1.0
";

    #[test]
    fn minimal_file_gets_defaults() {
        let cfg = RunConfig::from_yaml(MINIMAL).unwrap();
        assert_eq!(
            cfg.model,
            ModelConfig::Lorenz96 {
                n: 40,
                forcing: 8.0,
                spinup_steps: 1000
            }
        );
        assert_eq!(cfg.filter, FilterKind::Senkf);
        assert_eq!(cfg.innovation, Some(InnovationKind::Anomaly));
        assert_eq!(cfg.inflation.parameter, Some(1.0));
        assert_eq!(cfg.parallel.workers, 1);
        assert_eq!(cfg.total_steps().unwrap(), 20);
        assert!(cfg.observation_steps().unwrap().is_empty());
    }

    #[test]
    fn unknown_key_names_its_path() {
        let text = format!("{MINIMAL}inflation: {{state: 1.1, paramter: 1.2}}\n");
        let err = RunConfig::from_yaml(&text).unwrap_err();
        match err {
            Error::Config { path, message } => {
                assert_eq!(path, "inflation.paramter");
                assert!(message.contains("paramter"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parameter_inflation_below_state_rejected() {
        let text = format!("{MINIMAL}inflation: {{state: 1.2, parameter: 1.1}}\n");
        let err = RunConfig::from_yaml(&text).unwrap_err();
        assert!(matches!(&err, Error::Config { path, .. } if path == "inflation.parameter"), "{err}");
        assert!(err.to_string().contains("at least the state inflation"));
    }

    #[test]
    fn innovation_only_for_senkf() {
        let text = format!("{MINIMAL}filter: ensrf\ninnovation: field\n");
        let err = RunConfig::from_yaml(&text).unwrap_err();
        assert!(matches!(&err, Error::Config { path, .. } if path == "innovation"), "{err}");
        let ok = RunConfig::from_yaml(&format!("{MINIMAL}filter: ensrf\n")).unwrap();
        assert_eq!(ok.innovation, None);
    }

    #[test]
    fn localization_needs_senkf_partial() {
        let text = format!("{MINIMAL}filter: entkf\nlocalization: {{mode: manual, radius: 4}}\n");
        assert!(RunConfig::from_yaml(&text).is_err());
        let text = format!("{MINIMAL}localization: {{mode: manual, radius: 4}}\nparallel: {{mode: full, workers: 2}}\n");
        assert!(RunConfig::from_yaml(&text).is_err());
        let text = format!("{MINIMAL}localization: {{mode: manual, radius: 4}}\n");
        assert!(RunConfig::from_yaml(&text).is_ok());
    }

    #[test]
    fn observation_schedule_and_mask() {
        let text = format!("{MINIMAL}observations: {{sigma: 1.0, stride: 2, start: 0.2, every: 0.2}}\n");
        let cfg = RunConfig::from_yaml(&text).unwrap();
        assert_eq!(cfg.observation_steps().unwrap(), vec![4, 8, 12, 16, 20]);
        let model = cfg.build_model().unwrap();
        let rows = cfg.observed_rows(&model.layout()).unwrap().unwrap();
        assert_eq!(rows.len(), 20);
        assert_eq!(rows[..3], [0, 2, 4]);
        let off_grid = format!("{MINIMAL}observations: {{sigma: 1.0, times: [0.123]}}\n");
        assert!(RunConfig::from_yaml(&off_grid).is_err());
        let late = format!("{MINIMAL}observations: {{sigma: 1.0, times: [5.0]}}\n");
        assert!(RunConfig::from_yaml(&late).is_err());
    }

    #[test]
    fn flowline_defaults_and_unknown_fields() {
        let cfg = RunConfig::from_yaml("model: {name: flowline, cells: 20}\nmembers: 4\ndt: 0.5\ntotal_time: 2\n").unwrap();
        match cfg.model {
            ModelConfig::Flowline(p) => {
                assert_eq!(p.cells, 20);
                assert_eq!(p.smb_inflow, FlowlineParams::default().smb_inflow);
            }
            other => panic!("{other:?}"),
        }
        assert!(RunConfig::from_yaml("model: {name: flowline, cellz: 20}\nmembers: 4\ndt: 0.5\ntotal_time: 2\n").is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let text = format!(
            "{MINIMAL}observations: {{sigma: 0.5, stride: 4, every: 0.1}}\ninitial: {{spreads: {{x: 1.0}}, biases: [{{kind: offset, variable: x, value: 0.5}}]}}\n"
        );
        let cfg = RunConfig::from_yaml(&text).unwrap();
        let saved = cfg.to_yaml().unwrap();
        let back = RunConfig::from_yaml(&saved).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_yaml().unwrap(), saved);
    }

    #[test]
    fn unknown_variable_in_maps_rejected() {
        let text = format!("{MINIMAL}initial: {{spreads: {{h: 1.0}}}}\n");
        let err = RunConfig::from_yaml(&text).unwrap_err();
        assert!(matches!(&err, Error::Config { path, .. } if path == "initial.spreads.h"), "{err}");
    }
}
