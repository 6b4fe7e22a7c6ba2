//! Twin experiments: truth, synthetic observations, assimilation and a
//! paired free run, with per-cycle diagnostics.

use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::ensemble::row_mean;
use crate::error::{ensure_dims, Error, Result};
use crate::fields::initialize_ensemble;
use crate::layout::StateLayout;
use crate::models::Trajectory;
use crate::obs::{synthesize_observations, ObservationBatch};
use crate::orchestrator::{Orchestrator, PhaseTimings};
use crate::store::{step_name, EnsembleStore};

/// `sqrt(mean((a - b)^2))` over `mask`, or over every entry.
pub fn rmse(a: &[f64], b: &[f64], mask: Option<&[usize]>) -> Result<f64> {
    ensure_dims("rmse operands", a.len(), b.len())?;
    let sq = |i: usize| (a[i] - b[i]).powi(2);
    let (sum, count) = match mask {
        Some(idx) => {
            if let Some(&bad) = idx.iter().find(|&&i| i >= a.len()) {
                return Err(Error::IndexOutOfRange {
                    index: bad,
                    len: a.len(),
                });
            }
            (idx.iter().map(|&i| sq(i)).sum::<f64>(), idx.len())
        }
        None => ((0..a.len()).map(sq).sum::<f64>(), a.len()),
    };
    if count == 0 {
        return Err(Error::invalid("mask", "selects no entries"));
    }
    Ok((sum / count as f64).sqrt())
}

/// `sqrt` of the mean sample variance over `rows`.
fn spread(data: &DMatrix<f64>, rows: &[usize]) -> f64 {
    let ne = data.ncols();
    let var: f64 = rows
        .iter()
        .map(|&r| {
            let row = data.row(r);
            let mu = row.mean();
            row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (ne - 1) as f64
        })
        .sum();
    (var / rows.len() as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub index: usize,
    pub mean: f64,
    pub spread: f64,
    pub truth: f64,
}

/// Diagnostics at one observation step, or at the final step when it carries
/// no observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    /// Assimilations done so far, this one included.
    pub cycle: usize,
    pub step: usize,
    pub time: f64,
    pub assimilated: bool,
    pub forecast_rmse: f64,
    pub analysis_rmse: f64,
    pub forecast_spread: f64,
    pub analysis_spread: f64,
    pub free_rmse: f64,
    pub alpha: Option<f64>,
    pub params: Vec<ParamRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub cycles: usize,
    pub spinup_cycles: usize,
    /// Records entering the means below.
    pub evaluated: usize,
    pub mean_analysis_rmse: f64,
    pub mean_forecast_rmse: f64,
    pub mean_free_rmse: f64,
    pub mean_analysis_spread: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub run_id: String,
    pub model: String,
    pub filter: String,
    pub members: usize,
    pub seed: u64,
    pub records: Vec<CycleRecord>,
    pub summary: Summary,
}

/// Wall-clock record of a run, kept apart from the reproducible outputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunTimings {
    pub phases: PhaseTimings,
    pub free_run: Duration,
    pub total: Duration,
}

const FIXED_COLUMNS: [&str; 11] = [
    "cycle",
    "step",
    "time",
    "assimilated",
    "forecast_rmse",
    "analysis_rmse",
    "forecast_spread",
    "analysis_spread",
    "free_rmse",
    "alpha",
    "n_params",
];

impl Summary {
    fn from_records(records: &[CycleRecord], spinup: usize) -> Self {
        let assimilated: Vec<&CycleRecord> = records.iter().filter(|r| r.assimilated).collect();
        let pool: Vec<&CycleRecord> = if assimilated.is_empty() {
            records.iter().collect()
        } else {
            assimilated.iter().skip(spinup).copied().collect()
        };
        let mean = |f: fn(&CycleRecord) -> f64| {
            if pool.is_empty() {
                f64::NAN
            } else {
                pool.iter().map(|r| f(r)).sum::<f64>() / pool.len() as f64
            }
        };
        Summary {
            cycles: assimilated.len(),
            spinup_cycles: spinup,
            evaluated: pool.len(),
            mean_analysis_rmse: mean(|r| r.analysis_rmse),
            mean_forecast_rmse: mean(|r| r.forecast_rmse),
            mean_free_rmse: mean(|r| r.free_rmse),
            mean_analysis_spread: mean(|r| r.analysis_spread),
        }
    }
}

impl DiagnosticsReport {
    /// One row per record; parameters follow the fixed columns as
    /// `<name>[<index>]_{mean,spread,truth}` triples.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
        if let Some(first) = self.records.first() {
            for p in &first.params {
                for field in ["mean", "spread", "truth"] {
                    header.push(format!("{}[{}]_{field}", p.name, p.index));
                }
            }
        }
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![
                r.cycle.to_string(),
                r.step.to_string(),
                r.time.to_string(),
                r.assimilated.to_string(),
                r.forecast_rmse.to_string(),
                r.analysis_rmse.to_string(),
                r.forecast_spread.to_string(),
                r.analysis_spread.to_string(),
                r.free_rmse.to_string(),
                r.alpha.map(|a| a.to_string()).unwrap_or_default(),
                r.params.len().to_string(),
            ];
            for p in &r.params {
                row.extend([p.mean.to_string(), p.spread.to_string(), p.truth.to_string()]);
            }
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Parses a file written by [`DiagnosticsReport::write_csv`].
    pub fn read_csv(path: &Path) -> Result<Vec<CycleRecord>> {
        let mut rd = csv::Reader::from_path(path)?;
        let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
        let bad = |what: &str| Error::invalid("diagnostics csv", what.to_string());
        if header.len() < FIXED_COLUMNS.len() || header[..FIXED_COLUMNS.len()] != FIXED_COLUMNS {
            return Err(bad("unexpected header"));
        }
        let param_ids: Vec<(String, usize)> = header[FIXED_COLUMNS.len()..]
            .chunks(3)
            .map(|c| {
                let key = c[0].strip_suffix("_mean").ok_or_else(|| bad("parameter columns"))?;
                let (name, idx) = key
                    .strip_suffix(']')
                    .and_then(|k| k.rsplit_once('['))
                    .ok_or_else(|| bad("parameter column name"))?;
                let idx = idx.parse().map_err(|_| bad("parameter index"))?;
                Ok((name.to_string(), idx))
            })
            .collect::<Result<_>>()?;
        let f = |s: &str| s.parse::<f64>().map_err(|_| bad("number"));
        let u = |s: &str| s.parse::<usize>().map_err(|_| bad("integer"));
        let mut out = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let col = |i: usize| rec.get(i).ok_or_else(|| bad("short row"));
            let mut params = Vec::with_capacity(param_ids.len());
            for (k, (name, index)) in param_ids.iter().enumerate() {
                let base = FIXED_COLUMNS.len() + 3 * k;
                params.push(ParamRecord {
                    name: name.clone(),
                    index: *index,
                    mean: f(col(base)?)?,
                    spread: f(col(base + 1)?)?,
                    truth: f(col(base + 2)?)?,
                });
            }
            let alpha = col(9)?;
            out.push(CycleRecord {
                cycle: u(col(0)?)?,
                step: u(col(1)?)?,
                time: f(col(2)?)?,
                assimilated: col(3)?.parse().map_err(|_| bad("bool"))?,
                forecast_rmse: f(col(4)?)?,
                analysis_rmse: f(col(5)?)?,
                forecast_spread: f(col(6)?)?,
                analysis_spread: f(col(7)?)?,
                free_rmse: f(col(8)?)?,
                alpha: if alpha.is_empty() { None } else { Some(f(alpha)?) },
                params,
            });
        }
        Ok(out)
    }
}

/// Short content hash of the canonical configuration.
pub fn run_id(cfg: &RunConfig) -> Result<String> {
    let digest = Sha256::digest(cfg.to_yaml()?.as_bytes());
    Ok(digest.iter().take(6).map(|b| format!("{b:02x}")).collect())
}

pub fn generate_truth(cfg: &RunConfig) -> Result<Trajectory> {
    let model = cfg.build_model()?;
    model.generate_true_state(cfg.total_steps()?, cfg.dt)
}

/// Writes the truth trajectory as `truth/<t>` datasets.
pub fn write_truth(store: &EnsembleStore, truth: &Trajectory) -> Result<()> {
    for (t, state) in truth.states.iter().enumerate() {
        let name = step_name("truth", t);
        store.write_vector(&name, state)?;
        store.set_attr(&name, "time", truth.times[t].into())?;
    }
    Ok(())
}

/// Writes the truth as CSV, one row per step and one column per state row.
pub fn write_truth_csv(path: &Path, truth: &Trajectory, layout: &StateLayout) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["step".to_string(), "time".to_string()];
    for v in layout.entries() {
        header.extend((0..v.length).map(|i| format!("{}[{i}]", v.name)));
    }
    w.write_record(&header)?;
    for (t, state) in truth.states.iter().enumerate() {
        let mut row = vec![t.to_string(), truth.times[t].to_string()];
        row.extend(state.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn param_records(layout: &StateLayout, data: &DMatrix<f64>, truth: &[f64]) -> Vec<ParamRecord> {
    let mut out = Vec::new();
    for (v, entry) in layout.parameter_entries() {
        for (i, r) in layout.range_at(v).enumerate() {
            let row = data.row(r);
            let mean = row.mean();
            out.push(ParamRecord {
                name: entry.name.clone(),
                index: i,
                mean,
                spread: spread(data, &[r]),
                truth: truth[r],
            });
        }
    }
    out
}

/// Runs the configured twin experiment into `cfg.output`.
///
/// The output directory becomes an ensemble store holding the truth, the
/// observations, every ensemble state and the run metadata, plus
/// `diagnostics.csv` and `timings.json` next to it.
pub fn run_twin_experiment(cfg: &RunConfig) -> Result<(DiagnosticsReport, RunTimings)> {
    run_twin_experiment_in(cfg, &cfg.output)
}

pub fn run_twin_experiment_in(cfg: &RunConfig, output: &Path) -> Result<(DiagnosticsReport, RunTimings)> {
    let t_start = Instant::now();
    cfg.validate()?;
    let cfg = cfg.normalized();
    let model = cfg.build_model()?;
    let layout = model.layout();
    let total_steps = cfg.total_steps()?;
    let obs_steps = cfg.observation_steps()?;
    let h = cfg.observation_operator(&layout)?;
    let diag_rows = cfg.diagnostic_rows(&layout)?;
    let id = run_id(&cfg)?;

    let store = EnsembleStore::create(output)?;
    store.write_meta("config", &cfg)?;
    store.write_meta(
        "run",
        &serde_json::json!({
            "run_id": id,
            "seed": cfg.seed,
            "rng": "ChaCha20",
            "model": model.name(),
            "version": env!("CARGO_PKG_VERSION"),
        }),
    )?;

    let truth = model.generate_true_state(total_steps, cfg.dt)?;
    write_truth(&store, &truth)?;

    let batches: Vec<ObservationBatch> = match &h {
        Some(h) => {
            let m = h.obs_dim();
            let sigma = DVector::from_element(m, cfg.observations.as_ref().map(|o| o.sigma).unwrap_or(1.0));
            let obs_seed = crate::rng::derive_seed(cfg.seed, "observations", 0);
            let batches = synthesize_observations(&truth, h, &sigma, &obs_steps, obs_seed)?;
            let support: Vec<f64> = h.support().iter().map(|&i| i as f64).collect();
            store.write_vector("obs/operator", &DVector::from_vec(support))?;
            for (k, b) in batches.iter().enumerate() {
                let name = format!("obs/{k:06}");
                let mut m = DMatrix::zeros(b.len(), 2);
                m.set_column(0, &b.values);
                m.set_column(1, &b.sigma);
                store.write_matrix(&name, &m)?;
                store.set_attr(&name, "step", b.step.into())?;
                store.set_attr(&name, "time", b.time.into())?;
            }
            batches
        }
        None => Vec::new(),
    };

    let guess = model.generate_nurged_state(&cfg.initial.biases)?;
    let init = cfg.init_spec(&layout)?;
    let ens_seed = crate::rng::derive_seed(cfg.seed, "ensemble", 0);
    let initial = initialize_ensemble(&guess, layout.clone(), &init, cfg.members, ens_seed)?;

    let oc = cfg.orchestrator_config(&layout)?;
    let mut orch = Orchestrator::new(store.clone(), model.clone(), cfg.members, cfg.dt, oc)?;
    orch.initialize(&initial)?;

    let mut checkpoints: Vec<usize> = obs_steps.clone();
    if checkpoints.last() != Some(&total_steps) {
        checkpoints.push(total_steps);
    }
    let t_free = Instant::now();
    let free_means = orch.free_run(initial.data(), &checkpoints)?;
    let free_time = t_free.elapsed();

    let mut records = Vec::with_capacity(checkpoints.len());
    let mut batch_iter = batches.iter().peekable();
    let mut cycle = 0;
    for (k, &step) in checkpoints.iter().enumerate() {
        let truth_t = truth.state(step);
        let (alpha, assimilated) = match batch_iter.next_if(|b| b.step == step) {
            Some(b) => {
                let rep = orch.assimilate(b, h.as_ref().expect("observations configured"))?;
                cycle += 1;
                (rep.alpha, true)
            }
            None => {
                orch.advance(step)?;
                (None, false)
            }
        };
        let xa = store.read_matrix(&step_name("ensemble", step))?;
        let xf = if assimilated {
            store.read_matrix(&step_name("forecast", step))?
        } else {
            xa.clone()
        };
        let (mean_f, mean_a) = (row_mean(&xf), row_mean(&xa));
        records.push(CycleRecord {
            cycle,
            step,
            time: truth.times[step],
            assimilated,
            forecast_rmse: rmse(mean_f.as_slice(), truth_t, Some(&diag_rows))?,
            analysis_rmse: rmse(mean_a.as_slice(), truth_t, Some(&diag_rows))?,
            forecast_spread: spread(&xf, &diag_rows),
            analysis_spread: spread(&xa, &diag_rows),
            free_rmse: rmse(free_means[k].as_slice(), truth_t, Some(&diag_rows))?,
            alpha,
            params: param_records(&layout, &xa, truth_t),
        });
    }

    let summary = Summary::from_records(&records, cfg.diagnostics.spinup_cycles);
    let report = DiagnosticsReport {
        run_id: id,
        model: model.name().to_string(),
        filter: cfg.filter.as_str().to_string(),
        members: cfg.members,
        seed: cfg.seed,
        records,
        summary,
    };
    store.write_meta("report", &report)?;
    report.write_csv(&output.join("diagnostics.csv"))?;
    let timings = RunTimings {
        phases: orch.timings(),
        free_run: free_time,
        total: t_start.elapsed(),
    };
    let tpath = output.join("timings.json");
    std::fs::write(&tpath, serde_json::to_string_pretty(&timings)?).map_err(|e| Error::io(&tpath, e))?;
    Ok((report, timings))
}

/// Reads the report of a finished run back from its store.
pub fn load_report(output: &Path) -> Result<DiagnosticsReport> {
    EnsembleStore::open(output)?.read_meta("report")
}
