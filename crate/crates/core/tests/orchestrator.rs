use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use enkf_core::fields::{initialize_ensemble, EnsembleInitSpec};
use enkf_core::filters::{ensrf_analysis, FilterKind};
use enkf_core::layout::{build_state_layout, StateLayout, VarSpec};
use enkf_core::models::{Flowline, FlowlineParams, Lorenz96, Model, StepContext};
use enkf_core::obs::{ObservationBatch, ObservationOperator};
use enkf_core::orchestrator::{
    InnovationKind, ModelNoise, Orchestrator, OrchestratorConfig, ParallelMode,
};
use enkf_core::store::{step_name, EnsembleStore};
use enkf_core::{Error, Result};
use nalgebra::{DMatrix, DVector};
use tempfile::TempDir;

fn l96() -> Arc<dyn Model> {
    Arc::new(Lorenz96::new(40, 8.0).unwrap().with_spinup(200, 0.05))
}

fn l96_ensemble(model: &Arc<dyn Model>, members: usize) -> DMatrix<f64> {
    let x0 = model.initial_state().unwrap();
    let spec = EnsembleInitSpec {
        spreads: vec![1.0],
        lengths: vec![2.0],
    };
    initialize_ensemble(&x0, model.layout(), &spec, members, 11)
        .unwrap()
        .into_data()
}

fn alternating(n: usize) -> ObservationOperator {
    let idx: Vec<usize> = (0..n).step_by(2).collect();
    ObservationOperator::selection(n, &idx).unwrap()
}

fn batch_at(step: usize, values: DVector<f64>, sigma: f64) -> ObservationBatch {
    let m = values.len();
    ObservationBatch::new(step as f64 * 0.05, step, values, DVector::from_element(m, sigma), (0..m).collect()).unwrap()
}

fn orchestrator(dir: &TempDir, model: Arc<dyn Model>, members: usize, cfg: OrchestratorConfig) -> Orchestrator {
    let store = EnsembleStore::create(dir.path()).unwrap();
    Orchestrator::new(store, model, members, 0.05, cfg).unwrap()
}

fn noisy_cfg(workers: usize, mode: ParallelMode, filter: FilterKind) -> OrchestratorConfig {
    let mut cfg = OrchestratorConfig::new(workers, mode, filter);
    cfg.seed = 5;
    cfg.state_inflation = 1.02;
    cfg.field_lengths = vec![2.0];
    cfg.model_noise = Some(ModelNoise {
        sigma: vec![0.05],
        lengths: vec![3.0],
        autocorrelation: 0.8,
    });
    cfg
}

fn bits(m: &DMatrix<f64>) -> Vec<u64> {
    m.iter().map(|v| v.to_bits()).collect()
}

fn max_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).abs().max()
}

/// Runs three cycles and returns the stored ensembles of the last cycle.
fn three_cycles(workers: usize, mode: ParallelMode, filter: FilterKind, innovation: InnovationKind) -> (DMatrix<f64>, DMatrix<f64>) {
    let model = l96();
    let dir = TempDir::new().unwrap();
    let mut cfg = noisy_cfg(workers, mode, filter);
    cfg.innovation = innovation;
    let mut o = orchestrator(&dir, model.clone(), 12, cfg);
    o.initialize_matrix(&l96_ensemble(&model, 12)).unwrap();
    let idx: Vec<usize> = (0..40).step_by(5).collect();
    let h = ObservationOperator::selection(40, &idx).unwrap();
    for k in 1..=3 {
        let y = DVector::from_fn(8, |i, _| ((i + k) as f64 * 0.37).sin() * 3.0);
        o.assimilate(&batch_at(4 * k, y, 2.0), &h).unwrap();
    }
    let store = o.store();
    (
        store.read_matrix(&step_name("forecast", 12)).unwrap(),
        store.read_matrix(&step_name("ensemble", 12)).unwrap(),
    )
}

#[test]
fn forecast_is_bitwise_independent_of_worker_count() {
    for mode in [ParallelMode::Partial, ParallelMode::Full] {
        let model = l96();
        let init = l96_ensemble(&model, 12);
        let mut reference: Option<Vec<Vec<u64>>> = None;
        for workers in [1, 2, 8] {
            let dir = TempDir::new().unwrap();
            let mut o = orchestrator(&dir, model.clone(), 12, noisy_cfg(workers, mode, FilterKind::Senkf));
            o.initialize_matrix(&init).unwrap();
            o.advance(9).unwrap();
            let states: Vec<Vec<u64>> = (1..=9)
                .map(|t| bits(&o.store().read_matrix(&step_name("ensemble", t)).unwrap()))
                .collect();
            match &reference {
                None => reference = Some(states),
                Some(r) => assert!(r == &states, "{mode:?} workers={workers} differs"),
            }
        }
    }
}

#[test]
fn cycles_agree_across_worker_counts() {
    let (f1, a1) = three_cycles(1, ParallelMode::Partial, FilterKind::Senkf, InnovationKind::Field);
    for w in [2, 8] {
        let (f, a) = three_cycles(w, ParallelMode::Partial, FilterKind::Senkf, InnovationKind::Field);
        assert!(max_diff(&f1, &f) <= 1e-10, "workers {w}: {}", max_diff(&f1, &f));
        assert!(max_diff(&a1, &a) <= 1e-10, "workers {w}: {}", max_diff(&a1, &a));
    }
}

#[test]
fn partial_and_full_modes_agree() {
    for filter in [FilterKind::Senkf, FilterKind::Ensrf, FilterKind::Entkf, FilterKind::Denkf] {
        for innovation in [InnovationKind::Anomaly, InnovationKind::Field] {
            if !filter.is_stochastic() && innovation == InnovationKind::Field {
                continue;
            }
            let (fp, ap) = three_cycles(3, ParallelMode::Partial, filter, innovation);
            let (ff, af) = three_cycles(3, ParallelMode::Full, filter, innovation);
            let df = max_diff(&fp, &ff);
            let da = max_diff(&ap, &af);
            assert!(df <= 1e-10 && da <= 1e-10, "{filter:?}/{innovation:?}: forecast {df:e}, analysis {da:e}");
        }
    }
}

#[test]
fn zero_innovation_leaves_forecast_unchanged() {
    let model = l96();
    let init = l96_ensemble(&model, 10);
    let h = alternating(40);
    for mode in [ParallelMode::Partial, ParallelMode::Full] {
        let dir = TempDir::new().unwrap();
        let mut probe = orchestrator(&dir, model.clone(), 10, OrchestratorConfig::new(2, mode, FilterKind::Senkf));
        probe.initialize_matrix(&init).unwrap();
        probe.advance(4).unwrap();
        let xf = probe.store().read_matrix(&step_name("ensemble", 4)).unwrap();
        let y = h.apply_matrix(&xf).unwrap().column_mean();

        let dir = TempDir::new().unwrap();
        let mut o = orchestrator(&dir, model.clone(), 10, OrchestratorConfig::new(2, mode, FilterKind::Senkf));
        o.initialize_matrix(&init).unwrap();
        let rep = o.assimilate(&batch_at(4, y, 1.0), &h).unwrap();
        assert!(rep.innovation.abs().max() < 1e-12);
        let xa = o.store().read_matrix(&step_name("ensemble", 4)).unwrap();
        assert!(max_diff(&xa, &xf) <= 1e-12, "{mode:?}: {}", max_diff(&xa, &xf));
    }
}

#[test]
fn full_mode_matches_serial_filter() {
    let model = l96();
    let init = l96_ensemble(&model, 10);
    let h = alternating(40);
    let dir = TempDir::new().unwrap();
    let mut o = orchestrator(&dir, model.clone(), 10, OrchestratorConfig::new(4, ParallelMode::Full, FilterKind::Ensrf));
    o.initialize_matrix(&init).unwrap();
    let y = DVector::from_fn(20, |i, _| i as f64 * 0.2 - 1.0);
    let batch = batch_at(6, y.clone(), 0.8);
    let rep = o.assimilate(&batch, &h).unwrap();
    assert_eq!(rep.transform_spread, 0.0, "workers formed different transforms");

    let xf = o.store().read_matrix(&step_name("forecast", 6)).unwrap();
    let e = enkf_core::ensemble::EnsembleMatrix::new(xf, model.layout()).unwrap();
    let (serial, _) = ensrf_analysis(&e, &h, &y, &batch.variances()).unwrap();
    let xa = o.store().read_matrix(&step_name("ensemble", 6)).unwrap();
    assert!(max_diff(&xa, serial.data()) <= 1e-10, "{}", max_diff(&xa, serial.data()));
    let mean = o.store().read_vector(&step_name("mean", 6)).unwrap();
    assert!((mean - serial.mean()).abs().max() <= 1e-10);
}

#[test]
fn single_member_single_worker_equals_direct_model_calls() {
    let model = l96();
    let x0 = model.initial_state().unwrap();
    let dir = TempDir::new().unwrap();
    let mut o = orchestrator(&dir, model.clone(), 1, OrchestratorConfig::new(1, ParallelMode::Partial, FilterKind::Senkf));
    o.initialize_matrix(&DMatrix::from_column_slice(40, 1, x0.as_slice())).unwrap();
    o.advance(5).unwrap();
    let mut x = x0.clone();
    for k in 0..5 {
        model.forecast_step_single(x.as_mut_slice(), 0.05, &StepContext::serial(0, k)).unwrap();
    }
    let stored = o.store().read_matrix(&step_name("ensemble", 5)).unwrap();
    assert_eq!(bits(&stored), bits(&DMatrix::from_column_slice(40, 1, x.as_slice())));
}

/// Leaves parameters alone except for one member, or fails for one member.
struct Faulty {
    layout: Arc<StateLayout>,
    mutate: Option<usize>,
    fail: Option<usize>,
    threads: Mutex<BTreeMap<usize, usize>>,
}

impl Faulty {
    fn new(mutate: Option<usize>, fail: Option<usize>) -> Self {
        let layout = build_state_layout([VarSpec::state("x", 3), VarSpec::parameter("p", 1)]).unwrap();
        Faulty {
            layout: Arc::new(layout),
            mutate,
            fail,
            threads: Mutex::new(BTreeMap::new()),
        }
    }
}

impl Model for Faulty {
    fn name(&self) -> &str {
        "faulty"
    }

    fn layout(&self) -> Arc<StateLayout> {
        self.layout.clone()
    }

    fn initial_state(&self) -> Result<DVector<f64>> {
        Ok(DVector::from_vec(vec![1.0, 2.0, 3.0, 0.5]))
    }

    fn forecast_step_single(&self, state: &mut [f64], _dt: f64, ctx: &StepContext) -> Result<()> {
        self.threads.lock().unwrap().insert(ctx.member, ctx.threads);
        if self.fail == Some(ctx.member) {
            return Err(Error::Model("deliberate failure".into()));
        }
        state[0] += 1.0;
        if self.mutate == Some(ctx.member) {
            state[3] += 1e-9;
        }
        Ok(())
    }
}

fn faulty_run(model: Arc<Faulty>, members: usize, workers: usize) -> Result<()> {
    let dir = TempDir::new().unwrap();
    let store = EnsembleStore::create(dir.path()).unwrap();
    let mut o = Orchestrator::new(store, model.clone(), members, 1.0, OrchestratorConfig::new(workers, ParallelMode::Partial, FilterKind::Ensrf))?;
    let x0 = model.initial_state()?;
    o.initialize_matrix(&DMatrix::from_fn(4, members, |r, c| x0[r] + 0.1 * c as f64))?;
    o.advance(2)
}

#[test]
fn parameter_mutation_is_detected() {
    let err = faulty_run(Arc::new(Faulty::new(Some(2), None)), 4, 2).unwrap_err();
    match err {
        Error::Member { member, source } => {
            assert_eq!(member, 2);
            assert!(matches!(*source, Error::ParameterMutated(2)));
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn member_failure_carries_member_id() {
    let err = faulty_run(Arc::new(Faulty::new(None, Some(3))), 5, 2).unwrap_err();
    assert!(matches!(err, Error::Member { member: 3, .. }), "{err}");
    assert!(err.to_string().contains("member 3"));
}

#[test]
fn fewer_members_than_workers_share_workers() {
    let model = Arc::new(Faulty::new(None, None));
    faulty_run(model.clone(), 4, 10).unwrap();
    let threads = model.threads.lock().unwrap().clone();
    assert_eq!(threads.values().copied().collect::<Vec<_>>(), vec![3, 3, 2, 2]);
    let model = Arc::new(Faulty::new(None, None));
    faulty_run(model.clone(), 6, 3).unwrap();
    assert!(model.threads.lock().unwrap().values().all(|&t| t == 1));
}

#[test]
fn completed_steps_stay_immutable() {
    let model = l96();
    let dir = TempDir::new().unwrap();
    let mut o = orchestrator(&dir, model.clone(), 8, noisy_cfg(2, ParallelMode::Full, FilterKind::Senkf));
    o.initialize_matrix(&l96_ensemble(&model, 8)).unwrap();
    let h = alternating(40);
    o.assimilate(&batch_at(2, DVector::from_element(20, 1.0), 1.0), &h).unwrap();
    let first = std::fs::read(o.store().file_path("ensemble/000002.bin").unwrap()).unwrap();
    for k in 2..=6 {
        o.assimilate(&batch_at(2 * k, DVector::from_element(20, 1.0), 1.0), &h).unwrap();
    }
    let again = std::fs::read(o.store().file_path("ensemble/000002.bin").unwrap()).unwrap();
    assert_eq!(first, again);
    let err = o
        .store()
        .write_hyperslab("ensemble/000002", 0..1, 0..1, &DMatrix::zeros(1, 1))
        .unwrap_err();
    assert!(matches!(err, Error::DatasetFinalized(_)));
}

#[test]
fn datasets_follow_naming_scheme() {
    let model = l96();
    let init = l96_ensemble(&model, 6);
    let h = alternating(40);
    for mode in [ParallelMode::Partial, ParallelMode::Full] {
        let dir = TempDir::new().unwrap();
        let mut o = orchestrator(&dir, model.clone(), 6, noisy_cfg(2, mode, FilterKind::Ensrf));
        o.initialize_matrix(&init).unwrap();
        o.assimilate(&batch_at(3, DVector::from_element(20, 0.0), 1.0), &h).unwrap();
        let s = o.store();
        assert_eq!(s.list("ensemble").unwrap().len(), 4);
        assert_eq!(s.list("forecast").unwrap(), vec!["forecast/000003".to_string()]);
        assert!(s.exists("forecast_mean/000003"));
        assert!(s.exists("mean/000003"));
        // Intermediate means only in partial mode.
        assert_eq!(s.exists("mean/000001"), mode == ParallelMode::Partial);
        assert!(s.exists("noise/x/000003"));
        assert_eq!(s.shape("noise/x/000003").unwrap(), (40, 6));
    }
}

#[test]
fn assimilation_must_move_forward() {
    let model = l96();
    let dir = TempDir::new().unwrap();
    let mut o = orchestrator(&dir, model.clone(), 4, OrchestratorConfig::new(1, ParallelMode::Partial, FilterKind::Ensrf));
    o.initialize_matrix(&l96_ensemble(&model, 4)).unwrap();
    o.advance(4).unwrap();
    let h = alternating(40);
    assert!(o.assimilate(&batch_at(4, DVector::zeros(20), 1.0), &h).is_err());
    assert!(o.assimilate(&batch_at(5, DVector::zeros(20), 1.0), &h).is_ok());
}

#[test]
fn post_analysis_hook_only_in_partial_mode() {
    let model = l96();
    let dir = TempDir::new().unwrap();
    let mut full = orchestrator(&dir, model.clone(), 4, OrchestratorConfig::new(1, ParallelMode::Full, FilterKind::Ensrf));
    assert!(full.set_post_analysis(Box::new(|_, _, _| Ok(()))).is_err());

    let dir = TempDir::new().unwrap();
    let mut o = orchestrator(&dir, model.clone(), 4, OrchestratorConfig::new(1, ParallelMode::Partial, FilterKind::Ensrf));
    o.set_post_analysis(Box::new(|x, _, _| {
        x.row_mut(0).fill(42.0);
        Ok(())
    }))
    .unwrap();
    o.initialize_matrix(&l96_ensemble(&model, 4)).unwrap();
    o.assimilate(&batch_at(2, DVector::zeros(20), 1.0), &alternating(40)).unwrap();
    let xa = o.store().read_matrix(&step_name("ensemble", 2)).unwrap();
    assert!(xa.row(0).iter().all(|&v| v == 42.0));
}

fn flowline_run(mode: ParallelMode, workers: usize) -> (DMatrix<f64>, Vec<bool>) {
    let params = FlowlineParams {
        cells: 20,
        length: 20_000.0,
        ..FlowlineParams::default()
    };
    let model: Arc<dyn Model> = Arc::new(Flowline::new(params).unwrap());
    let layout = model.layout();
    let guess = model.initial_state().unwrap();
    let spec = EnsembleInitSpec {
        spreads: vec![5.0, 0.0, 0.3],
        lengths: vec![3000.0, 3000.0, 1.0],
    };
    let init = initialize_ensemble(&guess, layout.clone(), &spec, 12, 4).unwrap();
    let dir = TempDir::new().unwrap();
    let store = EnsembleStore::create(dir.path()).unwrap();
    let mut cfg = OrchestratorConfig::new(workers, mode, FilterKind::Ensrf);
    cfg.state_inflation = 1.01;
    cfg.param_inflation = 1.05;
    cfg.param_spread_floor = Some(0.05);
    let mut o = Orchestrator::new(store, model.clone(), 12, 0.5, cfg).unwrap();
    o.initialize(&init).unwrap();
    let idx: Vec<usize> = (0..20).step_by(3).collect();
    let h = ObservationOperator::selection(layout.len(), &idx).unwrap();
    let mut fallback = Vec::new();
    for k in 1..=3 {
        let y = DVector::from_iterator(idx.len(), idx.iter().map(|&i| guess[i] + 2.0));
        let b = ObservationBatch::new(k as f64 * 2.0, 4 * k, y, DVector::from_element(idx.len(), 2.0), idx.clone()).unwrap();
        let rep = o.assimilate(&b, &h).unwrap();
        fallback.extend(rep.refresh_fallback);
    }
    (o.store().read_matrix(&step_name("ensemble", 12)).unwrap(), fallback)
}

#[test]
fn parameter_refresh_is_identical_in_both_modes() {
    let (partial, fp) = flowline_run(ParallelMode::Partial, 3);
    for workers in [1, 4] {
        let (full, ff) = flowline_run(ParallelMode::Full, workers);
        assert!(max_diff(&partial, &full) <= 1e-10, "workers {workers}: {}", max_diff(&partial, &full));
        assert_eq!(fp, ff);
    }
    // The refreshed parameter row keeps at least the configured spread.
    let row = partial.row(40);
    let mu = row.mean();
    let sd = (row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 11.0).sqrt();
    assert!(sd >= 0.05 - 1e-12, "{sd}");
}
