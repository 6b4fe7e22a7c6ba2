use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use enkf_core::config::{ModelConfig, RunConfig};
use enkf_core::experiment::{generate_truth, load_report, run_twin_experiment, write_truth, write_truth_csv};
use enkf_core::filters::FilterKind;
use enkf_core::orchestrator::ParallelMode;
use enkf_core::scaling::{scaling_benchmark, write_bench_csv, BenchConfig, ScalingMode};
use enkf_core::store::EnsembleStore;
use enkf_core::Error;

#[derive(Parser)]
#[command(name = "enkf", version, about = "Parallel ensemble Kalman filter twin experiments and scaling runs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a twin experiment: truth, observations, assimilation and a free run.
    Run(RunArgs),
    /// Generate the reference trajectory only.
    Truth(TruthArgs),
    /// Strong or weak scaling benchmark with the fixed-cost model.
    Bench(BenchArgs),
    /// Print the summary of a finished run and export its diagnostics.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Partial,
    Full,
}

impl From<ModeArg> for ParallelMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Partial => ParallelMode::Partial,
            ModeArg::Full => ParallelMode::Full,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ScalingArg {
    Strong,
    Weak,
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
    /// senkf, ensrf, entkf or denkf.
    #[arg(long)]
    filter: Option<FilterKind>,
}

#[derive(Args)]
struct TruthArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Optional run config with a `fixed_cost` model supplying size and cost.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated worker counts; the first is the baseline.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
    workers: Vec<usize>,
    #[arg(long, value_enum, default_value = "strong")]
    scaling: ScalingArg,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    members: Option<usize>,
    #[arg(long)]
    cost_ms: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "bench")]
    output: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Output directory of a finished run.
    #[arg(long)]
    output: PathBuf,
    /// Where to write the diagnostics CSV; stdout when omitted.
    #[arg(long)]
    csv: Option<PathBuf>,
}

/// Failure classes mapped to exit codes.
enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_config() {
            Failure::Config(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

type CliResult = std::result::Result<(), Failure>;

/// Loads and validates a config. A file that cannot be read or parsed is a
/// configuration problem, not a runtime one.
fn load_config(path: &Path) -> std::result::Result<RunConfig, Failure> {
    RunConfig::load(path).map_err(|e| Failure::Config(e.to_string()))
}

fn validated(cfg: RunConfig) -> std::result::Result<RunConfig, Failure> {
    cfg.validate().map_err(|e| Failure::Config(e.to_string()))?;
    Ok(cfg.normalized())
}

fn run(args: RunArgs) -> CliResult {
    let mut cfg = load_config(&args.config)?;
    let o = args.overrides;
    if let Some(w) = o.workers {
        cfg.parallel.workers = w;
    }
    if let Some(m) = o.mode {
        cfg.parallel.mode = m.into();
    }
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if let Some(out) = o.output {
        cfg.output = out;
    }
    if let Some(f) = args.filter {
        if f != cfg.filter && !f.is_stochastic() {
            cfg.innovation = None;
        }
        cfg.filter = f;
    }
    let cfg = validated(cfg)?;
    let (report, timings) = run_twin_experiment(&cfg)?;
    let s = &report.summary;
    println!("run {} ({} / {}, Ne = {}, seed {})", report.run_id, report.model, report.filter, report.members, report.seed);
    println!("cycles {} (spinup {}, evaluated {})", s.cycles, s.spinup_cycles, s.evaluated);
    println!("mean analysis RMSE {:.6}", s.mean_analysis_rmse);
    println!("mean forecast RMSE {:.6}", s.mean_forecast_rmse);
    println!("mean free-run RMSE {:.6}", s.mean_free_rmse);
    println!("mean analysis spread {:.6}", s.mean_analysis_spread);
    if let Some(last) = report.records.last() {
        for p in &last.params {
            println!("{}[{}] {:.6} +/- {:.6} (truth {:.6})", p.name, p.index, p.mean, p.spread, p.truth);
        }
    }
    let ph = &timings.phases;
    println!(
        "time {:.3} s (init {:.3}, forecast {:.3}, analysis {:.3}, io {:.3}, free run {:.3})",
        timings.total.as_secs_f64(),
        ph.init.as_secs_f64(),
        ph.forecast.as_secs_f64(),
        ph.analysis.as_secs_f64(),
        ph.io.as_secs_f64(),
        timings.free_run.as_secs_f64()
    );
    println!("output {}", cfg.output.display());
    Ok(())
}

fn truth(args: TruthArgs) -> CliResult {
    let mut cfg = load_config(&args.config)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(out) = args.output {
        cfg.output = out;
    }
    let cfg = validated(cfg)?;
    let model = cfg.build_model()?;
    let traj = generate_truth(&cfg)?;
    let store = EnsembleStore::create(&cfg.output)?;
    store.write_meta("config", &cfg)?;
    write_truth(&store, &traj)?;
    let csv = cfg.output.join("truth.csv");
    write_truth_csv(&csv, &traj, &model.layout())?;
    println!("{} steps of {} written to {}", traj.len(), model.name(), csv.display());
    Ok(())
}

fn bench(args: BenchArgs) -> CliResult {
    let mut cfg = BenchConfig::default();
    if let Some(path) = &args.config {
        let rc = validated(load_config(path)?)?;
        match rc.model {
            ModelConfig::FixedCost { n, cost_ms } => {
                cfg.state_dim = n;
                cfg.cost = Duration::from_millis(cost_ms);
            }
            _ => return Err(Failure::Config("configuration error at `model.name`: bench needs the fixed_cost model".into())),
        }
        cfg.members = rc.members;
        cfg.mode = rc.parallel.mode;
        cfg.seed = rc.seed;
    }
    if let Some(m) = args.members {
        cfg.members = m;
    }
    if let Some(c) = args.cost_ms {
        cfg.cost = Duration::from_millis(c);
    }
    if let Some(m) = args.mode {
        cfg.mode = m.into();
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if args.workers.is_empty() || args.workers.contains(&0) {
        return Err(Failure::Config("configuration error at `workers`: worker counts must be positive".into()));
    }
    if cfg.members < 2 {
        return Err(Failure::Config("configuration error at `members`: need at least two members".into()));
    }
    let mode = match args.scaling {
        ScalingArg::Strong => ScalingMode::Strong,
        ScalingArg::Weak => ScalingMode::Weak,
    };
    std::fs::create_dir_all(&args.output).map_err(|e| Failure::Runtime(format!("{}: {e}", args.output.display())))?;
    let scratch = args.output.join("scratch");
    if scratch.exists() {
        std::fs::remove_dir_all(&scratch).map_err(|e| Failure::Runtime(format!("{}: {e}", scratch.display())))?;
    }
    let rows = scaling_benchmark(&cfg, &args.workers, mode, &scratch)?;
    let csv = args.output.join("bench.csv");
    write_bench_csv(&csv, &rows)?;
    let _ = std::fs::remove_dir_all(&scratch);
    println!("{:>7} {:>7} {:>10} {:>8} {:>8} {:>8}", "workers", "members", "wall [s]", "speedup", "eff [%]", "fc eff");
    for r in &rows {
        println!(
            "{:>7} {:>7} {:>10.3} {:>8.3} {:>8.2} {:>8.2}",
            r.record.workers,
            r.members,
            r.record.wall_time,
            r.speedup,
            r.efficiency * 100.0,
            r.forecast_efficiency * 100.0
        );
    }
    println!("written to {}", csv.display());
    Ok(())
}

fn report(args: ReportArgs) -> CliResult {
    let rep = load_report(&args.output)?;
    match &args.csv {
        Some(path) => rep.write_csv(path)?,
        None => {
            let tmp = args.output.join("diagnostics.csv");
            if !tmp.exists() {
                rep.write_csv(&tmp)?;
            }
            let text = std::fs::read_to_string(&tmp).map_err(|e| Failure::Runtime(format!("{}: {e}", tmp.display())))?;
            print!("{text}");
        }
    }
    let s = &rep.summary;
    eprintln!(
        "run {}: analysis RMSE {:.6}, free-run RMSE {:.6} over {} cycles",
        rep.run_id, s.mean_analysis_rmse, s.mean_free_rmse, s.evaluated
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Truth(a) => truth(a),
        Command::Bench(a) => bench(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
