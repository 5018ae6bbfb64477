//! `sparse-wbc`: verification suites, benchmarks, scenario runs and data
//! export.
//!
//! Exit codes: 0 ok, 1 verification failure, 2 usage or configuration error.

mod verify;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;
use sparse_wbc::dense_ref::bench;
use sparse_wbc::instances::InstanceParams;
use sparse_wbc::rbd::{BaseKind, RobotModel};
use sparse_wbc::sim::{load_scenario, run_scenario, write_csv, write_sidecar, RunOptions, ScenarioLog};
use sparse_wbc::sparse_solver::TorquePath;

/// Default directory for scenario model files when `--model-dir` is absent.
const MODEL_DIR_ENV: &str = "SPARSE_WBC_MODEL_DIR";

#[derive(Parser)]
#[command(name = "sparse-wbc", version, about = "Sparse analytical whole-body motion/force control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Oracle equivalence, decomposition identities and dynamics cross-checks.
    Verify(VerifyArgs),
    /// Sparse decomposition against decomposing the stacked dynamics.
    Bench(BenchArgs),
    /// Run scenarios and write CSV logs with JSON sidecars.
    Simulate(SimulateArgs),
    /// Run scenarios and write tidy `(t, series, value)` CSV for plotting.
    Export(ExportArgs),
}

#[derive(clap::Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 100)]
    instances: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Extra model files to include in the dynamics and Jacobian suites.
    #[arg(long = "model")]
    models: Vec<PathBuf>,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-8)]
    oracle_tol: f64,
    #[arg(long, default_value_t = 1e-9)]
    identity_tol: f64,
    #[arg(long, default_value_t = 1e-9)]
    dynamics_tol: f64,
    #[arg(long, default_value_t = 1e-6)]
    jacobian_tol: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Base {
    Planar,
    Floating,
}

#[derive(clap::Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 23)]
    n: usize,
    #[arg(long, default_value_t = 6)]
    ks: usize,
    #[arg(long, default_value_t = 12)]
    kf: usize,
    #[arg(long, default_value_t = 200)]
    repetitions: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Base::Floating)]
    base: Base,
    /// Also time a full control tick against build + dense solve.
    #[arg(long)]
    end_to_end: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Torque {
    Rnea,
    Matrix,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Scenario TOML files.
    #[arg(required = true)]
    scenarios: Vec<PathBuf>,
    /// Output directory.
    #[arg(long, short, default_value = "out")]
    output: PathBuf,
    /// Directory holding model files; defaults to the scenario's own path
    /// reference, or `SPARSE_WBC_MODEL_DIR` when set.
    #[arg(long)]
    model_dir: Option<PathBuf>,
    /// Simulator step override in seconds.
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    rank_tol: Option<f64>,
    #[arg(long, value_enum, default_value_t = Torque::Rnea)]
    torque_path: Torque,
    /// Solve the force and motion hierarchies on two threads.
    #[arg(long)]
    parallel: bool,
}

#[derive(clap::Args)]
struct SimulateArgs {
    #[command(flatten)]
    run: RunArgs,
}

#[derive(clap::Args)]
struct ExportArgs {
    #[command(flatten)]
    run: RunArgs,
}

/// Error with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

fn runtime(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: message.into(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Verify(a) => cmd_verify(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Simulate(a) => cmd_simulate(a.run),
        Command::Export(a) => cmd_export(a.run),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn cmd_verify(a: VerifyArgs) -> Result<(), Failure> {
    if a.instances == 0 {
        return Err(usage("--instances must be positive"));
    }
    let mut models = Vec::new();
    for p in &a.models {
        models.push(RobotModel::load(p).map_err(|e| usage(format!("{}: {e}", p.display())))?);
    }
    let tol = verify::Tolerances {
        oracle: a.oracle_tol,
        identity: a.identity_tol,
        dynamics: a.dynamics_tol,
        jacobian: a.jacobian_tol,
        ..Default::default()
    };
    let report = verify::run(a.instances, a.seed, &models, &tol);
    print!("{}", report.table());
    let text = serde_json::to_string_pretty(&report.to_json()).map_err(|e| runtime(e.to_string()))?;
    match &a.report {
        Some(p) => fs::write(p, text).map_err(|e| usage(format!("{}: {e}", p.display())))?,
        None => println!("{text}"),
    }
    if report.passed() {
        Ok(())
    } else {
        Err(runtime("verification failed"))
    }
}

fn cmd_bench(a: BenchArgs) -> Result<(), Failure> {
    let base = match a.base {
        Base::Planar => BaseKind::Planar,
        Base::Floating => BaseKind::Floating,
    };
    let params = InstanceParams {
        base,
        n: a.n,
        k_s: a.ks,
        k_f: a.kf,
        rank_deficient_f: false,
    };
    let r = bench(params, a.repetitions, a.seed, a.end_to_end).map_err(|e| usage(e.to_string()))?;
    println!("n = {}, k_s = {}, k_f = {}, base_dim = {}, repetitions = {}", r.n, r.k_s, r.k_f, r.base_dim, r.repetitions);
    println!("{:<22} {:>12} {:>12}", "", "median ms", "std ms");
    println!("{:<22} {:>12.4} {:>12.4}", "sparse decomposition", r.sparse_decompose_ms, r.sparse_std_ms);
    println!("{:<22} {:>12.4} {:>12.4}", "dense decomposition", r.dense_decompose_ms, r.dense_std_ms);
    if let (Some(s), Some(d)) = (r.sparse_end_to_end_ms, r.dense_end_to_end_ms) {
        println!("{:<22} {:>12.4}", "sparse end-to-end", s);
        println!("{:<22} {:>12.4}", "dense end-to-end", d);
    }
    println!("speedup {:.2}x", r.ratio);
    println!("{}", serde_json::to_string(&r).map_err(|e| runtime(e.to_string()))?);
    Ok(())
}

fn run_options(a: &RunArgs) -> Result<RunOptions, Failure> {
    let mut options = RunOptions {
        dt: a.dt,
        ..Default::default()
    };
    if let Some(dt) = a.dt {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(usage(format!("--dt must be positive, got {dt}")));
        }
    }
    if let Some(t) = a.rank_tol {
        options.control.rank_tol = t;
    }
    options.control.torque_path = match a.torque_path {
        Torque::Rnea => TorquePath::Rnea,
        Torque::Matrix => TorquePath::Matrix,
    };
    options.control.parallel = a.parallel;
    Ok(options)
}

/// Loads and runs every scenario; loading problems are usage errors, run
/// failures are runtime errors.
fn run_all(a: &RunArgs) -> Result<Vec<(ScenarioLog, RobotModel)>, Failure> {
    let options = run_options(a)?;
    let model_dir = a.model_dir.clone().or_else(|| std::env::var_os(MODEL_DIR_ENV).map(PathBuf::from));
    let mut loaded = Vec::new();
    for p in &a.scenarios {
        let (script, model) =
            load_scenario(p, model_dir.as_deref()).map_err(|e| usage(format!("{}: {e}", p.display())))?;
        loaded.push((script, model));
    }
    fs::create_dir_all(&a.output).map_err(|e| usage(format!("{}: {e}", a.output.display())))?;
    let mut logs = Vec::new();
    for (script, model) in loaded {
        let log = run_scenario(&script, &model, &options).map_err(|e| runtime(format!("{}: {e}", script.name)))?;
        logs.push((log, model));
    }
    Ok(logs)
}

fn write_err(path: &Path, e: impl std::fmt::Display) -> Failure {
    runtime(format!("{}: {e}", path.display()))
}

fn cmd_simulate(a: RunArgs) -> Result<(), Failure> {
    let options = run_options(&a)?;
    let logs = run_all(&a)?;
    for (log, model) in &logs {
        let csv = a.output.join(format!("{}.csv", log.name));
        let sidecar = a.output.join(format!("{}.json", log.name));
        write_csv(log, &csv).map_err(|e| write_err(&csv, e))?;
        write_sidecar(log, model, &options, &sidecar).map_err(|e| write_err(&sidecar, e))?;
        let m = &log.metrics;
        println!(
            "{}: {} ticks, COM RMSE {:.3e} m, max |Δτ| at switches {:.3} N·m, max penetration {:.3e} m -> {}",
            log.name,
            log.ticks,
            m.com_rmse,
            m.max_tau_jump,
            m.max_penetration,
            csv.display()
        );
        for f in &m.forces {
            println!(
                "  force {} axis {} in '{}': target {:.3} N, steady-state error {:.3e} N",
                f.frame, f.axis, f.phase, f.target, f.steady_state_error
            );
        }
    }
    if logs.len() > 1 {
        let summary = comparison(&logs);
        for row in summary["runs"].as_array().into_iter().flatten() {
            println!("  {} max |Δτ| {:.4} N·m", row["scenario"].as_str().unwrap_or(""), row["max_tau_jump"]);
        }
        if let Some(r) = summary["ratio_max_to_min"].as_f64() {
            println!("max |Δτ| ratio (largest / smallest): {r:.2}");
        }
        let path = a.output.join("comparison.json");
        let text = serde_json::to_string_pretty(&summary).map_err(|e| runtime(e.to_string()))?;
        fs::write(&path, text).map_err(|e| write_err(&path, e))?;
    }
    Ok(())
}

/// Torque discontinuity and force-step summary across runs.
fn comparison(logs: &[(ScenarioLog, RobotModel)]) -> serde_json::Value {
    let runs: Vec<_> = logs
        .iter()
        .map(|(l, _)| {
            json!({
                "scenario": l.name,
                "max_tau_jump": l.metrics.max_tau_jump,
                "max_normal_force_step": l.metrics.max_normal_force_step,
                "body_weight": l.metrics.body_weight,
                "switches": l.metrics.switches,
            })
        })
        .collect();
    let jumps: Vec<f64> = logs.iter().map(|(l, _)| l.metrics.max_tau_jump).collect();
    let max = jumps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = jumps.iter().copied().fold(f64::INFINITY, f64::min);
    json!({
        "runs": runs,
        "ratio_max_to_min": if min > 0.0 { json!(max / min) } else { json!(null) },
    })
}

/// Plot-ready series: measured and reference forces, COM error and joint
/// torques, one `(t, series, value)` row per sample.
fn tidy(log: &ScenarioLog) -> Vec<(f64, String, f64)> {
    let t = log.column("t").unwrap_or_default();
    let mut series: Vec<(String, Vec<f64>)> = Vec::new();
    for c in &log.columns {
        if c.starts_with("fhat_") || c.starts_with("fref_") || c.starts_with("tau_") {
            series.push((c.clone(), log.column(c).unwrap_or_default()));
        }
    }
    let mut i = 0;
    while let (Some(x), Some(r)) = (log.column(&format!("com_{i}")), log.column(&format!("com_ref_{i}"))) {
        series.push((format!("com_error_{i}"), x.iter().zip(&r).map(|(a, b)| a - b).collect()));
        i += 1;
    }
    let mut rows = Vec::with_capacity(series.len() * t.len());
    for (name, values) in &series {
        for (ti, v) in t.iter().zip(values) {
            rows.push((*ti, name.clone(), *v));
        }
    }
    rows
}

fn cmd_export(a: RunArgs) -> Result<(), Failure> {
    let logs = run_all(&a)?;
    for (log, _) in &logs {
        let path = a.output.join(format!("{}_series.csv", log.name));
        let mut text = String::from("t,series,value\n");
        for (t, name, v) in tidy(log) {
            text += &format!("{t},{name},{v}\n");
        }
        fs::write(&path, text).map_err(|e| write_err(&path, e))?;
        println!("{} -> {}", log.name, path.display());
    }
    Ok(())
}
