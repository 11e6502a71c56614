//! Implementations of the runner's subcommands.

use std::cmp::Ordering;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use fedmsa::baselines::{run_centralized_msa, run_frozen_indirect};
use fedmsa::datagen::dataset_to_csv;
use fedmsa::msa::{run_fedmsa, HyperParams, MsaError, RoundRecord, RunTrajectory};
use fedmsa::numerics::Vector;
use fedmsa::verify::{verify_covariance_order_grid, verify_neumann_grid, VerifyGridConfig};

use crate::config::{
    read_json, resolve_seed, Algorithm, BuiltProblem, CompareConfig, ExperimentConfig,
    GenDataConfig, GenParams,
};
use crate::CliError;

const METRICS_HEADER: &str = "round,updates,comms,stationarity,norm_P_sq,sum_z_gap_sq,dist_to_xstar";

// ---------------------------------------------------------------------------
// Shared output plumbing
// ---------------------------------------------------------------------------

fn write_text(dir: &Path, name: &str, text: &str) -> Result<PathBuf, CliError> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::Config(format!("cannot create {}: {e}", dir.display())))?;
    let path = dir.join(name);
    fs::write(&path, text)
        .map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))?;
    Ok(path)
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf, CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Config(format!("cannot serialize {name}: {e}")))?;
    text.push('\n');
    write_text(dir, name, &text)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Renders a trajectory as CSV, keeping every `every`-th round plus the
/// final one.  Floats print in shortest round-trip form, missing metrics as
/// empty cells.
fn metrics_csv(rounds: &[RoundRecord], every: usize) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    let last = rounds.len().saturating_sub(1);
    for (i, rec) in rounds.iter().enumerate() {
        if i % every != 0 && i != last {
            continue;
        }
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            rec.round,
            rec.updates,
            rec.comms,
            fmt_opt(rec.stationarity),
            fmt_opt(rec.norm_p_sq),
            fmt_opt(rec.sum_z_gap_sq),
            fmt_opt(rec.dist_to_xstar),
        ));
    }
    out
}

/// Dispatches one algorithm on one built problem.
fn execute(
    problem: &BuiltProblem,
    algorithm: Algorithm,
    hyper: &HyperParams,
) -> Result<RunTrajectory, MsaError> {
    match algorithm {
        Algorithm::Fedmsa => run_fedmsa(problem.as_msa(), hyper),
        Algorithm::Centralized => run_centralized_msa(problem.as_msa(), hyper),
        Algorithm::FrozenIndirect => match problem.as_direct() {
            Some(p) => run_frozen_indirect(p, hyper),
            None => Err(MsaError::Unsupported(
                "frozen-indirect needs a problem with a direct outer component \
                 (quadratic-bilevel)"
                    .into(),
            )),
        },
    }
}

fn run_error(label: &str, err: MsaError) -> CliError {
    match err {
        MsaError::Divergence { round, what } => CliError::Divergence {
            round,
            what: format!("{label}: {what} became non-finite"),
        },
        other => CliError::Config(format!("{label}: {other}")),
    }
}

fn cmp_opt(a: Option<f64>, b: Option<f64>) -> Ordering {
    match (a, b) {
        (Some(x), Some(y)) => x.total_cmp(&y),
        (Some(_), None) => Ordering::Less,
        (None, Some(_)) => Ordering::Greater,
        (None, None) => Ordering::Equal,
    }
}

// ---------------------------------------------------------------------------
// run
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct RunResult<'a> {
    /// Effective config after command-line and environment overrides;
    /// re-parses to the configuration that was actually run.
    config: &'a ExperimentConfig,
    seed: u64,
    seed_from_env: bool,
    wall_time_seconds: f64,
    rounds_recorded: usize,
    final_round: Option<&'a RoundRecord>,
    final_stationarity: Option<f64>,
    final_dist_to_xstar: Option<f64>,
    /// Output point under the configured report mode.
    report_x: &'a Vector,
}

#[derive(Serialize)]
struct DivergedResult<'a> {
    config: &'a ExperimentConfig,
    seed: u64,
    seed_from_env: bool,
    diverged_at_round: usize,
    what: &'a str,
}

pub fn run(
    config_path: &Path,
    out: Option<PathBuf>,
    algorithm: Option<Algorithm>,
) -> Result<(), CliError> {
    let mut cfg: ExperimentConfig = read_json(config_path)?;
    if let Some(a) = algorithm {
        cfg.algorithm = a;
    }
    if let Some(o) = out {
        cfg.out_dir = o;
    }
    cfg.validate()?;
    let (seed, seed_from_env) = resolve_seed(&mut cfg.hyper)?;

    let problem = BuiltProblem::build(&cfg.problem)?;
    let started = Instant::now();
    let trajectory = match execute(&problem, cfg.algorithm, &cfg.hyper) {
        Ok(t) => t,
        Err(MsaError::Divergence { round, what }) => {
            write_json(
                &cfg.out_dir,
                "result.json",
                &DivergedResult {
                    config: &cfg,
                    seed,
                    seed_from_env,
                    diverged_at_round: round,
                    what: &what,
                },
            )?;
            return Err(run_error(cfg.algorithm.name(), MsaError::Divergence { round, what }));
        }
        Err(other) => return Err(run_error(cfg.algorithm.name(), other)),
    };
    let wall_time_seconds = started.elapsed().as_secs_f64();

    let csv = metrics_csv(&trajectory.rounds, cfg.metric_every);
    let csv_path = write_text(&cfg.out_dir, "metrics.csv", &csv)?;
    let result_path = write_json(
        &cfg.out_dir,
        "result.json",
        &RunResult {
            config: &cfg,
            seed,
            seed_from_env,
            wall_time_seconds,
            rounds_recorded: trajectory.rounds.len(),
            final_round: trajectory.rounds.last(),
            final_stationarity: trajectory.final_stationarity(),
            final_dist_to_xstar: trajectory.final_dist_to_xstar(),
            report_x: &trajectory.report_x,
        },
    )?;

    println!(
        "{}: {} rounds in {:.2}s  stationarity={}  dist_to_xstar={}",
        cfg.algorithm.name(),
        trajectory.rounds.len(),
        wall_time_seconds,
        fmt_opt(trajectory.final_stationarity()),
        fmt_opt(trajectory.final_dist_to_xstar()),
    );
    println!("wrote {} and {}", csv_path.display(), result_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// verify-neumann / verify-covariance-order
// ---------------------------------------------------------------------------

fn load_grid(config: Option<&Path>) -> Result<VerifyGridConfig, CliError> {
    match config {
        Some(path) => read_json(path),
        None => Ok(VerifyGridConfig::default()),
    }
}

pub fn verify_neumann(config: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let grid = load_grid(config)?;
    let report = verify_neumann_grid(&grid)
        .map_err(|e| CliError::Config(format!("verify-neumann: {e}")))?;
    for c in &report.cells {
        println!(
            "dim={} kappa={} xi_kappa={}: bias {:.3e} (bound {:.3e}), variance {:.3e} \
             (bound {:.3e}){} -> {}",
            c.dim,
            c.kappa,
            c.xi_kappa,
            c.empirical_bias,
            c.bias_bound,
            c.empirical_variance,
            c.variance_bound_general,
            if c.small_noise_regime { ", small-noise regime" } else { "" },
            if c.pass { "pass" } else { "FAIL" },
        );
    }
    let path = write_json(out, "neumann_report.json", &report)?;
    println!("wrote {}", path.display());
    if report.all_pass {
        println!("all {} cells pass", report.cells.len());
        Ok(())
    } else {
        let failed = report.cells.iter().filter(|c| !c.pass).count();
        Err(CliError::Verification(format!(
            "verify-neumann: {failed}/{} cells failed",
            report.cells.len()
        )))
    }
}

pub fn verify_covariance_order(config: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let grid = load_grid(config)?;
    let report = verify_covariance_order_grid(&grid)
        .map_err(|e| CliError::Config(format!("verify-covariance-order: {e}")))?;
    for c in &report.cells {
        println!(
            "dim={} kappa={} xi_kappa={}: witness eigenvalue {:.3e} (slack {:.3e}) -> {}",
            c.dim,
            c.kappa,
            c.xi_kappa,
            c.report.witness_eigenvalue,
            c.report.slack,
            if c.report.pass { "pass" } else { "FAIL" },
        );
    }
    let path = write_json(out, "covariance_order_report.json", &report)?;
    println!("wrote {}", path.display());
    if report.all_pass {
        println!("all {} cells pass", report.cells.len());
        Ok(())
    } else {
        let failed = report.cells.iter().filter(|c| !c.report.pass).count();
        Err(CliError::Verification(format!(
            "verify-covariance-order: {failed}/{} cells failed",
            report.cells.len()
        )))
    }
}

// ---------------------------------------------------------------------------
// compare
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct SummaryEntry {
    label: String,
    algorithm: &'static str,
    k: usize,
    rounds: usize,
    /// `r·k` the run was budgeted for.
    nominal_updates: usize,
    /// Updates the engine actually performed (round 0 always takes one
    /// step, so this can differ slightly from nominal).
    actual_updates: usize,
    comms: usize,
    final_stationarity: Option<f64>,
    final_norm_p_sq: Option<f64>,
    final_sum_z_gap_sq: Option<f64>,
    final_dist_to_xstar: Option<f64>,
    metrics_file: String,
    wall_time_seconds: f64,
}

#[derive(Serialize)]
struct CompareSummary<'a> {
    config: &'a CompareConfig,
    seed: u64,
    seed_from_env: bool,
    /// Sorted by final distance to the reference point (unknown last),
    /// then by final stationarity.
    entries: Vec<SummaryEntry>,
    /// Labels of `entries`, in the same order.
    ranking: Vec<String>,
}

pub fn compare(config_path: &Path, out: Option<PathBuf>) -> Result<(), CliError> {
    let mut cfg: CompareConfig = read_json(config_path)?;
    if let Some(o) = out {
        cfg.out_dir = o;
    }
    cfg.validate()?;
    let (seed, seed_from_env) = resolve_seed(&mut cfg.hyper)?;

    let problem = BuiltProblem::build(&cfg.problem)?;
    let sweep = cfg.k_sweep.clone();

    let mut entries = Vec::new();
    for &algorithm in &cfg.algorithms {
        let ks: Vec<usize> = sweep.clone().unwrap_or_else(|| vec![cfg.hyper.k]);
        for k in ks {
            let mut hyper = cfg.hyper.clone();
            hyper.k = k;
            let label = if sweep.is_some() {
                format!("{}_k{}", algorithm.name(), k)
            } else {
                algorithm.name().to_string()
            };
            let started = Instant::now();
            let trajectory =
                execute(&problem, algorithm, &hyper).map_err(|e| run_error(&label, e))?;
            let wall_time_seconds = started.elapsed().as_secs_f64();

            let metrics_file = format!("metrics_{label}.csv");
            write_text(
                &cfg.out_dir,
                &metrics_file,
                &metrics_csv(&trajectory.rounds, cfg.metric_every),
            )?;
            let last = trajectory.rounds.last();
            println!(
                "{label}: rounds={} updates={} stationarity={} dist_to_xstar={}",
                hyper.r,
                last.map_or(0, |r| r.updates),
                fmt_opt(trajectory.final_stationarity()),
                fmt_opt(trajectory.final_dist_to_xstar()),
            );
            entries.push(SummaryEntry {
                label,
                algorithm: algorithm.name(),
                k,
                rounds: trajectory.rounds.len(),
                nominal_updates: hyper.r * k,
                actual_updates: last.map_or(0, |r| r.updates),
                comms: last.map_or(0, |r| r.comms),
                final_stationarity: trajectory.final_stationarity(),
                final_norm_p_sq: last.and_then(|r| r.norm_p_sq),
                final_sum_z_gap_sq: last.and_then(|r| r.sum_z_gap_sq),
                final_dist_to_xstar: trajectory.final_dist_to_xstar(),
                metrics_file,
                wall_time_seconds,
            });
        }
    }

    entries.sort_by(|a, b| {
        cmp_opt(a.final_dist_to_xstar, b.final_dist_to_xstar)
            .then_with(|| cmp_opt(a.final_stationarity, b.final_stationarity))
    });
    let ranking: Vec<String> = entries.iter().map(|e| e.label.clone()).collect();
    let path = write_json(
        &cfg.out_dir,
        "summary.json",
        &CompareSummary { config: &cfg, seed, seed_from_env, entries, ranking },
    )?;
    println!("wrote {}", path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

pub fn gen_data(config_path: &Path, out: Option<PathBuf>) -> Result<(), CliError> {
    let mut cfg: GenDataConfig = read_json(config_path)?;
    if let Some(o) = out {
        cfg.out_dir = o;
    }
    match cfg.parse_params()? {
        GenParams::Bilevel(spec) => {
            let instance = fedmsa::datagen::gen_quadratic_bilevel(&spec)
                .map_err(|e| CliError::Config(format!("bilevel generator: {e}")))?;
            if let Some(upsilon) = instance.measured_upsilon {
                println!("measured client dispersion: {upsilon:.6e}");
            }
            let path = write_json(&cfg.out_dir, "instance.json", &instance)?;
            println!("wrote {}", path.display());
        }
        GenParams::RiskAverse(spec) => {
            let dataset = spec.build_dataset()?;
            let csv = dataset_to_csv(&dataset.features, &dataset.labels);
            let csv_path = write_text(&cfg.out_dir, "dataset.csv", &csv)?;
            let partition = spec.build_partition()?;
            let part_path =
                write_json(&cfg.out_dir, "partition.json", &partition.client_indices)?;
            let instance =
                dataset.into_instance(&partition, spec.lambda, spec.delta, spec.squared_hinge);
            let inst_path = write_json(&cfg.out_dir, "instance.json", &instance)?;
            println!(
                "wrote {}, {} and {}",
                csv_path.display(),
                part_path.display(),
                inst_path.display()
            );
        }
    }
    Ok(())
}
