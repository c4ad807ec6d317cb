//! `rio`: replay datasets, evaluate trajectories, generate synthetic data.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rio_core::config::RunConfig;
use rio_core::eval::{aggregate_runs, compute_metrics, MetricReport};
use rio_core::io::{read_trajectory, write_trajectory_file};
use rio_core::manager::MatchOptions;
use rio_core::replay::{load_dataset, run_replay, ReplayOptions};
use rio_core::sim::{simulate, ScenarioSpec};
use rio_core::{Error, Result};

#[derive(Parser)]
#[command(name = "rio", version, about = "Radar-inertial odometry replay and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Replay a recorded dataset through the filter.
    Run(RunArgs),
    /// Compare an estimated trajectory against a reference.
    Eval(EvalArgs),
    /// Evaluate many runs and print the percentile table as CSV.
    EvalBatch(BatchArgs),
    /// Generate a synthetic dataset.
    Simulate(SimArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    imu: PathBuf,
    /// Radar stream as `<id>=<file>`; repeat per sensor.
    #[arg(long = "radar", value_parser = parse_radar)]
    radars: Vec<(String, PathBuf)>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed recorded in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    disable_doppler_coupling: bool,
    #[arg(long)]
    disable_cross_matching: bool,
    #[arg(long)]
    max_features: Option<usize>,
    /// Write run diagnostics as JSON.
    #[arg(long)]
    diag: Option<PathBuf>,
    /// Check the full covariance (symmetry, positive definiteness) after every step.
    #[arg(long)]
    strict_health: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    est: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Resampling rate, Hz.
    #[arg(long, default_value_t = 2.0)]
    rate: f64,
    /// Write the full report (including per-pair errors) as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct BatchArgs {
    /// Pattern matching estimated trajectories, e.g. `runs/*/traj.csv`.
    #[arg(long)]
    glob: String,
    /// Reference file name, looked up next to each estimate.
    #[arg(long, default_value = "gt.csv")]
    ref_name: String,
    #[arg(long, default_value_t = 2.0)]
    rate: f64,
    /// Write the table here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimArgs {
    /// Scenario TOML; the parking scenario when absent.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Enable sensor noise with the scenario's parameters.
    #[arg(long)]
    noise: bool,
    /// Fraction of landmarks that move.
    #[arg(long)]
    movers: Option<f64>,
    #[arg(long)]
    duration: Option<f64>,
}

fn parse_radar(s: &str) -> std::result::Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((id, path)) if !id.is_empty() && !path.is_empty() => Ok((id.to_string(), PathBuf::from(path))),
        _ => Err(format!("expected <id>=<file>, got `{s}`")),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        "config" => 3,
        "dataset" => 4,
        "input" => 5,
        "io" => 6,
        "numerical-health" => 7,
        "propagation" => 8,
        "geometry" => 9,
        "feature-bookkeeping" => 10,
        _ => 1,
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::InvalidInput(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn run(args: RunArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(n) = args.max_features {
        cfg.max_features = n;
    }
    cfg.validate()?;
    let events = load_dataset(&args.imu, &args.radars, &cfg)?;
    let options = ReplayOptions {
        matching: MatchOptions {
            doppler_coupling: !args.disable_doppler_coupling,
            cross_matching: !args.disable_cross_matching,
        },
        strict_health: args.strict_health,
    };
    let outcome = run_replay(&events, &cfg, options)?;
    write_trajectory_file(&args.out, &outcome.trajectory)?;
    if let Some(path) = &args.diag {
        write_json(path, &outcome.diagnostics)?;
    }
    let d = &outcome.diagnostics;
    eprintln!(
        "{} poses, {} scans, {} matched ({} cross), {} inserted, mean {:.1} features",
        outcome.trajectory.len(),
        d.scans,
        d.matched,
        d.cross_matched,
        d.inserted,
        d.mean_feature_count
    );
    match outcome.error {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn summary(m: &MetricReport) -> String {
    format!(
        "ape_rmse {:.6} m\nrpe_rmse {:.6} m\nrre_rmse {:.6} deg\nend_pose_error {:.6} m\ntrajectory_rmse {:.6} m\nsamples {}\n",
        m.ape_rmse, m.rpe_rmse, m.rre_rmse, m.end_pose_error, m.trajectory_rmse, m.samples
    )
}

fn eval(args: EvalArgs) -> Result<()> {
    let est = read_trajectory(&args.est)?;
    let reference = read_trajectory(&args.reference)?;
    let report = compute_metrics(&est, &reference, args.rate)?;
    if !report.rotation_aligned {
        eprintln!("warning: degenerate path, APE aligned by translation only");
    }
    io::stdout().write_all(summary(&report).as_bytes())?;
    if let Some(path) = &args.report {
        write_json(path, &report)?;
    }
    Ok(())
}

fn eval_batch(args: BatchArgs) -> Result<()> {
    let paths = glob::glob(&args.glob).map_err(|e| Error::InvalidInput(format!("bad pattern: {e}")))?;
    let mut reports = Vec::new();
    for entry in paths {
        let est_path = entry.map_err(|e| Error::Io(e.into()))?;
        let ref_path = est_path.with_file_name(&args.ref_name);
        if ref_path == est_path {
            continue;
        }
        let est = read_trajectory(&est_path)?;
        let reference = read_trajectory(&ref_path)?;
        reports.push(compute_metrics(&est, &reference, args.rate)?);
    }
    if reports.is_empty() {
        return Err(Error::InvalidInput(format!("no trajectories match `{}`", args.glob)));
    }
    let table = aggregate_runs(&reports)?;
    match &args.out {
        Some(path) => table.write_csv(fs::File::create(path)?),
        None => table.write_csv(io::stdout().lock()),
    }
}

fn sim(args: SimArgs) -> Result<()> {
    let mut spec = match &args.scenario {
        Some(path) => ScenarioSpec::from_toml(&fs::read_to_string(path)?)?,
        None => ScenarioSpec::parking(),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    if args.noise {
        spec.noise.enabled = true;
    }
    if let Some(f) = args.movers {
        spec.landmarks.mover_fraction = f;
    }
    if let Some(d) = args.duration {
        spec.duration = d;
    }
    spec.validate()?;
    let files = simulate(&spec)?.write(&args.out)?;
    eprintln!("wrote {} and {} radar streams", files.imu.display(), files.radars.len());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Eval(a) => eval(a),
        Command::EvalBatch(a) => eval_batch(a),
        Command::Simulate(a) => sim(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.class());
            ExitCode::from(exit_code(&e))
        }
    }
}
