mod commands;
mod config;
mod error;
mod io;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use gpct::metrics::NeesScope;

use crate::commands::{MetricsArgs, QueryArgs, SolveInputs};
use crate::config::{CovarianceSource, DatasetKind, InitKind, RunConfig};
use crate::error::CliError;

/// Continuous-time trajectory estimation with Gaussian-process motion priors.
#[derive(Parser)]
#[command(name = "gpct", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Run the per-state loops on one thread.
    #[arg(long)]
    sequential: bool,
    /// Dataset kind: sinusoid, se2_arc, landmarks, se3.
    #[arg(long)]
    dataset: Option<DatasetKind>,
}

#[derive(Args)]
struct ModelFlags {
    /// Keep every N-th state (and the last) as a border; omit for a full solve.
    #[arg(long)]
    interval: Option<usize>,
    /// Noise of wrapped factors: full or simplified.
    #[arg(long)]
    noise_mode: Option<String>,
    /// Add a regular state grid with this spacing to the measurement times.
    #[arg(long)]
    knot_dt: Option<f64>,
    /// Comma-separated power spectral density diagonal.
    #[arg(long, value_delimiter = ',')]
    qc: Option<Vec<f64>>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (truth.csv, meas.csv, landmarks.csv).
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long)]
        rate: Option<f64>,
        #[arg(long)]
        noise_sd: Option<f64>,
        #[arg(long)]
        n_states: Option<usize>,
        #[arg(long)]
        dt: Option<f64>,
    },
    /// Estimate the trajectory (estimate.csv, solution.json, cost.json, timing.json).
    Solve {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelFlags,
        #[arg(long)]
        meas: PathBuf,
        #[arg(long)]
        landmarks: Option<PathBuf>,
        /// Initial states in the truth.csv layout.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Initialization when no file is given: auto, constant_velocity, piecewise, dead_reckoning.
        #[arg(long)]
        init_mode: Option<InitKind>,
        /// Covariances of interpolated states: interpolated or laplace.
        #[arg(long)]
        covariance: Option<CovarianceSource>,
        #[arg(long)]
        max_iterations: Option<usize>,
    },
    /// Report the structure of the interpolated problem without solving it (reduce.json).
    Reduce {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelFlags,
        #[arg(long)]
        meas: PathBuf,
        #[arg(long)]
        landmarks: Option<PathBuf>,
    },
    /// Evaluate a stored solution at arbitrary times.
    Query {
        #[arg(long)]
        solution: PathBuf,
        /// Comma-separated query times.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        times: Option<Vec<f64>>,
        /// File with one query time per line.
        #[arg(long)]
        times_file: Option<PathBuf>,
        /// Allow times outside the solved span.
        #[arg(long)]
        extrapolate: bool,
        #[arg(long)]
        out: PathBuf,
        /// Per-query timing; defaults to query_timing.json next to the output.
        #[arg(long)]
        timing: Option<PathBuf>,
    },
    /// RMSE and NEES of estimates against ground truth.
    Metrics {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        estimates: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// linear, se2 or se3; taken from the dataset kind when absent.
        #[arg(long)]
        group: Option<String>,
        /// all, estimated or interpolated.
        #[arg(long, default_value = "all")]
        rows: String,
        /// pose or pose_velocity.
        #[arg(long, default_value = "pose_velocity")]
        nees_scope: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn base_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(d) = &common.out_dir {
        cfg.out_dir = d.clone();
    }
    if common.sequential {
        cfg.parallel = false;
    }
    if let Some(k) = common.dataset {
        cfg.dataset.kind = k;
    }
    Ok(cfg)
}

fn apply_model(cfg: &mut RunConfig, m: ModelFlags) {
    if m.interval.is_some() {
        cfg.interval = m.interval;
    }
    if let Some(n) = m.noise_mode {
        cfg.noise_mode = n;
    }
    if m.knot_dt.is_some() {
        cfg.knot_dt = m.knot_dt;
    }
    if m.qc.is_some() {
        cfg.model.qc_diag = m.qc;
    }
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))
}

fn read_times(path: &Path) -> Result<Vec<f64>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| l.parse().map_err(|_| CliError::Validation(format!("{}: bad time '{l}'", path.display()))))
        .collect()
}

fn run(cli: Cli) -> Result<String, CliError> {
    match cli.command {
        Command::Simulate { common, seed, duration, rate, noise_sd, n_states, dt } => {
            let mut cfg = base_config(&common)?;
            let d = &mut cfg.dataset;
            d.duration = duration.unwrap_or(d.duration);
            d.rate = rate.unwrap_or(d.rate);
            d.noise_sd = noise_sd.unwrap_or(d.noise_sd);
            d.n_states = n_states.or(d.n_states);
            d.dt = dt.or(d.dt);
            cfg.seed = seed.or(cfg.seed);
            cfg.validate()?;
            ensure_dir(&cfg.out_dir)?;
            commands::simulate(&cfg)
        }
        Command::Solve { common, model, meas, landmarks, init, init_mode, covariance, max_iterations } => {
            let mut cfg = base_config(&common)?;
            apply_model(&mut cfg, model);
            cfg.init = init_mode.unwrap_or(cfg.init);
            cfg.covariance = covariance.unwrap_or(cfg.covariance);
            cfg.solver.max_iterations = max_iterations.unwrap_or(cfg.solver.max_iterations);
            cfg.validate()?;
            ensure_dir(&cfg.out_dir)?;
            commands::solve(&cfg, &SolveInputs { meas: &meas, landmarks: landmarks.as_deref(), init: init.as_deref() })
        }
        Command::Reduce { common, model, meas, landmarks } => {
            let mut cfg = base_config(&common)?;
            apply_model(&mut cfg, model);
            cfg.validate()?;
            ensure_dir(&cfg.out_dir)?;
            commands::reduce(&cfg, &meas, landmarks.as_deref())
        }
        Command::Query { solution, times, times_file, extrapolate, out, timing } => {
            let times = match (times, times_file) {
                (Some(t), None) => t,
                (None, Some(f)) => read_times(&f)?,
                _ => return Err(CliError::Validation("give exactly one of --times and --times-file".into())),
            };
            let timing = timing.unwrap_or_else(|| out.with_file_name("query_timing.json"));
            commands::query(&QueryArgs { solution, times, extrapolate, out, timing })
        }
        Command::Metrics { common, estimates, truth, group, rows, nees_scope, out } => {
            let cfg = base_config(&common)?;
            let scope = match nees_scope.as_str() {
                "pose" => NeesScope::Pose,
                "pose_velocity" => NeesScope::PoseVelocity,
                s => return Err(CliError::Validation(format!("unknown NEES scope '{s}' (pose, pose_velocity)"))),
            };
            let out = out.unwrap_or_else(|| cfg.out_dir.join("metrics.json"));
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                ensure_dir(parent)?;
            }
            commands::metrics(&cfg, &MetricsArgs { estimates, truth, group, rows, scope, out })
        }
    }
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(summary) => println!("{summary}"),
        Err(e) => {
            eprintln!("gpct: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
