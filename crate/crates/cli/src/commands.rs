//! The five subcommands. Each returns a one-line summary for stdout.

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use gpct::chain::{build_chain, check_increasing, find_knot, knot_key, solve_chain, ChainSolution};
use gpct::datasets::{
    build_lie_graph, gen_landmark_benchmark, gen_se2_arc, gen_se3_traj, gen_sinusoid_1d, pose_from_params,
    pose_to_params, LandmarkBenchConfig, LandmarkMap, MeasurementLog, PoseNoise, Se3TrajConfig,
};
use gpct::interp::{
    interp_means, interpolate_factor_graph, linear_bubbling, reduce_chain, update_interp_linear, update_interp_values,
};
use gpct::lie::{LieElement, LieGroup};
use gpct::lie_ct::{
    dead_reckoning, extrapolate_lie, gauss_newton, initialize_from_poses, interpolate_lie, laplace_covariances,
    InitMode, LieSolution, NonlinearGraph, Values,
};
use gpct::linalg::{from_upper_triangle, upper_triangle};
use gpct::lti::LtiModel;
use gpct::metrics::{lie_metrics, vector_metrics, NeesScope};
use gpct::query::{query_at, QueryKind};

use crate::config::{CovarianceSource, DatasetKind, InitKind, RunConfig};
use crate::error::CliError;
use crate::io::{self, EstimateRow};

pub const TRUTH_FILE: &str = "truth.csv";
pub const MEAS_FILE: &str = "meas.csv";
pub const LANDMARK_FILE: &str = "landmarks.csv";
pub const ESTIMATE_FILE: &str = "estimate.csv";
pub const SOLUTION_FILE: &str = "solution.json";
pub const COST_FILE: &str = "cost.json";
pub const TIMING_FILE: &str = "timing.json";
pub const REDUCE_FILE: &str = "reduce.json";

fn pose_noise(cfg: &RunConfig) -> Option<PoseNoise> {
    let d = &cfg.dataset;
    (d.translation_sd > 0.0 || d.rotation_sd > 0.0)
        .then_some(PoseNoise { translation_sd: d.translation_sd, rotation_sd: d.rotation_sd })
}

pub fn simulate(cfg: &RunConfig) -> Result<String, CliError> {
    let seed = cfg.require_seed()?;
    let d = &cfg.dataset;
    let dir = &cfg.out_dir;
    let (traj, log) = match d.kind {
        DatasetKind::Sinusoid => gen_sinusoid_1d(d.rate, d.duration, d.noise_sd, seed)?,
        DatasetKind::Se2Arc => {
            gen_se2_arc(d.n_states.unwrap_or(60), d.dt.unwrap_or(0.1), Vector3::from(d.twist), pose_noise(cfg), seed)?
        }
        DatasetKind::Landmarks => {
            let def = LandmarkBenchConfig::default();
            let lc = LandmarkBenchConfig {
                n_states: d.n_states.unwrap_or(def.n_states),
                dt: d.dt.unwrap_or(def.dt),
                n_landmarks: d.n_landmarks.unwrap_or(def.n_landmarks),
                ..def
            };
            let b = gen_landmark_benchmark(&lc, seed)?;
            io::write_landmarks(&dir.join(LANDMARK_FILE), &b.landmarks)?;
            (b.truth, b.log)
        }
        DatasetKind::Se3 => {
            let def = Se3TrajConfig::default();
            let sc = Se3TrajConfig {
                n_knots: d.n_states.unwrap_or(def.n_knots),
                dt: d.dt.unwrap_or(def.dt),
                noise: pose_noise(cfg),
                ..def
            };
            gen_se3_traj(&sc, seed)?
        }
    };
    io::write_truth(&dir.join(TRUTH_FILE), &traj)?;
    io::write_measurements(&dir.join(MEAS_FILE), &log)?;
    Ok(format!(
        "simulated {:?} (seed {seed}): {} truth states, {} readings -> {}",
        d.kind,
        traj.len(),
        log.records.len(),
        dir.display()
    ))
}

/// Measurement times, plus a regular grid of spacing `knot_dt` over their span.
pub fn state_grid(cfg: &RunConfig, log: &MeasurementLog) -> Result<Vec<f64>, CliError> {
    let mut times = log.times();
    if times.is_empty() {
        return Err(CliError::Validation("the measurement file has no readings".into()));
    }
    if let Some(dt) = cfg.knot_dt {
        let (t0, t1) = (times[0], times[times.len() - 1]);
        let n = ((t1 - t0) / dt + 1e-9).floor() as usize;
        times.extend((0..=n).map(|k| t0 + k as f64 * dt));
        times.sort_by(f64::total_cmp);
        times.dedup_by(|a, b| (*a - *b).abs() <= gpct::chain::TIME_SNAP);
    }
    Ok(times)
}

pub fn border_indices(n: usize, interval: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).step_by(interval).collect();
    if idx.last() != Some(&(n - 1)) {
        idx.push(n - 1);
    }
    idx
}

/// Posterior needed to query a solve: consecutive-pair covariances included.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolutionFile {
    /// `linear`, `se2` or `se3`.
    pub group: String,
    pub qc_diag: Vec<f64>,
    pub times: Vec<f64>,
    /// State vector, or pose parameters followed by the velocity.
    pub means: Vec<Vec<f64>>,
    /// Upper triangles of the marginal covariances.
    pub covs: Vec<Vec<f64>>,
    /// `Cov(x_{k+1}, x_k)`, row-major.
    pub cross: Vec<Vec<f64>>,
}

fn group_name(g: Option<LieGroup>) -> &'static str {
    match g {
        None => "linear",
        Some(LieGroup::Se2) => "se2",
        Some(LieGroup::Se3) => "se3",
    }
}

fn parse_group(s: &str) -> Result<Option<LieGroup>, CliError> {
    match s {
        "linear" => Ok(None),
        "se2" => Ok(Some(LieGroup::Se2)),
        "se3" => Ok(Some(LieGroup::Se3)),
        _ => Err(CliError::Validation(format!("unknown group '{s}' (linear, se2, se3)"))),
    }
}

#[derive(Serialize)]
struct CostReport {
    cost_trace: Vec<f64>,
    final_cost: f64,
    iterations: usize,
    converged: bool,
}

#[derive(Serialize)]
struct TimingReport {
    total_seconds: f64,
    /// Seconds per linear solve (one per iteration).
    per_iteration_seconds: Vec<f64>,
    mean_iteration_seconds: f64,
    /// Trajectory states carried by the solved system.
    variable_count: usize,
    /// Keys in the solved system (pose and velocity counted separately).
    key_count: usize,
    state_count: usize,
    border_count: usize,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

struct SolveOutput {
    rows: Vec<EstimateRow>,
    solution: SolutionFile,
    cost: CostReport,
    timing: TimingReport,
}

fn write_solve(dir: &Path, out: &SolveOutput) -> Result<(), CliError> {
    io::write_estimates(&dir.join(ESTIMATE_FILE), &out.rows)?;
    io::write_json(&dir.join(SOLUTION_FILE), &out.solution)?;
    io::write_json(&dir.join(COST_FILE), &out.cost)?;
    io::write_json(&dir.join(TIMING_FILE), &out.timing)
}

pub struct SolveInputs<'a> {
    pub meas: &'a Path,
    pub landmarks: Option<&'a Path>,
    pub init: Option<&'a Path>,
}

pub fn solve(cfg: &RunConfig, inputs: &SolveInputs) -> Result<String, CliError> {
    let log = io::read_measurements(inputs.meas)?;
    let grid = state_grid(cfg, &log)?;
    let out = match cfg.dataset.kind.group() {
        None => solve_linear(cfg, &log, &grid)?,
        Some(g) => solve_lie(cfg, g, &log, &grid, inputs)?,
    };
    write_solve(&cfg.out_dir, &out)?;
    let summary = format!(
        "solved {} states ({} estimated) in {:.3} s, final cost {:.6e} -> {}",
        out.timing.state_count,
        out.timing.variable_count,
        out.timing.total_seconds,
        out.cost.final_cost,
        cfg.out_dir.display()
    );
    if !out.cost.converged {
        return Err(CliError::Numerical(format!(
            "solver stopped after {} iterations without converging; outputs written with converged=false",
            out.cost.iterations
        )));
    }
    Ok(summary)
}

fn diag(v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_column_slice(v))
}

fn linear_model(qc: &[f64]) -> Result<LtiModel, CliError> {
    Ok(LtiModel::wnoa(diag(qc))?)
}

fn chain_solution_file(qc: &[f64], sol: &ChainSolution) -> SolutionFile {
    SolutionFile {
        group: "linear".into(),
        qc_diag: qc.to_vec(),
        times: sol.times.clone(),
        means: sol.means.iter().map(|m| m.iter().copied().collect()).collect(),
        covs: sol.covs.iter().map(upper_triangle).collect(),
        cross: sol.cross.iter().map(|c| c.transpose().iter().copied().collect()).collect(),
    }
}

fn solve_linear(cfg: &RunConfig, log: &MeasurementLog, grid: &[f64]) -> Result<SolveOutput, CliError> {
    let qc = cfg.qc_diag();
    let pd = qc.len();
    let model = linear_model(&qc)?;
    let meas = log.linear_measurements(pd)?;
    let prior_sd = cfg.model.prior_sd.clone().unwrap_or_else(|| vec![10.0; 2 * pd]);
    let prior_cov = diag(&prior_sd.iter().map(|s| s * s).collect::<Vec<_>>());
    let prior_mean = DVector::zeros(2 * pd);
    let start = Instant::now();
    let (sol, rows, solve_secs, borders) = match cfg.interval {
        None => {
            let g = build_chain(&model, prior_mean, prior_cov, grid, &meas)?;
            let s = Instant::now();
            let sol = solve_chain(&g)?;
            let secs = s.elapsed().as_secs_f64();
            let rows = (0..sol.len())
                .map(|k| EstimateRow {
                    time: sol.times[k],
                    flag: "estimated".into(),
                    mean: sol.means[k].iter().copied().collect(),
                    cov: sol.covs[k].clone(),
                    bubbling: None,
                })
                .collect();
            (sol, rows, secs, grid.len())
        }
        Some(interval) => {
            let border_times: Vec<f64> = border_indices(grid.len(), interval).into_iter().map(|i| grid[i]).collect();
            let g = reduce_chain(&model, prior_mean, prior_cov, &border_times, &meas, cfg.noise_mode()?)?;
            let s = Instant::now();
            let sol = solve_chain(&g)?;
            let secs = s.elapsed().as_secs_f64();
            let ests = update_interp_linear(&model, &sol, grid, cfg.execution())?;
            let rows = ests
                .iter()
                .map(|e| EstimateRow {
                    time: e.time,
                    flag: if e.kind == QueryKind::Knot { "estimated" } else { "interpolated" }.into(),
                    mean: e.mean.iter().copied().collect(),
                    cov: e.cov.clone(),
                    bubbling: linear_bubbling(&sol, e),
                })
                .collect();
            (sol, rows, secs, border_times.len())
        }
    };
    Ok(SolveOutput {
        rows,
        cost: CostReport { cost_trace: vec![sol.cost], final_cost: sol.cost, iterations: 1, converged: true },
        timing: TimingReport {
            total_seconds: start.elapsed().as_secs_f64(),
            per_iteration_seconds: vec![solve_secs],
            mean_iteration_seconds: solve_secs,
            variable_count: sol.len(),
            key_count: sol.len(),
            state_count: grid.len(),
            border_count: borders,
        },
        solution: chain_solution_file(&qc, &sol),
    })
}

fn records(log: &MeasurementLog, sensor: &str) -> Vec<(f64, DVector<f64>)> {
    log.records.iter().filter(|r| r.sensor == sensor).map(|r| (r.time, r.value.clone())).collect()
}

fn initial_values(
    cfg: &RunConfig,
    graph: &NonlinearGraph,
    log: &MeasurementLog,
    init: Option<&Path>,
) -> Result<Values, CliError> {
    let group = graph.group;
    let m = group.dim();
    if let Some(path) = init {
        let (times, states) = io::read_truth(path)?;
        let mut values = Values::new();
        for s in &graph.states {
            let k = find_knot(&times, s.time)
                .ok_or_else(|| CliError::Validation(format!("{}: no initial state at t={}", path.display(), s.time)))?;
            let row = &states[k];
            if row.len() < 2 * m {
                return Err(CliError::Validation(format!(
                    "{}: initial state at t={} is too short",
                    path.display(),
                    s.time
                )));
            }
            values.insert_pose(s.pose, pose_from_params(group, &row[..m])?);
            values.insert_vector(s.vel, DVector::from_column_slice(&row[m..2 * m]));
        }
        return Ok(values);
    }
    let poses = records(log, "pose")
        .into_iter()
        .map(|(t, v)| Ok((t, pose_from_params(group, v.as_slice())?)))
        .collect::<Result<Vec<(f64, LieElement)>, gpct::Error>>()?;
    let kind = match cfg.init {
        InitKind::Auto if poses.len() >= 2 => InitKind::Piecewise,
        InitKind::Auto => InitKind::DeadReckoning,
        k => k,
    };
    Ok(match kind {
        InitKind::ConstantVelocity => initialize_from_poses(group, &graph.states, &poses, InitMode::ConstantVelocity)?,
        InitKind::Piecewise => initialize_from_poses(group, &graph.states, &poses, InitMode::Piecewise)?,
        _ => {
            let start =
                poses.iter().min_by(|a, b| a.0.total_cmp(&b.0)).map_or(LieElement::identity(group), |p| p.1.clone());
            dead_reckoning(group, &graph.states, &start, &records(log, "velocity"))?
        }
    })
}

fn lie_row(pose: &LieElement, vel: &DVector<f64>) -> Result<Vec<f64>, CliError> {
    let mut v = pose_to_params(pose)?;
    v.extend(vel.iter());
    Ok(v)
}

fn lie_solution_file(qc: &[f64], sol: &LieSolution) -> Result<SolutionFile, CliError> {
    let n = sol.states.len();
    let m2 = 2 * sol.states.first().map_or(0, |_| sol.pose(0).map_or(0, |p| p.group().dim()));
    let mut means = Vec::with_capacity(n);
    let mut covs = Vec::with_capacity(n);
    let mut cross = Vec::with_capacity(n.saturating_sub(1));
    for k in 0..n {
        means.push(lie_row(sol.pose(k)?, sol.velocity(k)?)?);
        covs.push(upper_triangle(&sol.state_cov(k)?));
        if k + 1 < n {
            let pair = sol.pair_cov(k)?;
            cross.push(pair.view((m2, 0), (m2, m2)).transpose().iter().copied().collect());
        }
    }
    Ok(SolutionFile {
        group: group_name(sol.pose(0).ok().map(|p| p.group())).into(),
        qc_diag: qc.to_vec(),
        times: sol.states.iter().map(|s| s.time).collect(),
        means,
        covs,
        cross,
    })
}

fn load_landmarks(path: Option<&Path>, log: &MeasurementLog) -> Result<LandmarkMap, CliError> {
    match path {
        Some(p) => io::read_landmarks(p),
        None if log.records.iter().any(|r| r.sensor.starts_with("landmark:")) => {
            Err(CliError::Validation("bearing/range readings need --landmarks".into()))
        }
        None => Ok(LandmarkMap::new()),
    }
}

fn solve_lie(
    cfg: &RunConfig,
    group: LieGroup,
    log: &MeasurementLog,
    grid: &[f64],
    inputs: &SolveInputs,
) -> Result<SolveOutput, CliError> {
    let qc = cfg.qc_diag();
    let landmarks = load_landmarks(inputs.landmarks, log)?;
    let graph = build_lie_graph(group, diag(&qc), grid, log, &landmarks)?;
    let init = initial_values(cfg, &graph, log, inputs.init)?;
    let solver = cfg.solver_config();
    let start = Instant::now();
    let (sol, rows, borders) = match cfg.interval {
        None => {
            let sol = gauss_newton(&graph, &init, &solver)?;
            let rows = (0..sol.states.len())
                .map(|k| {
                    Ok(EstimateRow {
                        time: sol.states[k].time,
                        flag: "estimated".into(),
                        mean: lie_row(sol.pose(k)?, sol.velocity(k)?)?,
                        cov: sol.state_cov(k)?,
                        bubbling: None,
                    })
                })
                .collect::<Result<Vec<_>, CliError>>()?;
            (sol, rows, grid.len())
        }
        Some(interval) => {
            let idx = border_indices(grid.len(), interval);
            let ig = interpolate_factor_graph(&graph, &idx, cfg.noise_mode()?)?;
            let sol = gauss_newton(&ig.reduced, &init, &solver)?;
            let est = update_interp_values(&ig, &sol)?;
            let laplace = match cfg.covariance {
                CovarianceSource::Interpolated => None,
                CovarianceSource::Laplace => {
                    let means = interp_means(&ig, &sol.values)?;
                    Some((laplace_covariances(&graph, &means, cfg.execution())?, means))
                }
            };
            let rows = est
                .estimates
                .iter()
                .zip(&est.states)
                .map(|(e, s)| {
                    let flag = if e.kind == QueryKind::Knot { "estimated" } else { "interpolated" }.to_string();
                    Ok(match &laplace {
                        None => EstimateRow {
                            time: e.time,
                            flag,
                            mean: lie_row(&e.pose, &e.vel)?,
                            cov: e.cov.clone(),
                            bubbling: e.bubbling,
                        },
                        Some((table, means)) => EstimateRow {
                            time: e.time,
                            flag,
                            mean: lie_row(means.pose(s.pose)?, means.vector(s.vel)?)?,
                            cov: table.joint(&[s.pose, s.vel])?,
                            bubbling: None,
                        },
                    })
                })
                .collect::<Result<Vec<_>, CliError>>()?;
            (sol, rows, idx.len())
        }
    };
    Ok(SolveOutput {
        rows,
        cost: CostReport {
            cost_trace: sol.cost_trace.clone(),
            final_cost: sol.final_cost(),
            iterations: sol.iterations,
            converged: sol.converged,
        },
        timing: TimingReport {
            total_seconds: start.elapsed().as_secs_f64(),
            mean_iteration_seconds: mean(&sol.linear_solve_times),
            per_iteration_seconds: sol.linear_solve_times.clone(),
            variable_count: sol.states.len(),
            key_count: sol.variable_count,
            state_count: grid.len(),
            border_count: borders,
        },
        solution: lie_solution_file(&qc, &sol)?,
    })
}

#[derive(Serialize)]
struct ReduceReport {
    group: &'static str,
    noise_mode: &'static str,
    interval: usize,
    state_count: usize,
    border_count: usize,
    interpolated_count: usize,
    factors_before: usize,
    factors_after: usize,
    wrapped_factors: usize,
    variables_before: usize,
    variables_after: usize,
}

/// Builds the interpolated problem and reports its structure without solving it.
pub fn reduce(cfg: &RunConfig, meas: &Path, landmarks: Option<&Path>) -> Result<String, CliError> {
    let interval = cfg.interval.ok_or_else(|| CliError::Validation("reduce needs an interval (--interval)".into()))?;
    let mode = cfg.noise_mode()?;
    let log = io::read_measurements(meas)?;
    let grid = state_grid(cfg, &log)?;
    let idx = border_indices(grid.len(), interval);
    let qc = cfg.qc_diag();
    let report = match cfg.dataset.kind.group() {
        None => {
            let model = linear_model(&qc)?;
            let lm = log.linear_measurements(qc.len())?;
            let n = 2 * qc.len();
            let (pm, pc) = (DVector::zeros(n), DMatrix::identity(n, n));
            let full = build_chain(&model, pm.clone(), pc.clone(), &grid, &lm)?;
            let border_times: Vec<f64> = idx.iter().map(|&i| grid[i]).collect();
            let red = reduce_chain(&model, pm, pc, &border_times, &lm, mode)?;
            ReduceReport {
                group: "linear",
                noise_mode: mode.name(),
                interval,
                state_count: grid.len(),
                border_count: idx.len(),
                interpolated_count: grid.len() - idx.len(),
                factors_before: full.factor_count(),
                factors_after: red.factor_count(),
                wrapped_factors: red.extra.len(),
                variables_before: full.knots.len(),
                variables_after: red.knots.len(),
            }
        }
        Some(group) => {
            let lms = load_landmarks(landmarks, &log)?;
            let graph = build_lie_graph(group, diag(&qc), &grid, &log, &lms)?;
            let ig = interpolate_factor_graph(&graph, &idx, mode)?;
            ReduceReport {
                group: group_name(Some(group)),
                noise_mode: mode.name(),
                interval,
                state_count: grid.len(),
                border_count: idx.len(),
                interpolated_count: ig.bindings.len(),
                factors_before: graph.factors.len(),
                factors_after: ig.reduced.factors.len(),
                wrapped_factors: ig.wrapped_factor_count(),
                variables_before: graph.variable_keys().len(),
                variables_after: ig.reduced.variable_keys().len(),
            }
        }
    };
    io::write_json(&cfg.out_dir.join(REDUCE_FILE), &report)?;
    Ok(format!(
        "reduced {} states to {} borders; factors {} -> {} ({} wrapped) -> {}",
        report.state_count,
        report.border_count,
        report.factors_before,
        report.factors_after,
        report.wrapped_factors,
        cfg.out_dir.join(REDUCE_FILE).display()
    ))
}

pub struct QueryArgs {
    pub solution: PathBuf,
    pub times: Vec<f64>,
    pub extrapolate: bool,
    pub out: PathBuf,
    pub timing: PathBuf,
}

#[derive(Serialize)]
struct QueryTiming {
    queries: usize,
    total_seconds: f64,
    mean_seconds_per_query: f64,
    per_query_seconds: Vec<f64>,
}

fn row_from(time: f64, kind: QueryKind, mean: Vec<f64>, cov: DMatrix<f64>, bubbling: Option<f64>) -> EstimateRow {
    let flag = match kind {
        QueryKind::Knot => "estimated",
        QueryKind::Interpolated => "interpolated",
        QueryKind::Extrapolated => "extrapolated",
    };
    EstimateRow { time, flag: flag.into(), mean, cov, bubbling }
}

/// Queries a stored solution at arbitrary times.
pub fn query(args: &QueryArgs) -> Result<String, CliError> {
    let file: SolutionFile = io::read_json(&args.solution)?;
    let group = parse_group(&file.group)?;
    let n = file.means.first().map_or(0, Vec::len);
    let k = file.times.len();
    if k == 0 || file.means.len() != k || file.covs.len() != k || file.cross.len() + 1 != k {
        return Err(CliError::Validation(format!("{}: inconsistent solution", args.solution.display())));
    }
    check_increasing(&file.times)?;
    let covs = file.covs.iter().map(|c| from_upper_triangle(n, c)).collect::<gpct::Result<Vec<_>>>()?;
    let cross: Vec<DMatrix<f64>> = file.cross.iter().map(|c| DMatrix::from_row_slice(n, n, c)).collect();
    let (t0, t1) = (file.times[0], file.times[k - 1]);
    for &t in &args.times {
        let outside = t < t0 - gpct::chain::TIME_SNAP || t > t1 + gpct::chain::TIME_SNAP;
        if !t.is_finite() || (outside && !args.extrapolate) {
            return Err(CliError::Validation(format!(
                "query time {t} is outside [{t0}, {t1}]; pass --extrapolate to allow it"
            )));
        }
    }
    let qc = diag(&file.qc_diag);
    let mut rows = Vec::with_capacity(args.times.len());
    let mut per = Vec::with_capacity(args.times.len());
    let start = Instant::now();
    match group {
        None => {
            let model = linear_model(&file.qc_diag)?;
            let sol = ChainSolution {
                keys: (0..k).map(knot_key).collect(),
                times: file.times.clone(),
                means: file.means.iter().map(|m| DVector::from_column_slice(m)).collect(),
                covs,
                cross,
                cost: f64::NAN,
            };
            for &t in &args.times {
                let s = Instant::now();
                let e = query_at(&model, &sol, t)?;
                per.push(s.elapsed().as_secs_f64());
                let bubbling = if e.kind == QueryKind::Interpolated { linear_bubbling(&sol, &e) } else { None };
                rows.push(row_from(e.time, e.kind, e.mean.iter().copied().collect(), e.cov, bubbling));
            }
        }
        Some(g) => {
            let m = g.dim();
            let states = file
                .means
                .iter()
                .map(|r| Ok((pose_from_params(g, &r[..m])?, DVector::from_column_slice(&r[m..]))))
                .collect::<gpct::Result<Vec<(LieElement, DVector<f64>)>>>()?;
            for &t in &args.times {
                let s = Instant::now();
                let row = lie_query(&qc, &file.times, &states, &covs, &cross, t)?;
                per.push(s.elapsed().as_secs_f64());
                rows.push(row);
            }
        }
    }
    let total = start.elapsed().as_secs_f64();
    io::write_estimates(&args.out, &rows)?;
    io::write_json(
        &args.timing,
        &QueryTiming {
            queries: rows.len(),
            total_seconds: total,
            mean_seconds_per_query: mean(&per),
            per_query_seconds: per,
        },
    )?;
    Ok(format!("{} queries in {:.3e} s -> {}", rows.len(), total, args.out.display()))
}

fn lie_query(
    qc: &DMatrix<f64>,
    times: &[f64],
    states: &[(LieElement, DVector<f64>)],
    covs: &[DMatrix<f64>],
    cross: &[DMatrix<f64>],
    t: f64,
) -> Result<EstimateRow, CliError> {
    let last = times.len() - 1;
    if let Some(k) = find_knot(times, t) {
        return Ok(row_from(times[k], QueryKind::Knot, lie_row(&states[k].0, &states[k].1)?, covs[k].clone(), None));
    }
    let end = if t < times[0] {
        Some(0)
    } else if t > times[last] {
        Some(last)
    } else {
        None
    };
    if let Some(e) = end {
        let x = extrapolate_lie(qc, (&states[e].0, &states[e].1, times[e]), &covs[e], t)?;
        return Ok(row_from(t, x.kind, lie_row(&x.pose, &x.vel)?, x.cov, None));
    }
    let k = times.partition_point(|&s| s < t) - 1;
    let it = interpolate_lie(
        qc,
        (&states[k].0, &states[k].1, times[k]),
        (&states[k + 1].0, &states[k + 1].1, times[k + 1]),
        t,
    )?;
    let n = covs[k].nrows();
    let mut pair = DMatrix::zeros(2 * n, 2 * n);
    pair.view_mut((0, 0), (n, n)).copy_from(&covs[k]);
    pair.view_mut((n, n), (n, n)).copy_from(&covs[k + 1]);
    pair.view_mut((n, 0), (n, n)).copy_from(&cross[k]);
    pair.view_mut((0, n), (n, n)).copy_from(&cross[k].transpose());
    let cov = it.covariance(&pair)?;
    let bubbling = cov.trace() / covs[k].trace().max(covs[k + 1].trace());
    Ok(row_from(t, QueryKind::Interpolated, lie_row(&it.pose, &it.vel)?, cov, Some(bubbling)))
}

pub struct MetricsArgs {
    pub estimates: PathBuf,
    pub truth: PathBuf,
    pub group: Option<String>,
    /// `all`, `estimated` or `interpolated`.
    pub rows: String,
    pub scope: NeesScope,
    pub out: PathBuf,
}

#[derive(Serialize)]
struct MetricsOutput {
    group: &'static str,
    rows: String,
    count: usize,
    rmse_translation: f64,
    rmse_rotation: Option<f64>,
    mean_nees: f64,
    times: Vec<f64>,
    nees: Vec<f64>,
}

pub fn metrics(cfg: &RunConfig, args: &MetricsArgs) -> Result<String, CliError> {
    let group = match &args.group {
        Some(g) => parse_group(g)?,
        None => cfg.dataset.kind.group(),
    };
    if !["all", "estimated", "interpolated"].contains(&args.rows.as_str()) {
        return Err(CliError::Validation(format!("unknown row filter '{}' (all, estimated, interpolated)", args.rows)));
    }
    let est: Vec<EstimateRow> = io::read_estimates(&args.estimates)?
        .into_iter()
        .filter(|r| args.rows == "all" || r.flag == args.rows)
        .collect();
    if est.is_empty() {
        return Err(CliError::Validation("no estimate rows to evaluate".into()));
    }
    let (truth_times, truth_states) = io::read_truth(&args.truth)?;
    check_increasing(&truth_times)?;
    let mut times = Vec::with_capacity(est.len());
    let mut truth = Vec::with_capacity(est.len());
    for r in &est {
        let k = find_knot(&truth_times, r.time)
            .ok_or_else(|| CliError::Validation(format!("no truth state at t={} (timestamps misaligned)", r.time)))?;
        times.push(truth_times[k]);
        truth.push(truth_states[k].clone());
    }
    let covs: Vec<DMatrix<f64>> = est.iter().map(|r| r.cov.clone()).collect();
    let est_times: Vec<f64> = est.iter().map(|r| r.time).collect();
    let report = match group {
        None => {
            let means: Vec<DVector<f64>> = est.iter().map(|r| DVector::from_column_slice(&r.mean)).collect();
            let tv: Vec<DVector<f64>> = truth.iter().map(|v| DVector::from_column_slice(v)).collect();
            vector_metrics(&est_times, &means, &covs, &times, &tv, means[0].len() / 2)?
        }
        Some(g) => {
            let m = g.dim();
            let split = |v: &[f64]| -> gpct::Result<(LieElement, DVector<f64>)> {
                if v.len() != 2 * m {
                    return Err(gpct::Error::Dimension(format!(
                        "{} state needs {} values, got {}",
                        g.name(),
                        2 * m,
                        v.len()
                    )));
                }
                Ok((pose_from_params(g, &v[..m])?, DVector::from_column_slice(&v[m..])))
            };
            let e = est.iter().map(|r| split(&r.mean)).collect::<gpct::Result<Vec<_>>>()?;
            let t = truth.iter().map(|v| split(v)).collect::<gpct::Result<Vec<_>>>()?;
            lie_metrics(&est_times, &e, &covs, &times, &t, args.scope)?
        }
    };
    let out = MetricsOutput {
        group: group_name(group),
        rows: args.rows.clone(),
        count: est.len(),
        rmse_translation: report.rmse_translation,
        rmse_rotation: report.rmse_rotation,
        mean_nees: report.mean_nees,
        times: est_times,
        nees: report.nees,
    };
    io::write_json(&args.out, &out)?;
    Ok(format!(
        "{} rows: RMSE {:.6e}, mean NEES {:.4} -> {}",
        out.count,
        out.rmse_translation,
        out.mean_nees,
        args.out.display()
    ))
}
