use std::collections::{BTreeSet, HashMap, HashSet};
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use super::{Factor, StateStamp, ValueCache, Values, WnoaFactor};
use crate::error::{Error, Result};
use crate::gaussian::{CovarianceTable, GaussianFactorGraph, Key, QuadraticFactor, Scope};
use crate::lie::{exp, LieElement, LieGroup, Tangent};
use crate::linalg::{check_square, cholesky};
use crate::par::{self, Execution};

/// Factors over Lie-group trajectory states and auxiliary vector variables.
#[derive(Clone, Debug)]
pub struct NonlinearGraph {
    pub group: LieGroup,
    pub qc: DMatrix<f64>,
    /// Estimated trajectory states in time order.
    pub states: Vec<StateStamp>,
    pub factors: Vec<Arc<dyn Factor>>,
    /// Filled before every evaluation or linearization pass.
    pub cache: Option<Arc<dyn ValueCache>>,
}

impl NonlinearGraph {
    pub fn new(group: LieGroup, qc: DMatrix<f64>) -> Result<Self> {
        check_square(&qc, group.dim(), "Qc")?;
        cholesky(&qc, "Qc")?;
        Ok(NonlinearGraph { group, qc, states: Vec::new(), factors: Vec::new(), cache: None })
    }

    /// States `x{i}, v{i}` at `times` joined by motion-prior factors.
    pub fn trajectory(group: LieGroup, qc: DMatrix<f64>, times: &[f64]) -> Result<Self> {
        crate::chain::check_increasing(times)?;
        let mut g = NonlinearGraph::new(group, qc)?;
        g.states = times.iter().enumerate().map(|(i, &t)| StateStamp::indexed(i, t)).collect();
        for w in 0..g.states.len().saturating_sub(1) {
            let f = WnoaFactor::new(group, &g.qc, g.states[w], g.states[w + 1])?;
            g.factors.push(Arc::new(f));
        }
        Ok(g)
    }

    pub fn add<F: Factor + 'static>(&mut self, f: F) {
        self.factors.push(Arc::new(f));
    }

    pub fn add_arc(&mut self, f: Arc<dyn Factor>) {
        self.factors.push(f);
    }

    /// Keys referenced by at least one factor.
    pub fn variable_keys(&self) -> BTreeSet<Key> {
        self.factors.iter().flat_map(|f| f.keys().iter().copied()).collect()
    }

    /// States in time order (pose, then velocity), then any other variables by key.
    pub fn ordering(&self) -> Vec<Key> {
        let used = self.variable_keys();
        let mut seen = HashSet::new();
        let mut out = Vec::with_capacity(used.len());
        for s in &self.states {
            for k in [s.pose, s.vel] {
                if used.contains(&k) && seen.insert(k) {
                    out.push(k);
                }
            }
        }
        out.extend(used.into_iter().filter(|k| !seen.contains(k)));
        out
    }

    pub fn motion_factor_count(&self) -> usize {
        self.factors.iter().filter(|f| f.motion().is_some()).count()
    }

    fn fill(&self, values: &Values, exec: Execution) -> Result<()> {
        match &self.cache {
            Some(c) => c.fill(values, exec),
            None => Ok(()),
        }
    }

    pub fn cost(&self, values: &Values) -> Result<f64> {
        self.cost_with(values, Execution::Sequential)
    }

    pub fn cost_with(&self, values: &Values, exec: Execution) -> Result<f64> {
        self.fill(values, exec)?;
        par::map(exec, &self.factors, |f| f.cost(values)).into_iter().sum()
    }

    /// Gaussian factors over perturbations at `values`.
    pub fn linearize(&self, values: &Values, exec: Execution) -> Result<GaussianFactorGraph> {
        self.fill(values, exec)?;
        let factors = par::map(exec, &self.factors, |f| f.linearize(values)?.to_quadratic(f.keys()))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        Ok(GaussianFactorGraph::new(factors))
    }

    fn check_values(&self, values: &Values) -> Result<()> {
        for k in self.variable_keys() {
            if !values.contains(k) {
                return Err(Error::UnknownKey(k));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverConfig {
    pub max_iterations: usize,
    /// Stop when the relative cost decrease of an accepted step drops below this.
    pub relative_tolerance: f64,
    /// Stop when the cost itself drops below this.
    pub absolute_tolerance: f64,
    /// Initial damping; 0 gives plain Gauss-Newton until a step is rejected.
    pub lambda_initial: f64,
    pub lambda_factor: f64,
    pub lambda_max: f64,
    pub execution: Execution,
    /// Recover Laplace covariances at the final iterate.
    pub covariances: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_iterations: 100,
            relative_tolerance: 1e-8,
            absolute_tolerance: 1e-20,
            lambda_initial: 1e-6,
            lambda_factor: 10.0,
            lambda_max: 1e10,
            execution: Execution::default(),
            covariances: true,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.relative_tolerance >= 0.0
            && self.absolute_tolerance >= 0.0
            && self.lambda_initial >= 0.0
            && self.lambda_factor > 1.0
            && self.lambda_max > self.lambda_initial;
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid("solver tolerances and damping must be non-negative with factor > 1".into()))
        }
    }
}

#[derive(Clone, Debug)]
pub struct LieSolution {
    pub values: Values,
    /// Laplace covariances at `values`; empty when not requested.
    pub covariances: CovarianceTable,
    /// Cost at the initial values and after every accepted step.
    pub cost_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Seconds spent eliminating the linear system, one entry per linear solve.
    pub linear_solve_times: Vec<f64>,
    pub states: Vec<StateStamp>,
    /// Number of variables in the optimized system.
    pub variable_count: usize,
}

impl LieSolution {
    pub fn final_cost(&self) -> f64 {
        *self.cost_trace.last().unwrap_or(&f64::NAN)
    }

    pub fn pose(&self, k: usize) -> Result<&LieElement> {
        self.values.pose(self.states[k].pose)
    }

    pub fn velocity(&self, k: usize) -> Result<&DVector<f64>> {
        self.values.vector(self.states[k].vel)
    }

    /// Joint covariance of `[eps_k; eta_k]`.
    pub fn state_cov(&self, k: usize) -> Result<DMatrix<f64>> {
        let s = self.states.get(k).ok_or_else(|| Error::Invalid(format!("no state {k}")))?;
        self.covariances.joint(&[s.pose, s.vel])
    }

    /// Joint covariance of states `k` and `k+1`.
    pub fn pair_cov(&self, k: usize) -> Result<DMatrix<f64>> {
        if k + 1 >= self.states.len() {
            return Err(Error::Invalid(format!("no state pair starting at {k}")));
        }
        let (a, b) = (self.states[k], self.states[k + 1]);
        self.covariances.joint(&[a.pose, a.vel, b.pose, b.vel])
    }

    pub fn mean_linear_solve_time(&self) -> f64 {
        if self.linear_solve_times.is_empty() {
            return 0.0;
        }
        self.linear_solve_times.iter().sum::<f64>() / self.linear_solve_times.len() as f64
    }
}

fn damping(dims: &HashMap<Key, usize>, lambda: f64) -> Result<Vec<QuadraticFactor>> {
    let mut keys: Vec<_> = dims.iter().collect();
    keys.sort();
    keys.into_iter()
        .map(|(&k, &d)| {
            QuadraticFactor::new(Scope::single(k, d), DMatrix::identity(d, d) * lambda, DVector::zeros(d), 0.0)
        })
        .collect()
}

/// Damped Gauss-Newton over `graph` starting from `initial`.
///
/// Poses update as `T <- T Exp(eps)`, vectors additively. A step is accepted when
/// it lowers the cost; otherwise damping grows and the step is retried.
pub fn gauss_newton(graph: &NonlinearGraph, initial: &Values, config: &SolverConfig) -> Result<LieSolution> {
    config.validate()?;
    graph.check_values(initial)?;
    let ordering = graph.ordering();
    let exec = config.execution;
    let mut values = initial.clone();
    let mut cost = graph.cost_with(&values, exec)?;
    let mut trace = vec![cost];
    let mut times = Vec::new();
    let mut lambda = config.lambda_initial;
    let mut converged = cost <= config.absolute_tolerance;
    let mut iterations = 0;
    while !converged && iterations < config.max_iterations {
        iterations += 1;
        let lin = graph.linearize(&values, exec)?.fused_by_scope()?;
        let dims = lin.key_dims()?;
        let mut accepted = false;
        while !accepted {
            let mut sys = lin.clone();
            if lambda > 0.0 {
                sys.factors.extend(damping(&dims, lambda)?);
            }
            let start = Instant::now();
            let delta = sys.eliminate_sequential(&ordering)?.solve();
            times.push(start.elapsed().as_secs_f64());
            let candidate = values.retract(&delta);
            // A step that crosses the injectivity radius counts as a rejection.
            let new_cost = match graph.cost_with(&candidate, exec) {
                Ok(c) if c.is_finite() => Some(c),
                Ok(_) => None,
                Err(e) if e.is_numerical() => None,
                Err(e) => return Err(e),
            };
            match new_cost {
                Some(c) if c <= cost => {
                    let decrease = cost - c;
                    values = candidate;
                    trace.push(c);
                    accepted = true;
                    lambda /= config.lambda_factor;
                    let step = delta.values().map(|d| d.amax()).fold(0.0, f64::max);
                    if c <= config.absolute_tolerance || decrease <= config.relative_tolerance * cost || step < 1e-14 {
                        converged = true;
                    }
                    cost = c;
                }
                _ => {
                    lambda =
                        if lambda == 0.0 { config.lambda_initial.max(1e-9) } else { lambda * config.lambda_factor };
                    if lambda > config.lambda_max {
                        let tol = (config.relative_tolerance * cost).max(config.absolute_tolerance);
                        converged = stationary(&lin, &ordering, &dims, tol)?;
                        break;
                    }
                }
            }
        }
        if !accepted {
            break;
        }
    }
    let covariances =
        if config.covariances { laplace_covariances(graph, &values, exec)? } else { CovarianceTable::default() };
    Ok(LieSolution {
        values,
        covariances,
        cost_trace: trace,
        iterations,
        converged,
        linear_solve_times: times,
        states: graph.states.clone(),
        variable_count: ordering.len(),
    })
}

/// True when the undamped linear model predicts a decrease of at most `tol`.
fn stationary(lin: &GaussianFactorGraph, ordering: &[Key], dims: &HashMap<Key, usize>, tol: f64) -> Result<bool> {
    let delta = lin.eliminate_sequential(ordering)?.solve();
    let zero: HashMap<Key, DVector<f64>> = dims.iter().map(|(&k, &d)| (k, DVector::zeros(d))).collect();
    Ok(lin.cost(&zero)? - lin.cost(&delta)? <= tol)
}

/// Inverse-information marginals (and separator cross-covariances) at `values`.
pub fn laplace_covariances(graph: &NonlinearGraph, values: &Values, exec: Execution) -> Result<CovarianceTable> {
    graph.check_values(values)?;
    let lin = graph.linearize(values, exec)?.fused_by_scope()?;
    Ok(lin.eliminate_sequential(&graph.ordering())?.covariances())
}

/// How initial trajectory values are built from pose measurements.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum InitMode {
    /// First pose measurement (or identity), then constant-velocity propagation.
    #[default]
    ConstantVelocity,
    /// Geodesic interpolation between consecutive pose measurements.
    Piecewise,
}

/// Initial values for `states` from time-stamped pose measurements.
pub fn initialize_from_poses(
    group: LieGroup,
    states: &[StateStamp],
    poses: &[(f64, LieElement)],
    mode: InitMode,
) -> Result<Values> {
    let mut sorted: Vec<&(f64, LieElement)> = poses.iter().collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut values = Values::new();
    let zero = DVector::zeros(group.dim());
    if sorted.is_empty() {
        for s in states {
            values.insert_pose(s.pose, LieElement::identity(group));
            values.insert_vector(s.vel, zero.clone());
        }
        return Ok(values);
    }
    let twist = |a: &(f64, LieElement), b: &(f64, LieElement)| -> Result<Tangent> {
        let dt = b.0 - a.0;
        if dt <= 0.0 {
            return Ok(zero.clone());
        }
        Ok(a.1.local(&b.1)? / dt)
    };
    match mode {
        InitMode::ConstantVelocity => {
            let (t0, p0) = (sorted[0].0, &sorted[0].1);
            let w = if sorted.len() > 1 { twist(sorted[0], sorted[1])? } else { zero.clone() };
            for s in states {
                values.insert_pose(s.pose, p0.compose(&exp(group, &(&w * (s.time - t0)))));
                values.insert_vector(s.vel, w.clone());
            }
        }
        InitMode::Piecewise => {
            for s in states {
                let j = sorted.partition_point(|m| m.0 <= s.time);
                let (a, b) = match (j, sorted.len()) {
                    (_, 1) => (sorted[0], sorted[0]),
                    (0, _) => (sorted[0], sorted[1]),
                    (j, n) if j >= n => (sorted[n - 2], sorted[n - 1]),
                    (j, _) => (sorted[j - 1], sorted[j]),
                };
                let w = twist(a, b)?;
                values.insert_pose(s.pose, a.1.compose(&exp(group, &(&w * (s.time - a.0)))));
                values.insert_vector(s.vel, w);
            }
        }
    }
    Ok(values)
}

/// Initial values by integrating body-velocity readings from `start`.
///
/// States before the first reading use it; between readings the latest one holds.
pub fn dead_reckoning(
    group: LieGroup,
    states: &[StateStamp],
    start: &LieElement,
    velocities: &[(f64, DVector<f64>)],
) -> Result<Values> {
    if velocities.is_empty() {
        return initialize_from_poses(
            group,
            states,
            &[(states.first().map_or(0.0, |s| s.time), start.clone())],
            InitMode::ConstantVelocity,
        );
    }
    let mut sorted: Vec<&(f64, DVector<f64>)> = velocities.iter().collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut values = Values::new();
    let mut pose = start.clone();
    let mut prev_t = states.first().map_or(0.0, |s| s.time);
    for s in states {
        let j = sorted.partition_point(|v| v.0 <= s.time + crate::chain::TIME_SNAP);
        let w = &sorted[j.saturating_sub(1)].1;
        if w.len() != group.dim() {
            return Err(Error::Dimension(format!("velocity reading has length {}", w.len())));
        }
        let k = sorted.partition_point(|v| v.0 <= prev_t + crate::chain::TIME_SNAP);
        let w_prev = &sorted[k.saturating_sub(1)].1;
        pose = pose.compose(&exp(group, &(w_prev * (s.time - prev_t))));
        prev_t = s.time;
        values.insert_pose(s.pose, pose.clone());
        values.insert_vector(s.vel, w.clone());
    }
    Ok(values)
}
