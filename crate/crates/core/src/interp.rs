//! Measurement-time interpolation.
//!
//! Factors attached to states that are not optimized ("interp states") are
//! rewritten as factors on the bracketing optimized states ("borders"). The
//! interp states are recovered after the solve by posterior interpolation.

use std::any::Any;
use std::collections::{BTreeSet, HashMap};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, RwLock};

use nalgebra::{DMatrix, DVector};

use crate::chain::{build_chain, check_increasing, find_knot, ChainGraph, ChainSolution, Measurement};
use crate::error::{Error, Result};
use crate::gaussian::{Key, QuadraticFactor, Scope};
use crate::lie::LieElement;
use crate::lie_ct::{
    bracket, interpolate_lie, query_lie, Bracket, Factor, LieInterpolation, LieSolution, LieStateEstimate,
    Linearization, NonlinearGraph, Residual, StateStamp, Value, ValueCache, Values, WnoaFactor,
};
use crate::linalg::symmetrized;
use crate::lti::LtiModel;
use crate::par::{self, Execution};
use crate::query::{interp_coeffs, QueryKind, StateEstimate};

/// Noise model of a wrapped factor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum NoiseMode {
    /// `R + C Sigma C^T`: adds the interpolation uncertainty.
    #[default]
    Full,
    /// `R` only.
    Simplified,
}

impl NoiseMode {
    pub fn name(self) -> &'static str {
        match self {
            NoiseMode::Full => "full",
            NoiseMode::Simplified => "simplified",
        }
    }
}

impl std::str::FromStr for NoiseMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(NoiseMode::Full),
            "simplified" => Ok(NoiseMode::Simplified),
            _ => Err(Error::Invalid(format!("unknown noise mode '{s}' (expected full or simplified)"))),
        }
    }
}

// ---------------------------------------------------------------------------
// Linear chains

/// Reduced chain: knots at `border_times`, measurements elsewhere wrapped onto
/// their bracketing knots through the interpolation coefficients.
pub fn reduce_chain(
    model: &LtiModel,
    prior_mean: DVector<f64>,
    prior_cov: DMatrix<f64>,
    border_times: &[f64],
    measurements: &[Measurement],
    mode: NoiseMode,
) -> Result<ChainGraph> {
    check_increasing(border_times)?;
    let (on_knots, off): (Vec<&Measurement>, Vec<&Measurement>) =
        measurements.iter().partition(|m| find_knot(border_times, m.time).is_some());
    let on_knots: Vec<Measurement> = on_knots.into_iter().cloned().collect();
    let mut graph = build_chain(model, prior_mean, prior_cov, border_times, &on_knots)?;
    let n = model.state_dim();
    for m in off {
        graph.extra.push(wrap_measurement(model, &graph, m, mode, n)?);
    }
    Ok(graph)
}

fn wrap_measurement(
    model: &LtiModel,
    graph: &ChainGraph,
    m: &Measurement,
    mode: NoiseMode,
    n: usize,
) -> Result<QuadraticFactor> {
    let times = graph.times();
    let (start, end) = (times[0], times[times.len() - 1]);
    if m.time <= start || m.time >= end {
        return Err(Error::OutOfSpan { time: m.time, start, end });
    }
    if m.c.ncols() != n || m.c.nrows() != m.y.len() {
        return Err(Error::Dimension(format!("measurement at t={} does not match the state", m.time)));
    }
    let k = times.partition_point(|&t| t < m.time);
    let c = interp_coeffs(model, times[k - 1], m.time, times[k])?;
    let cw = &m.c * c.jacobian();
    let y = &m.y - &m.c * &c.eta;
    let r = match mode {
        NoiseMode::Full => symmetrized(&m.r + &m.c * &c.sigma * m.c.transpose()),
        NoiseMode::Simplified => m.r.clone(),
    };
    let scope = Scope::new(vec![(graph.knots[k - 1].key, n), (graph.knots[k].key, n)])?;
    QuadraticFactor::from_residual(scope, &cw, &y, &r)
}

/// `tr(P_tau) / max(tr(P_prev), tr(P_next))` for an interpolated linear estimate.
pub fn linear_bubbling(sol: &ChainSolution, est: &StateEstimate) -> Option<f64> {
    if est.kind != QueryKind::Interpolated {
        return None;
    }
    let k = sol.times.partition_point(|&t| t < est.time);
    let border = sol.covs[k - 1].trace().max(sol.covs[k].trace());
    Some(est.cov.trace() / border)
}

/// Estimates at `times` from a reduced chain solution (knots pass through unchanged).
pub fn update_interp_linear(
    model: &LtiModel,
    sol: &ChainSolution,
    times: &[f64],
    exec: Execution,
) -> Result<Vec<StateEstimate>> {
    let (start, end) = (sol.times[0], sol.times[sol.len() - 1]);
    if let Some(&t) = times.iter().find(|&&t| t < start - crate::chain::TIME_SNAP || t > end + crate::chain::TIME_SNAP)
    {
        return Err(Error::OutOfSpan { time: t, start, end });
    }
    crate::query::query_batch(model, sol, times, exec)
}

// ---------------------------------------------------------------------------
// Lie-group graphs

/// Placement of one interp state relative to the borders.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Binding {
    Between {
        state: StateStamp,
        prev: StateStamp,
        next: StateStamp,
    },
    /// The interp state coincides with a border.
    Alias {
        state: StateStamp,
        border: StateStamp,
    },
}

impl Binding {
    pub fn state(&self) -> StateStamp {
        match self {
            Binding::Between { state, .. } | Binding::Alias { state, .. } => *state,
        }
    }

    /// Border keys the binding maps onto.
    fn border_keys(&self) -> Vec<Key> {
        match self {
            Binding::Between { prev, next, .. } => vec![prev.pose, prev.vel, next.pose, next.vel],
            Binding::Alias { border, .. } => vec![border.pose, border.vel],
        }
    }
}

type Snapshot = (LieElement, DVector<f64>, LieElement, DVector<f64>);

fn snapshot(values: &Values, prev: &StateStamp, next: &StateStamp) -> Result<Snapshot> {
    Ok((
        values.pose(prev.pose)?.clone(),
        values.vector(prev.vel)?.clone(),
        values.pose(next.pose)?.clone(),
        values.vector(next.vel)?.clone(),
    ))
}

/// Interpolated states shared by all wrapped factors of one reduced graph.
///
/// Entries remember the border values they were computed from; a lookup with
/// different values falls back to direct computation.
#[derive(Debug)]
pub struct InterpCache {
    qc: DMatrix<f64>,
    bindings: Vec<Binding>,
    entries: RwLock<HashMap<Key, (Snapshot, Arc<LieInterpolation>)>>,
    enabled: AtomicBool,
    evaluations: AtomicUsize,
}

impl InterpCache {
    fn new(qc: DMatrix<f64>, bindings: Vec<Binding>) -> Self {
        InterpCache {
            qc,
            bindings,
            entries: RwLock::new(HashMap::new()),
            enabled: AtomicBool::new(true),
            evaluations: AtomicUsize::new(0),
        }
    }

    pub fn set_enabled(&self, on: bool) {
        self.enabled.store(on, Ordering::SeqCst);
        if !on {
            self.entries.write().expect("cache lock").clear();
        }
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled.load(Ordering::SeqCst)
    }

    /// Interpolations computed so far, cached or not.
    pub fn evaluations(&self) -> usize {
        self.evaluations.load(Ordering::SeqCst)
    }

    pub fn reset_evaluations(&self) {
        self.evaluations.store(0, Ordering::SeqCst);
    }

    fn compute(
        &self,
        values: &Values,
        state: &StateStamp,
        prev: &StateStamp,
        next: &StateStamp,
    ) -> Result<LieInterpolation> {
        self.evaluations.fetch_add(1, Ordering::SeqCst);
        interpolate_lie(
            &self.qc,
            (values.pose(prev.pose)?, values.vector(prev.vel)?, prev.time),
            (values.pose(next.pose)?, values.vector(next.vel)?, next.time),
            state.time,
        )
    }

    fn get(
        &self,
        values: &Values,
        state: &StateStamp,
        prev: &StateStamp,
        next: &StateStamp,
    ) -> Result<Arc<LieInterpolation>> {
        if self.is_enabled() {
            let entries = self.entries.read().expect("cache lock");
            if let Some((snap, it)) = entries.get(&state.pose) {
                if *snap == snapshot(values, prev, next)? {
                    return Ok(it.clone());
                }
            }
        }
        Ok(Arc::new(self.compute(values, state, prev, next)?))
    }
}

impl ValueCache for InterpCache {
    fn fill(&self, values: &Values, exec: Execution) -> Result<()> {
        if !self.is_enabled() {
            return Ok(());
        }
        let between: Vec<(StateStamp, StateStamp, StateStamp)> = self
            .bindings
            .iter()
            .filter_map(|b| match b {
                Binding::Between { state, prev, next } => Some((*state, *prev, *next)),
                Binding::Alias { .. } => None,
            })
            .collect();
        let computed = par::map(exec, &between, |(s, p, n)| -> Result<(Key, (Snapshot, Arc<LieInterpolation>))> {
            let snap = snapshot(values, p, n)?;
            Ok((s.pose, (snap, Arc::new(self.compute(values, s, p, n)?))))
        });
        let mut entries = self.entries.write().expect("cache lock");
        entries.clear();
        for c in computed {
            let (k, e) = c?;
            entries.insert(k, e);
        }
        Ok(())
    }
}

/// Factor on interpolated states, re-expressed on their bordering states.
///
/// Keys are the border keys of every binding followed by the inner factor's
/// remaining keys (e.g. a landmark).
#[derive(Debug)]
pub struct WrappedFactor {
    pub inner: Arc<dyn Factor>,
    pub bindings: Vec<Binding>,
    pub mode: NoiseMode,
    keys: Vec<Key>,
    cache: Arc<InterpCache>,
}

impl WrappedFactor {
    pub fn new(
        inner: Arc<dyn Factor>,
        bindings: Vec<Binding>,
        mode: NoiseMode,
        cache: Arc<InterpCache>,
    ) -> Result<Self> {
        let mut keys: Vec<Key> = Vec::new();
        for b in &bindings {
            if !inner.keys().iter().any(|k| *k == b.state().pose || *k == b.state().vel) {
                return Err(Error::Invalid(format!("factor does not involve interpolated state {}", b.state().pose)));
            }
            for k in b.border_keys() {
                if !keys.contains(&k) {
                    keys.push(k);
                }
            }
        }
        for &k in inner.keys() {
            let interp = bindings.iter().any(|b| k == b.state().pose || k == b.state().vel);
            if !interp && !keys.contains(&k) {
                keys.push(k);
            }
        }
        Ok(WrappedFactor { inner, bindings, mode, keys, cache })
    }

    fn interpolations(&self, values: &Values) -> Result<Vec<Option<Arc<LieInterpolation>>>> {
        self.bindings
            .iter()
            .map(|b| match b {
                Binding::Between { state, prev, next } => Ok(Some(self.cache.get(values, state, prev, next)?)),
                Binding::Alias { .. } => Ok(None),
            })
            .collect()
    }

    /// Values for the inner factor's keys with interp states filled in.
    fn inner_values(&self, values: &Values, its: &[Option<Arc<LieInterpolation>>]) -> Result<Values> {
        let mut local = Values::new();
        for &k in self.inner.keys() {
            let mut placed = false;
            for (b, it) in self.bindings.iter().zip(its) {
                let s = b.state();
                if k != s.pose && k != s.vel {
                    continue;
                }
                let v = match (b, it) {
                    (Binding::Between { .. }, Some(it)) if k == s.pose => Value::Pose(it.pose.clone()),
                    (Binding::Between { .. }, Some(it)) => Value::Vector(it.vel.clone()),
                    (Binding::Alias { border, .. }, _) if k == s.pose => values.get(border.pose)?.clone(),
                    (Binding::Alias { border, .. }, _) => values.get(border.vel)?.clone(),
                    _ => unreachable!("between bindings always carry an interpolation"),
                };
                local.insert(k, v);
                placed = true;
            }
            if !placed {
                local.insert(k, values.get(k)?.clone());
            }
        }
        Ok(local)
    }

    fn compute(&self, values: &Values, jacobians: bool) -> Result<Linearization> {
        let its = self.interpolations(values)?;
        let local = self.inner_values(values, &its)?;
        let need_inner_jac = jacobians || self.mode == NoiseMode::Full;
        if !need_inner_jac {
            return Ok(Linearization { residual: self.inner.evaluate(&local)?, jacobians: Vec::new() });
        }
        let lin = self.inner.linearize(&local)?;
        let rows = lin.residual.error.len();
        let mut cov = lin.residual.cov.clone();
        let mut blocks: Vec<Option<DMatrix<f64>>> = vec![None; self.keys.len()];
        let slot = |k: Key| self.keys.iter().position(|x| *x == k).expect("wrapped key");
        let add = |blocks: &mut Vec<Option<DMatrix<f64>>>, k: Key, j: DMatrix<f64>| {
            let i = slot(k);
            match &mut blocks[i] {
                Some(b) => *b += j,
                None => blocks[i] = Some(j),
            }
        };
        for (b, it) in self.bindings.iter().zip(&its) {
            let s = b.state();
            let pose_j = self.inner.keys().iter().position(|k| *k == s.pose).map(|i| &lin.jacobians[i]);
            let vel_j = self.inner.keys().iter().position(|k| *k == s.vel).map(|i| &lin.jacobians[i]);
            match (b, it) {
                (Binding::Between { prev, next, .. }, Some(it)) => {
                    let m = it.pose.group().dim();
                    let mut c = DMatrix::zeros(rows, 2 * m);
                    if let Some(j) = pose_j {
                        c.columns_mut(0, m).copy_from(j);
                    }
                    if let Some(j) = vel_j {
                        c.columns_mut(m, m).copy_from(j);
                    }
                    if self.mode == NoiseMode::Full {
                        cov += &c * &it.sigma * c.transpose();
                    }
                    if jacobians {
                        let chained = &c * &it.jacobian;
                        for (i, k) in [prev.pose, prev.vel, next.pose, next.vel].into_iter().enumerate() {
                            add(&mut blocks, k, chained.columns(i * m, m).into_owned());
                        }
                    }
                }
                (Binding::Alias { border, .. }, _) => {
                    if jacobians {
                        if let Some(j) = pose_j {
                            add(&mut blocks, border.pose, j.clone());
                        }
                        if let Some(j) = vel_j {
                            add(&mut blocks, border.vel, j.clone());
                        }
                    }
                }
                _ => unreachable!("between bindings always carry an interpolation"),
            }
        }
        let mut out = Vec::new();
        if jacobians {
            for (i, &k) in self.inner.keys().iter().enumerate() {
                let interp = self.bindings.iter().any(|b| k == b.state().pose || k == b.state().vel);
                if !interp {
                    add(&mut blocks, k, lin.jacobians[i].clone());
                }
            }
            for (i, b) in blocks.into_iter().enumerate() {
                let dim = values.dim(self.keys[i])?;
                out.push(b.unwrap_or_else(|| DMatrix::zeros(rows, dim)));
            }
        }
        let cov = if self.mode == NoiseMode::Full { symmetrized(cov) } else { cov };
        Ok(Linearization { residual: Residual { error: lin.residual.error, cov }, jacobians: out })
    }
}

impl Factor for WrappedFactor {
    fn keys(&self) -> &[Key] {
        &self.keys
    }

    fn evaluate(&self, values: &Values) -> Result<Residual> {
        Ok(self.compute(values, false)?.residual)
    }

    fn linearize(&self, values: &Values) -> Result<Linearization> {
        self.compute(values, true)
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

/// Reduced graph together with what is needed to recover the interp states.
#[derive(Clone, Debug)]
pub struct InterpolatedGraph {
    /// Optimized graph; its states are the borders.
    pub reduced: NonlinearGraph,
    /// Every trajectory state of the original graph, in time order.
    pub full_states: Vec<StateStamp>,
    pub bindings: Vec<Binding>,
    pub mode: NoiseMode,
    pub cache: Arc<InterpCache>,
}

impl InterpolatedGraph {
    pub fn borders(&self) -> &[StateStamp] {
        &self.reduced.states
    }

    pub fn set_caching(&self, on: bool) {
        self.cache.set_enabled(on);
    }

    pub fn wrapped_factor_count(&self) -> usize {
        self.reduced.factors.iter().filter(|f| f.as_any().is::<WrappedFactor>()).count()
    }
}

/// Replaces every state not listed in `border_indices` by interpolation between
/// its bracketing borders.
///
/// Motion factors touching interp states are dropped, motion factors between
/// adjacent borders are added when missing, and every other factor touching an
/// interp state is wrapped onto the borders.
pub fn interpolate_factor_graph(
    graph: &NonlinearGraph,
    border_indices: &[usize],
    mode: NoiseMode,
) -> Result<InterpolatedGraph> {
    let states = &graph.states;
    let chosen: BTreeSet<usize> = border_indices.iter().copied().collect();
    if chosen.is_empty() {
        return Err(Error::Invalid("at least one border state is required".into()));
    }
    if let Some(&bad) = chosen.iter().find(|&&i| i >= states.len()) {
        return Err(Error::Invalid(format!("border index {bad} is out of range")));
    }
    let borders: Vec<StateStamp> = chosen.iter().map(|&i| states[i]).collect();
    let mut bindings = Vec::new();
    for (i, s) in states.iter().enumerate() {
        if chosen.contains(&i) {
            continue;
        }
        let b = match bracket(&borders, s.time).map_err(|_| {
            Error::Invalid(format!("state {} at t={} is not bracketed by border states", s.pose, s.time))
        })? {
            Bracket::At(k) => Binding::Alias { state: *s, border: borders[k] },
            Bracket::Between(k) => Binding::Between { state: *s, prev: borders[k], next: borders[k + 1] },
        };
        bindings.push(b);
    }
    let by_key: HashMap<Key, usize> =
        bindings.iter().enumerate().flat_map(|(i, b)| [(b.state().pose, i), (b.state().vel, i)]).collect();
    let cache = Arc::new(InterpCache::new(graph.qc.clone(), bindings.clone()));
    let mut reduced = NonlinearGraph::new(graph.group, graph.qc.clone())?;
    reduced.states = borders.clone();
    let mut motion_pairs = BTreeSet::new();
    for f in &graph.factors {
        let touched: BTreeSet<usize> = f.keys().iter().filter_map(|k| by_key.get(k).copied()).collect();
        if let Some(m) = f.motion() {
            if touched.is_empty() {
                motion_pairs.insert((m.prev.pose, m.next.pose));
                reduced.factors.push(f.clone());
            }
            continue;
        }
        if touched.is_empty() {
            reduced.factors.push(f.clone());
        } else {
            let bs = touched.into_iter().map(|i| bindings[i]).collect();
            reduced.add(WrappedFactor::new(f.clone(), bs, mode, cache.clone())?);
        }
    }
    for w in borders.windows(2) {
        if !motion_pairs.contains(&(w[0].pose, w[1].pose)) {
            reduced.add(WnoaFactor::new(graph.group, &graph.qc, w[0], w[1])?);
        }
    }
    reduced.cache = if bindings.iter().any(|b| matches!(b, Binding::Between { .. })) {
        Some(cache.clone() as Arc<dyn ValueCache>)
    } else {
        graph.cache.clone()
    };
    Ok(InterpolatedGraph { reduced, full_states: states.clone(), bindings, mode, cache })
}

/// Estimate of every original state after a reduced solve.
#[derive(Clone, Debug)]
pub struct TrajectoryEstimate {
    pub states: Vec<StateStamp>,
    pub estimates: Vec<LieStateEstimate>,
    /// Means under the original keys (plus non-trajectory variables of the solve).
    pub values: Values,
}

/// Means of every original state: borders as solved, interp states interpolated.
pub fn interp_means(ig: &InterpolatedGraph, solved: &Values) -> Result<Values> {
    let mut out = solved.clone();
    for b in &ig.bindings {
        let s = b.state();
        match b {
            Binding::Between { prev, next, .. } => {
                let it = ig.cache.compute(solved, &s, prev, next)?;
                out.insert_pose(s.pose, it.pose);
                out.insert_vector(s.vel, it.vel);
            }
            Binding::Alias { border, .. } => {
                out.insert(s.pose, solved.get(border.pose)?.clone());
                out.insert(s.vel, solved.get(border.vel)?.clone());
            }
        }
    }
    Ok(out)
}

/// Fills in the interp states after a reduced solve: means and covariances by
/// posterior interpolation, border estimates passed through.
pub fn update_interp_values(ig: &InterpolatedGraph, sol: &LieSolution) -> Result<TrajectoryEstimate> {
    let estimates =
        ig.full_states.iter().map(|s| query_lie(sol, &ig.reduced.qc, s.time)).collect::<Result<Vec<_>>>()?;
    let mut values = sol.values.clone();
    for (s, e) in ig.full_states.iter().zip(&estimates) {
        values.insert_pose(s.pose, e.pose.clone());
        values.insert_vector(s.vel, e.vel.clone());
    }
    Ok(TrajectoryEstimate { states: ig.full_states.clone(), estimates, values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::solve_chain;
    use crate::lie::{exp, LieGroup};
    use crate::lie_ct::{gauss_newton, laplace_covariances, BetweenFactor, PosePriorFactor, SolverConfig};
    use crate::linalg::rel_diff;
    use crate::query::dense_gp_posterior;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn scalar_meas(t: f64, y: f64, r: f64) -> Measurement {
        Measurement::new(
            t,
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DMatrix::from_element(1, 1, r),
            DVector::from_element(1, y),
        )
    }

    fn wnoa1() -> LtiModel {
        LtiModel::wnoa(DMatrix::from_element(1, 1, 0.7)).unwrap()
    }

    #[test]
    fn single_interp_state_full_noise_is_exact() {
        let model = wnoa1();
        let (pm, pc) = (DVector::from_vec(vec![0.1, -0.2]), DMatrix::identity(2, 2) * 0.5);
        let meas = vec![scalar_meas(0.0, 0.3, 0.2), scalar_meas(0.4, 0.9, 0.1), scalar_meas(1.0, 0.5, 0.3)];
        let full = solve_chain(&build_chain(&model, pm.clone(), pc.clone(), &[0.0, 0.4, 1.0], &meas).unwrap()).unwrap();
        let red = solve_chain(&reduce_chain(&model, pm, pc, &[0.0, 1.0], &meas, NoiseMode::Full).unwrap()).unwrap();
        for (a, b) in [(0, 0), (2, 1)] {
            assert!((&full.means[a] - &red.means[b]).amax() < 1e-10);
            assert!(rel_diff(&full.covs[a], &red.covs[b]) < 1e-9);
        }
        let pair_full = {
            let (p, c) = (&full.covs, &full.cross);
            // Cov(x2, x0) = Cov(x2, x1) Cov(x1)^-1 Cov(x1, x0) on a Markov chain
            &c[1] * p[1].clone().try_inverse().unwrap() * &c[0]
        };
        assert!(rel_diff(&pair_full, &red.cross[0]) < 1e-8);
    }

    #[test]
    fn simplified_noise_keeps_r() {
        let model = wnoa1();
        let meas = vec![scalar_meas(0.5, 1.0, 0.25)];
        let g =
            reduce_chain(&model, DVector::zeros(2), DMatrix::identity(2, 2), &[0.0, 1.0], &meas, NoiseMode::Simplified)
                .unwrap();
        let coeffs = interp_coeffs(&model, 0.0, 0.5, 1.0).unwrap();
        let cw = &meas[0].c * coeffs.jacobian();
        // information of the wrapped factor equals C'^T R^-1 C'
        let expect = cw.transpose() * &cw / 0.25;
        assert!((&g.extra[0].info - expect).amax() < 1e-12);
        let full =
            reduce_chain(&model, DVector::zeros(2), DMatrix::identity(2, 2), &[0.0, 1.0], &meas, NoiseMode::Full)
                .unwrap();
        // full noise is larger, so its information is smaller in the PSD order
        let diff = &g.extra[0].info - &full.extra[0].info;
        assert!(diff.symmetric_eigenvalues().min() > -1e-12);
    }

    #[test]
    fn measurements_outside_borders_are_rejected() {
        let model = wnoa1();
        let meas = vec![scalar_meas(1.5, 1.0, 0.25)];
        let r = reduce_chain(&model, DVector::zeros(2), DMatrix::identity(2, 2), &[0.0, 1.0], &meas, NoiseMode::Full);
        assert!(matches!(r, Err(Error::OutOfSpan { .. })));
    }

    #[test]
    fn interpolated_chain_matches_dense_oracle() {
        let model = wnoa1();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let knots = [0.0, 0.6, 1.1, 1.9, 2.5];
        let meas: Vec<Measurement> = knots.iter().map(|&t| scalar_meas(t, rng.gen_range(-1.0..1.0), 0.2)).collect();
        let (pm, pc) = (DVector::zeros(2), DMatrix::identity(2, 2));
        let sol = solve_chain(&build_chain(&model, pm.clone(), pc.clone(), &knots, &meas).unwrap()).unwrap();
        let qs = [0.3, 1.5, 2.2, 1.1];
        let est = update_interp_linear(&model, &sol, &qs, Execution::Sequential).unwrap();
        let dense = dense_gp_posterior(&model, &pm, &pc, &knots, &meas, &qs).unwrap();
        for (e, d) in est.iter().zip(&dense[knots.len()..]) {
            assert!((&e.mean - &d.mean).amax() < 1e-9);
            assert!(rel_diff(&e.cov, &d.cov) < 1e-8);
        }
        assert_eq!(est[3].kind, QueryKind::Knot);
        assert!(linear_bubbling(&sol, &est[3]).is_none());
        assert!(linear_bubbling(&sol, &est[0]).is_some());
    }

    fn se2_graph(n: usize, dt: f64) -> (NonlinearGraph, Values) {
        let g = LieGroup::Se2;
        let times: Vec<f64> = (0..n).map(|i| i as f64 * dt).collect();
        let mut graph = NonlinearGraph::trajectory(g, DMatrix::identity(3, 3), &times).unwrap();
        let w = DVector::from_vec(vec![1.0, 0.1, 0.4]);
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let mut vals = Values::new();
        for s in graph.states.clone() {
            let truth = exp(g, &(&w * s.time));
            let noise = DVector::from_fn(3, |_, _| rng.gen_range(-0.02..0.02));
            graph.add(PosePriorFactor::new(s.pose, truth.perturb(&noise), DMatrix::identity(3, 3) * 1e-3).unwrap());
            vals.insert_pose(s.pose, truth);
            vals.insert_vector(s.vel, w.clone());
        }
        (graph, vals)
    }

    #[test]
    fn reduction_structure() {
        let (mut graph, _) = se2_graph(5, 0.2);
        let st = graph.states.clone();
        graph.add(
            BetweenFactor::new(
                st[1].pose,
                st[3].pose,
                exp(LieGroup::Se2, &DVector::from_element(3, 0.1)),
                DMatrix::identity(3, 3),
            )
            .unwrap(),
        );
        let ig = interpolate_factor_graph(&graph, &[0, 2, 4], NoiseMode::Full).unwrap();
        let keys = ig.reduced.variable_keys();
        for i in [1, 3] {
            assert!(!keys.contains(&st[i].pose) && !keys.contains(&st[i].vel));
        }
        assert_eq!(keys.len(), 6);
        assert_eq!(ig.reduced.motion_factor_count(), 2);
        // unary priors on 1 and 3 and the between factor are wrapped
        assert_eq!(ig.wrapped_factor_count(), 3);
        let between = ig
            .reduced
            .factors
            .iter()
            .filter_map(|f| f.as_any().downcast_ref::<WrappedFactor>())
            .find(|w| w.bindings.len() == 2)
            .unwrap();
        assert_eq!(between.keys().len(), 6);
    }

    #[test]
    fn no_interp_states_is_idempotent() {
        let (graph, _) = se2_graph(4, 0.2);
        let all: Vec<usize> = (0..4).collect();
        let once = interpolate_factor_graph(&graph, &all, NoiseMode::Full).unwrap();
        let twice = interpolate_factor_graph(&once.reduced, &all, NoiseMode::Full).unwrap();
        assert_eq!(once.reduced.factors.len(), graph.factors.len());
        assert_eq!(twice.reduced.factors.len(), once.reduced.factors.len());
    }

    #[test]
    fn gaps_are_rejected() {
        let (graph, _) = se2_graph(5, 0.2);
        assert!(matches!(interpolate_factor_graph(&graph, &[1, 3], NoiseMode::Full), Err(Error::Invalid(_))));
    }

    #[test]
    fn wrapped_jacobians_match_finite_differences() {
        let (mut graph, mut vals) = se2_graph(5, 0.3);
        let st = graph.states.clone();
        let landmark = Key::symbol('l', 0);
        vals.insert_vector(landmark, DVector::from_vec(vec![2.0, 1.0]));
        graph.add(
            crate::lie_ct::BearingRangeFactor::new(
                st[1].pose,
                crate::lie_ct::Landmark::Variable(landmark),
                0.2,
                2.0,
                DMatrix::identity(2, 2) * 0.01,
            )
            .unwrap(),
        );
        graph.add(
            crate::lie_ct::LinearVectorFactor::new(
                st[3].vel,
                DMatrix::from_row_slice(1, 3, &[0.0, 1.0, 0.0]),
                DVector::zeros(1),
                DMatrix::identity(1, 1),
            )
            .unwrap(),
        );
        graph.add(
            BetweenFactor::new(
                st[1].pose,
                st[2].pose,
                exp(LieGroup::Se2, &DVector::from_element(3, 0.1)),
                DMatrix::identity(3, 3),
            )
            .unwrap(),
        );
        // perturb away from the generating trajectory
        let delta: HashMap<Key, DVector<f64>> = st
            .iter()
            .flat_map(|s| [(s.pose, DVector::from_element(3, 0.05)), (s.vel, DVector::from_element(3, -0.1))])
            .collect();
        let vals = vals.retract(&delta);
        for mode in [NoiseMode::Full, NoiseMode::Simplified] {
            let ig = interpolate_factor_graph(&graph, &[0, 2, 4], mode).unwrap();
            for f in ig.reduced.factors.iter().filter(|f| f.as_any().is::<WrappedFactor>()) {
                let a = f.linearize(&vals).unwrap();
                let n = crate::lie_ct::numerical_jacobians(f.as_ref(), &vals, 1e-6).unwrap();
                for (x, y) in a.jacobians.iter().zip(&n) {
                    assert!((x - y).amax() < 1e-5, "{mode:?}");
                }
                if mode == NoiseMode::Simplified {
                    assert_eq!(
                        a.residual.cov,
                        f.as_any()
                            .downcast_ref::<WrappedFactor>()
                            .unwrap()
                            .inner
                            .evaluate(&interp_means(&ig, &vals).unwrap())
                            .unwrap()
                            .cov
                    );
                }
            }
        }
    }

    #[test]
    fn alias_binding_reproduces_inner_factor() {
        let g = LieGroup::Se2;
        let mut graph = NonlinearGraph::new(g, DMatrix::identity(3, 3)).unwrap();
        let a = StateStamp::indexed(0, 0.0);
        let b = StateStamp::indexed(1, 1.0);
        let dup = StateStamp::indexed(2, 1.0);
        graph.states = vec![a, b, dup];
        graph.add(WnoaFactor::new(g, &graph.qc, a, b).unwrap());
        let z = exp(g, &DVector::from_vec(vec![1.0, 0.0, 0.2]));
        let inner = PosePriorFactor::new(dup.pose, z.clone(), DMatrix::identity(3, 3) * 0.3).unwrap();
        graph.add(inner);
        let ig = interpolate_factor_graph(&graph, &[0, 1], NoiseMode::Full).unwrap();
        let w = ig.reduced.factors.iter().find(|f| f.as_any().is::<WrappedFactor>()).unwrap();
        assert_eq!(w.keys(), &[b.pose, b.vel]);
        let mut v = Values::new();
        v.insert_pose(b.pose, z.perturb(&DVector::from_element(3, 0.1)));
        v.insert_vector(b.vel, DVector::zeros(3));
        let direct = PosePriorFactor::new(b.pose, z, DMatrix::identity(3, 3) * 0.3).unwrap().linearize(&v).unwrap();
        let wrapped = w.linearize(&v).unwrap();
        assert_eq!(wrapped.residual, direct.residual);
        assert_eq!(wrapped.jacobians[0], direct.jacobians[0]);
        assert!(wrapped.jacobians[1].amax() == 0.0);
    }

    #[test]
    fn cache_is_transparent_and_counts_distinct_states() {
        let (mut graph, vals) = se2_graph(7, 0.2);
        let st = graph.states.clone();
        // a second factor on every interp state
        for s in &st {
            graph.add(
                crate::lie_ct::LinearVectorFactor::new(
                    s.vel,
                    DMatrix::from_row_slice(1, 3, &[0.0, 1.0, 0.0]),
                    DVector::zeros(1),
                    DMatrix::identity(1, 1),
                )
                .unwrap(),
            );
        }
        let ig = interpolate_factor_graph(&graph, &[0, 3, 6], NoiseMode::Full).unwrap();
        let interp_count = ig.bindings.len();
        ig.set_caching(false);
        ig.cache.reset_evaluations();
        let uncached = ig.reduced.linearize(&vals, Execution::Sequential).unwrap();
        assert_eq!(ig.cache.evaluations(), 2 * interp_count);
        ig.set_caching(true);
        ig.cache.reset_evaluations();
        let cached = ig.reduced.linearize(&vals, Execution::Parallel).unwrap();
        assert_eq!(ig.cache.evaluations(), interp_count);
        assert_eq!(cached, uncached);
    }

    #[test]
    fn laplace_at_full_means_matches_full_solve() {
        let (graph, vals) = se2_graph(9, 0.25);
        let full = gauss_newton(&graph, &vals, &SolverConfig::default()).unwrap();
        let ig = interpolate_factor_graph(&graph, &[0, 4, 8], NoiseMode::Full).unwrap();
        let red = gauss_newton(&ig.reduced, &vals, &SolverConfig::default()).unwrap();
        assert!(red.converged);
        let est = update_interp_values(&ig, &red).unwrap();
        assert_eq!(est.estimates[4].kind, QueryKind::Knot);
        assert!(est.estimates.iter().any(|e| e.bubbling.is_some()));
        let lap = laplace_covariances(&graph, &full.values, Execution::Sequential).unwrap();
        for s in &graph.states {
            let a = lap.joint(&[s.pose, s.vel]).unwrap();
            let b = full.covariances.joint(&[s.pose, s.vel]).unwrap();
            assert!(rel_diff(&a, &b) < 1e-8);
        }
        let means = interp_means(&ig, &red.values).unwrap();
        for s in &graph.states {
            assert!(means.contains(s.pose) && means.contains(s.vel));
        }
    }
}
