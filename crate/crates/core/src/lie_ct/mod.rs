//! Continuous-time estimation on SE(2)/SE(3) with a white-noise-on-acceleration
//! prior on the body-frame velocity.
//!
//! Each state is a pose `T` and a generalized velocity `w` stored under two keys.
//! Between consecutive states the prior is linear in the local variable
//! `gamma(t) = [xi(t); xi_dot(t)]`, with `xi(t) = Log(T_{k-1}^-1 T(t))`.

mod factors;
mod query;
mod solver;

use std::any::Any;
use std::collections::{BTreeMap, HashMap};
use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gaussian::{Key, QuadraticFactor, Scope};
use crate::lie::{LieElement, Tangent};

pub use factors::{
    wnoa_error, BearingRangeFactor, BetweenFactor, Landmark, LinearVectorFactor, PosePriorFactor, WnoaError, WnoaFactor,
};
pub(crate) use query::{bracket, Bracket};
pub use query::{
    extrapolate_lie, extrapolation_jacobian, geodesic, interpolate_lie, query_lie, LieInterpolation, LieStateEstimate,
};
pub use solver::{
    dead_reckoning, gauss_newton, initialize_from_poses, laplace_covariances, InitMode, LieSolution, NonlinearGraph,
    SolverConfig,
};

/// Keys and time of one trajectory state.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StateStamp {
    pub pose: Key,
    pub vel: Key,
    pub time: f64,
}

impl StateStamp {
    /// State `i` uses keys `x{i}` and `v{i}`.
    pub fn indexed(i: usize, time: f64) -> StateStamp {
        StateStamp { pose: Key::symbol('x', i as u64), vel: Key::symbol('v', i as u64), time }
    }
}

/// Variable value: a group element or a plain vector.
#[derive(Clone, Debug, PartialEq)]
pub enum Value {
    Pose(LieElement),
    Vector(DVector<f64>),
}

impl Value {
    pub fn dim(&self) -> usize {
        match self {
            Value::Pose(p) => p.group().dim(),
            Value::Vector(v) => v.len(),
        }
    }

    pub fn retract(&self, delta: &DVector<f64>) -> Value {
        match self {
            Value::Pose(p) => Value::Pose(p.perturb(delta)),
            Value::Vector(v) => Value::Vector(v + delta),
        }
    }
}

/// Assignment of values to keys.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Values {
    map: BTreeMap<Key, Value>,
}

impl Values {
    pub fn new() -> Self {
        Values::default()
    }

    pub fn insert(&mut self, key: Key, value: Value) {
        self.map.insert(key, value);
    }

    pub fn insert_pose(&mut self, key: Key, pose: LieElement) {
        self.map.insert(key, Value::Pose(pose));
    }

    pub fn insert_vector(&mut self, key: Key, v: DVector<f64>) {
        self.map.insert(key, Value::Vector(v));
    }

    pub fn remove(&mut self, key: Key) -> Option<Value> {
        self.map.remove(&key)
    }

    pub fn get(&self, key: Key) -> Result<&Value> {
        self.map.get(&key).ok_or(Error::UnknownKey(key))
    }

    pub fn contains(&self, key: Key) -> bool {
        self.map.contains_key(&key)
    }

    pub fn pose(&self, key: Key) -> Result<&LieElement> {
        match self.get(key)? {
            Value::Pose(p) => Ok(p),
            Value::Vector(_) => Err(Error::Invalid(format!("key {key} holds a vector, not a pose"))),
        }
    }

    pub fn vector(&self, key: Key) -> Result<&DVector<f64>> {
        match self.get(key)? {
            Value::Vector(v) => Ok(v),
            Value::Pose(_) => Err(Error::Invalid(format!("key {key} holds a pose, not a vector"))),
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = Key> + '_ {
        self.map.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn dim(&self, key: Key) -> Result<usize> {
        Ok(self.get(key)?.dim())
    }

    /// Applies per-key tangent increments; keys without an increment are kept.
    pub fn retract(&self, delta: &HashMap<Key, DVector<f64>>) -> Values {
        let map =
            self.map.iter().map(|(k, v)| (*k, delta.get(k).map_or_else(|| v.clone(), |d| v.retract(d)))).collect();
        Values { map }
    }

    /// Copies every entry of `other` into `self`.
    pub fn extend(&mut self, other: &Values) {
        for (k, v) in &other.map {
            self.map.insert(*k, v.clone());
        }
    }
}

/// Residual and noise covariance of a factor at some values.
#[derive(Clone, Debug, PartialEq)]
pub struct Residual {
    pub error: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl Residual {
    /// `0.5 e^T Cov^-1 e`.
    pub fn cost(&self) -> Result<f64> {
        let ch = crate::linalg::cholesky(&self.cov, "factor noise covariance")?;
        Ok(0.5 * self.error.dot(&ch.solve(&self.error)))
    }
}

/// Residual with one Jacobian block per factor key: `e(x [+] d) ~ e + sum J_i d_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linearization {
    pub residual: Residual,
    pub jacobians: Vec<DMatrix<f64>>,
}

impl Linearization {
    pub fn to_quadratic(&self, keys: &[Key]) -> Result<QuadraticFactor> {
        let rows = self.residual.error.len();
        let dims: Vec<usize> = self.jacobians.iter().map(|j| j.ncols()).collect();
        let total = dims.iter().sum();
        let mut j = DMatrix::zeros(rows, total);
        let mut off = 0;
        for b in &self.jacobians {
            if b.nrows() != rows {
                return Err(Error::Dimension("jacobian block row count".into()));
            }
            j.view_mut((0, off), (rows, b.ncols())).copy_from(b);
            off += b.ncols();
        }
        let scope = Scope::new(keys.iter().copied().zip(dims).collect())?;
        QuadraticFactor::from_linearized(scope, &j, &self.residual.error, &self.residual.cov)
    }
}

/// Nonlinear factor over keyed values.
pub trait Factor: Send + Sync + fmt::Debug {
    fn keys(&self) -> &[Key];

    fn evaluate(&self, values: &Values) -> Result<Residual>;

    fn linearize(&self, values: &Values) -> Result<Linearization>;

    fn cost(&self, values: &Values) -> Result<f64> {
        self.evaluate(values)?.cost()
    }

    /// Present for motion-prior factors between two states.
    fn motion(&self) -> Option<&WnoaFactor> {
        None
    }

    fn as_any(&self) -> &dyn Any;
}

/// Precomputed per-values data shared by several factors.
///
/// [`NonlinearGraph`] fills its cache once, from a single owner, before factors
/// are evaluated or linearized in parallel.
pub trait ValueCache: Send + Sync + fmt::Debug {
    fn fill(&self, values: &Values, exec: crate::par::Execution) -> Result<()>;
}

/// Central finite-difference Jacobians of a factor's error, one block per key.
pub fn numerical_jacobians(factor: &dyn Factor, values: &Values, h: f64) -> Result<Vec<DMatrix<f64>>> {
    let e0 = factor.evaluate(values)?.error;
    let mut out = Vec::new();
    for &k in factor.keys() {
        let d = values.dim(k)?;
        let mut j = DMatrix::zeros(e0.len(), d);
        for i in 0..d {
            let mut step = DVector::zeros(d);
            step[i] = h;
            let mut dp = HashMap::new();
            dp.insert(k, step.clone());
            let mut dm = HashMap::new();
            dm.insert(k, -step);
            let ep = factor.evaluate(&values.retract(&dp))?.error;
            let em = factor.evaluate(&values.retract(&dm))?.error;
            j.set_column(i, &((ep - em) / (2.0 * h)));
        }
        out.push(j);
    }
    Ok(out)
}

/// Tangent increment that moves `a` onto `b` (`Log(a^-1 b)` for poses).
pub fn local_difference(a: &Value, b: &Value) -> Result<Tangent> {
    match (a, b) {
        (Value::Pose(x), Value::Pose(y)) => x.local(y),
        (Value::Vector(x), Value::Vector(y)) => Ok(y - x),
        _ => Err(Error::Invalid("values of different kinds".into())),
    }
}
