//! Seeded synthetic datasets.
//!
//! All noise comes from ChaCha20 (`rand_chacha::ChaCha20Rng`) seeded with a
//! 64-bit value through `SeedableRng::seed_from_u64`, so runs are bit-reproducible
//! within this implementation.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::chain::{check_increasing, find_knot, Measurement};
use crate::error::{Error, Result};
use crate::lie::{exp, right_jacobian, LieElement, LieGroup, Tangent};
use crate::lie_ct::{BearingRangeFactor, Landmark, LinearVectorFactor, NonlinearGraph, PosePriorFactor, StateStamp};
use crate::linalg::{check_square, cholesky};
use crate::lti::{wnoa_q, LtiModel};

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// Draw from `N(mean, cov)`.
pub fn sample_gaussian<R: Rng>(rng: &mut R, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<DVector<f64>> {
    let l = cholesky(cov, "sampling covariance")?.l();
    let z = DVector::from_fn(mean.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
    Ok(mean + l * z)
}

/// Variance used for records generated without noise, keeping covariances SPD.
pub const NOISE_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub enum TruthState {
    Vector(DVector<f64>),
    Lie { pose: LieElement, vel: DVector<f64> },
}

/// Ground truth sampled at increasing times.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<TruthState>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn vectors(&self) -> Result<Vec<DVector<f64>>> {
        self.states
            .iter()
            .map(|s| match s {
                TruthState::Vector(v) => Ok(v.clone()),
                TruthState::Lie { .. } => Err(Error::Invalid("trajectory holds group states".into())),
            })
            .collect()
    }

    pub fn lie_states(&self) -> Result<Vec<(LieElement, DVector<f64>)>> {
        self.states
            .iter()
            .map(|s| match s {
                TruthState::Lie { pose, vel } => Ok((pose.clone(), vel.clone())),
                TruthState::Vector(_) => Err(Error::Invalid("trajectory holds vector states".into())),
            })
            .collect()
    }
}

/// One sensor reading. Sensor tags: `position`, `velocity`, `pose`, `landmark:<id>`.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementRecord {
    pub time: f64,
    pub sensor: String,
    pub value: DVector<f64>,
    pub cov: DMatrix<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MeasurementLog {
    pub records: Vec<MeasurementRecord>,
}

impl MeasurementLog {
    pub fn push(&mut self, time: f64, sensor: &str, value: DVector<f64>, cov: DMatrix<f64>) {
        self.records.push(MeasurementRecord { time, sensor: sensor.to_string(), value, cov });
    }

    pub fn validate(&self) -> Result<()> {
        for (i, r) in self.records.iter().enumerate() {
            if !r.time.is_finite() {
                return Err(Error::Invalid(format!("record {i} has a non-finite time")));
            }
            check_square(&r.cov, r.value.len(), &format!("record {i} covariance"))?;
            cholesky(&r.cov, &format!("record {i} covariance"))?;
        }
        Ok(())
    }

    /// Distinct record times in increasing order.
    pub fn times(&self) -> Vec<f64> {
        let mut t: Vec<f64> = self.records.iter().map(|r| r.time).collect();
        t.sort_by(f64::total_cmp);
        t.dedup_by(|a, b| (*a - *b).abs() <= crate::chain::TIME_SNAP);
        t
    }

    /// `position` and `velocity` records as linear measurements of `[p; v]`.
    pub fn linear_measurements(&self, position_dim: usize) -> Result<Vec<Measurement>> {
        let m = position_dim;
        self.records
            .iter()
            .map(|r| {
                let offset = match r.sensor.as_str() {
                    "position" => 0,
                    "velocity" => m,
                    s => return Err(Error::Invalid(format!("sensor '{s}' has no linear model"))),
                };
                if r.value.len() != m {
                    return Err(Error::Dimension(format!(
                        "{} record at t={} has length {}",
                        r.sensor,
                        r.time,
                        r.value.len()
                    )));
                }
                let mut c = DMatrix::zeros(m, 2 * m);
                c.view_mut((0, offset), (m, m)).fill_with_identity();
                Ok(Measurement::new(r.time, c, r.cov.clone(), r.value.clone()))
            })
            .collect()
    }
}

/// Pose parameters: `[x, y, theta]` or `[translation; rotation vector]`.
pub fn pose_to_params(p: &LieElement) -> Result<Vec<f64>> {
    let mut v: Vec<f64> = p.translation().iter().copied().collect();
    v.extend(p.rotation_vector()?.iter());
    Ok(v)
}

pub fn pose_from_params(group: LieGroup, v: &[f64]) -> Result<LieElement> {
    match (group, v.len()) {
        (LieGroup::Se2, 3) => Ok(LieElement::se2(v[0], v[1], v[2])),
        (LieGroup::Se3, 6) => Ok(LieElement::se3(Vector3::new(v[0], v[1], v[2]), Vector3::new(v[3], v[4], v[5]))),
        _ => Err(Error::Dimension(format!("{} pose needs {} parameters, got {}", group.name(), group.dim(), v.len()))),
    }
}

fn diag(values: &[f64]) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_iterator(values.len(), values.iter().map(|s| (s * s).max(NOISE_FLOOR))))
}

fn noisy<R: Rng>(rng: &mut R, x: &DVector<f64>, sd: &[f64]) -> DVector<f64> {
    DVector::from_fn(x.len(), |i, _| x[i] + sd[i] * rng.sample::<f64, _>(StandardNormal))
}

/// `p(t) = sin(t)` sampled at `rate` Hz over `[0, duration]` with noisy position readings.
pub fn gen_sinusoid_1d(rate: f64, duration: f64, noise_sd: f64, seed: u64) -> Result<(Trajectory, MeasurementLog)> {
    if !(rate > 0.0) || !(duration > 0.0) || !(noise_sd >= 0.0) {
        return Err(Error::Invalid("rate and duration must be positive and the noise non-negative".into()));
    }
    let count = (rate * duration + 1e-9).floor() as usize + 1;
    let mut rng = rng(seed);
    let mut traj = Trajectory { times: Vec::with_capacity(count), states: Vec::with_capacity(count) };
    let mut log = MeasurementLog::default();
    for k in 0..count {
        let t = k as f64 / rate;
        traj.times.push(t);
        traj.states.push(TruthState::Vector(DVector::from_vec(vec![t.sin(), t.cos()])));
        let y = noisy(&mut rng, &DVector::from_element(1, t.sin()), &[noise_sd]);
        log.push(t, "position", y, diag(&[noise_sd]));
    }
    Ok((traj, log))
}

/// Truth and measurements for a linear model sampled from its own prior.
#[derive(Clone, Debug)]
pub struct LinearSample {
    pub times: Vec<f64>,
    pub truth: Vec<DVector<f64>>,
    pub measurements: Vec<Measurement>,
}

/// Draws `x_0 ~ N(prior)`, `x_k = A x_{k-1} + v + w_k` and `y_k = C x_k + n_k` at every time.
pub fn sample_linear(
    model: &LtiModel,
    prior_mean: &DVector<f64>,
    prior_cov: &DMatrix<f64>,
    times: &[f64],
    c: &DMatrix<f64>,
    r: &DMatrix<f64>,
    seed: u64,
) -> Result<LinearSample> {
    check_increasing(times)?;
    let mut rng = rng(seed);
    let mut truth = Vec::with_capacity(times.len());
    truth.push(sample_gaussian(&mut rng, prior_mean, prior_cov)?);
    for w in times.windows(2) {
        let tb = model.discretize(w[0], w[1])?;
        let mean = &tb.a * truth.last().expect("non-empty") + &tb.v;
        truth.push(sample_gaussian(&mut rng, &mean, &tb.q)?);
    }
    let zero = DVector::zeros(r.nrows());
    let measurements = times
        .iter()
        .zip(&truth)
        .map(|(&t, x)| Ok(Measurement::new(t, c.clone(), r.clone(), c * x + sample_gaussian(&mut rng, &zero, r)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(LinearSample { times: times.to_vec(), truth, measurements })
}

/// Noise settings for pose readings; `None` gives exact readings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseNoise {
    pub translation_sd: f64,
    pub rotation_sd: f64,
}

fn pose_sd(group: LieGroup, noise: Option<PoseNoise>) -> Vec<f64> {
    let (t, r) = noise.map_or((0.0, 0.0), |n| (n.translation_sd, n.rotation_sd));
    match group {
        LieGroup::Se2 => vec![t, t, r],
        LieGroup::Se3 => vec![t, t, t, r, r, r],
    }
}

fn push_pose<R: Rng>(
    rng: &mut R,
    log: &mut MeasurementLog,
    t: f64,
    pose: &LieElement,
    noise: Option<PoseNoise>,
) -> Result<()> {
    let g = pose.group();
    let sd = pose_sd(g, noise);
    let n = noisy(rng, &DVector::zeros(g.dim()), &sd);
    let measured = if noise.is_some() { pose.perturb(&n) } else { pose.clone() };
    log.push(t, "pose", DVector::from_vec(pose_to_params(&measured)?), diag(&sd));
    Ok(())
}

/// Constant-twist SE(2) arc with one pose reading per state.
pub fn gen_se2_arc(
    n_knots: usize,
    dt: f64,
    twist: Vector3<f64>,
    noise: Option<PoseNoise>,
    seed: u64,
) -> Result<(Trajectory, MeasurementLog)> {
    if n_knots < 2 || !(dt > 0.0) {
        return Err(Error::Invalid("an arc needs at least two states and a positive spacing".into()));
    }
    let w = DVector::from_column_slice(twist.as_slice());
    let mut rng = rng(seed);
    let mut traj = Trajectory { times: Vec::new(), states: Vec::new() };
    let mut log = MeasurementLog::default();
    for k in 0..n_knots {
        let t = k as f64 * dt;
        let pose = exp(LieGroup::Se2, &(&w * t));
        push_pose(&mut rng, &mut log, t, &pose, noise)?;
        traj.times.push(t);
        traj.states.push(TruthState::Lie { pose, vel: w.clone() });
    }
    Ok((traj, log))
}

/// SE(3) trajectory with body twist `[v_x(t), 0, 0, w(t)]`, `v_x` and `w` affine in
/// time, integrated from the identity; lateral velocity is zero throughout.
#[derive(Clone, Debug, PartialEq)]
pub struct Se3TrajConfig {
    pub n_knots: usize,
    pub dt: f64,
    pub speed: f64,
    pub acceleration: f64,
    pub angular_rate: Vector3<f64>,
    pub angular_accel: Vector3<f64>,
    pub noise: Option<PoseNoise>,
}

impl Default for Se3TrajConfig {
    fn default() -> Self {
        Se3TrajConfig {
            n_knots: 40,
            dt: 0.25,
            speed: 1.0,
            acceleration: 0.05,
            angular_rate: Vector3::new(0.0, 0.05, 0.3),
            angular_accel: Vector3::new(0.02, 0.0, -0.01),
            noise: Some(PoseNoise { translation_sd: 0.05, rotation_sd: 0.02 }),
        }
    }
}

fn se3_twist(cfg: &Se3TrajConfig, t: f64) -> Tangent {
    let w = cfg.angular_rate + cfg.angular_accel * t;
    DVector::from_vec(vec![cfg.speed + cfg.acceleration * t, 0.0, 0.0, w.x, w.y, w.z])
}

pub fn gen_se3_traj(cfg: &Se3TrajConfig, seed: u64) -> Result<(Trajectory, MeasurementLog)> {
    if cfg.n_knots < 2 || !(cfg.dt > 0.0) {
        return Err(Error::Invalid("a trajectory needs at least two states and a positive spacing".into()));
    }
    const SUBSTEPS: usize = 200;
    let mut rng = rng(seed);
    let mut traj = Trajectory { times: Vec::new(), states: Vec::new() };
    let mut log = MeasurementLog::default();
    let mut pose = LieElement::identity(LieGroup::Se3);
    for k in 0..cfg.n_knots {
        let t = k as f64 * cfg.dt;
        if k > 0 {
            // midpoint rule on the body twist
            let h = cfg.dt / SUBSTEPS as f64;
            for s in 0..SUBSTEPS {
                let tm = t - cfg.dt + (s as f64 + 0.5) * h;
                pose = pose.compose(&exp(LieGroup::Se3, &(se3_twist(cfg, tm) * h)));
            }
        }
        push_pose(&mut rng, &mut log, t, &pose, cfg.noise)?;
        traj.times.push(t);
        traj.states.push(TruthState::Lie { pose: pose.clone(), vel: se3_twist(cfg, t) });
    }
    Ok((traj, log))
}

/// Planar landmark benchmark: trajectory drawn from the WNOA prior, a pose reading
/// at the start, body-velocity readings at every state and bearing/range readings
/// to nearby landmarks.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkBenchConfig {
    pub n_states: usize,
    pub dt: f64,
    /// Diagonal of the power spectral density used to draw the trajectory.
    pub qc_diag: [f64; 3],
    pub initial_twist: [f64; 3],
    pub n_landmarks: usize,
    pub max_range: f64,
    /// At most this many (closest) landmarks are observed per state.
    pub max_per_state: usize,
    pub bearing_sd: f64,
    pub range_sd: f64,
    pub velocity_sd: [f64; 3],
}

impl Default for LandmarkBenchConfig {
    fn default() -> Self {
        LandmarkBenchConfig {
            n_states: 200,
            dt: 0.1,
            qc_diag: [0.2, 0.05, 0.1],
            initial_twist: [1.0, 0.0, 0.2],
            n_landmarks: 40,
            max_range: 6.0,
            max_per_state: 4,
            bearing_sd: 0.03,
            range_sd: 0.05,
            velocity_sd: [0.1, 0.05, 0.05],
        }
    }
}

impl LandmarkBenchConfig {
    pub fn qc(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_column_slice(&self.qc_diag))
    }
}

#[derive(Clone, Debug)]
pub struct LandmarkBenchmark {
    pub truth: Trajectory,
    pub landmarks: Vec<Vector2<f64>>,
    pub log: MeasurementLog,
}

/// Draws one interval of the WNOA prior in the local variable and maps it to the group.
fn wnoa_step<R: Rng>(
    rng: &mut R,
    group: LieGroup,
    pose: &LieElement,
    vel: &DVector<f64>,
    q: &DMatrix<f64>,
    dt: f64,
) -> Result<(LieElement, DVector<f64>)> {
    let m = group.dim();
    let mut mean = DVector::zeros(2 * m);
    mean.rows_mut(0, m).copy_from(&(vel * dt));
    mean.rows_mut(m, m).copy_from(vel);
    let gamma = sample_gaussian(rng, &mean, q)?;
    let xi = gamma.rows(0, m).into_owned();
    let next_vel = right_jacobian(group, &xi) * gamma.rows(m, m);
    Ok((pose.compose(&exp(group, &xi)), next_vel))
}

pub fn gen_landmark_benchmark(cfg: &LandmarkBenchConfig, seed: u64) -> Result<LandmarkBenchmark> {
    if cfg.n_states < 2 || !(cfg.dt > 0.0) || cfg.n_landmarks == 0 || !(cfg.max_range > 0.0) {
        return Err(Error::Invalid("benchmark needs two states, a positive spacing and landmarks in range".into()));
    }
    let g = LieGroup::Se2;
    let mut rng = rng(seed);
    let q = wnoa_q(&cfg.qc(), cfg.dt);
    let mut pose = LieElement::identity(g);
    let mut vel = DVector::from_column_slice(&cfg.initial_twist);
    let mut truth = Trajectory { times: Vec::new(), states: Vec::new() };
    for k in 0..cfg.n_states {
        if k > 0 {
            let (p, v) = wnoa_step(&mut rng, g, &pose, &vel, &q, cfg.dt)?;
            pose = p;
            vel = v;
        }
        truth.times.push(k as f64 * cfg.dt);
        truth.states.push(TruthState::Lie { pose: pose.clone(), vel: vel.clone() });
    }
    // landmarks scattered along the path
    let mut landmarks = Vec::with_capacity(cfg.n_landmarks);
    for _ in 0..cfg.n_landmarks {
        let k = rng.gen_range(0..cfg.n_states);
        let centre = match &truth.states[k] {
            TruthState::Lie { pose, .. } => pose.translation(),
            TruthState::Vector(_) => unreachable!("group trajectory"),
        };
        let r = rng.gen_range(0.5..cfg.max_range * 0.8);
        let a = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        landmarks.push(Vector2::new(centre[0] + r * a.cos(), centre[1] + r * a.sin()));
    }
    let mut log = MeasurementLog::default();
    // anchor reading of the start pose
    let anchor = PoseNoise { translation_sd: 0.01, rotation_sd: 0.005 };
    push_pose(&mut rng, &mut log, 0.0, &LieElement::identity(g), Some(anchor))?;
    let br_cov = diag(&[cfg.bearing_sd, cfg.range_sd]);
    for (t, s) in truth.times.iter().zip(&truth.states) {
        let (pose, vel) = match s {
            TruthState::Lie { pose, vel } => (pose, vel),
            TruthState::Vector(_) => unreachable!("group trajectory"),
        };
        log.push(*t, "velocity", noisy(&mut rng, vel, &cfg.velocity_sd), diag(&cfg.velocity_sd));
        let inv = pose.inverse();
        let mut seen: Vec<(f64, usize, f64)> = landmarks
            .iter()
            .enumerate()
            .filter_map(|(i, l)| {
                let p = inv.act(&DVector::from_vec(vec![l.x, l.y]));
                let r = p.norm();
                (r <= cfg.max_range && r > 1e-3).then(|| (r, i, p[1].atan2(p[0])))
            })
            .collect();
        seen.sort_by(|a, b| a.0.total_cmp(&b.0));
        for &(r, i, b) in seen.iter().take(cfg.max_per_state) {
            let z = noisy(&mut rng, &DVector::from_vec(vec![b, r]), &[cfg.bearing_sd, cfg.range_sd]);
            log.push(*t, &format!("landmark:{i}"), z, br_cov.clone());
        }
    }
    Ok(LandmarkBenchmark { truth, landmarks, log })
}

/// Landmark positions by id, used to resolve `landmark:<id>` records.
pub type LandmarkMap = BTreeMap<usize, Vector2<f64>>;

pub fn landmark_map(landmarks: &[Vector2<f64>]) -> LandmarkMap {
    landmarks.iter().copied().enumerate().collect()
}

/// Trajectory graph with states at `times` and one factor per record.
///
/// `pose` records become pose priors, `velocity` records linear velocity
/// factors, `landmark:<id>` records bearing/range factors to known landmarks.
/// Every record time must coincide with a state time.
pub fn build_lie_graph(
    group: LieGroup,
    qc: DMatrix<f64>,
    times: &[f64],
    log: &MeasurementLog,
    landmarks: &LandmarkMap,
) -> Result<NonlinearGraph> {
    log.validate()?;
    let mut graph = NonlinearGraph::trajectory(group, qc, times)?;
    let m = group.dim();
    for r in &log.records {
        let k = find_knot(times, r.time)
            .ok_or_else(|| Error::Invalid(format!("record at t={} matches no state", r.time)))?;
        let s: StateStamp = graph.states[k];
        match r.sensor.as_str() {
            "pose" => {
                let z = pose_from_params(group, r.value.as_slice())?;
                graph.add(PosePriorFactor::new(s.pose, z, r.cov.clone())?);
            }
            "velocity" => {
                if r.value.len() != m {
                    return Err(Error::Dimension(format!(
                        "velocity record at t={} has length {}",
                        r.time,
                        r.value.len()
                    )));
                }
                graph.add(LinearVectorFactor::new(s.vel, DMatrix::identity(m, m), r.value.clone(), r.cov.clone())?);
            }
            tag if tag.starts_with("landmark:") => {
                if group != LieGroup::Se2 {
                    return Err(Error::Invalid("landmark records need planar poses".into()));
                }
                let id: usize = tag[9..].parse().map_err(|_| Error::Invalid(format!("bad sensor tag '{tag}'")))?;
                let l = landmarks.get(&id).ok_or_else(|| Error::Invalid(format!("unknown landmark {id}")))?;
                if r.value.len() != 2 {
                    return Err(Error::Dimension(format!(
                        "bearing/range record at t={} has length {}",
                        r.time,
                        r.value.len()
                    )));
                }
                graph.add(BearingRangeFactor::new(s.pose, Landmark::Known(*l), r.value[0], r.value[1], r.cov.clone())?);
            }
            other => return Err(Error::Invalid(format!("unknown sensor '{other}'"))),
        }
    }
    Ok(graph)
}
