//! Run configuration: one JSON document, every field optional, unknown fields rejected.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use gpct::interp::NoiseMode;
use gpct::lie::LieGroup;
use gpct::lie_ct::SolverConfig;
use gpct::par::Execution;

use crate::error::CliError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    #[default]
    Sinusoid,
    Se2Arc,
    Landmarks,
    Se3,
}

impl DatasetKind {
    /// State space of the kind; `None` for the linear vector model.
    pub fn group(self) -> Option<LieGroup> {
        match self {
            DatasetKind::Sinusoid => None,
            DatasetKind::Se2Arc | DatasetKind::Landmarks => Some(LieGroup::Se2),
            DatasetKind::Se3 => Some(LieGroup::Se3),
        }
    }
}

impl FromStr for DatasetKind {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| CliError::Validation(format!("unknown dataset '{s}' (sinusoid, se2_arc, landmarks, se3)")))
    }
}

/// Generator parameters; fields that do not apply to the chosen kind are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Readings per second (sinusoid).
    pub rate: f64,
    /// Seconds (sinusoid).
    pub duration: f64,
    /// Position noise standard deviation (sinusoid).
    pub noise_sd: f64,
    /// Number of states (SE(2) arc, landmarks, SE(3)); generator default when absent.
    pub n_states: Option<usize>,
    /// State spacing in seconds; generator default when absent.
    pub dt: Option<f64>,
    /// Body twist of the SE(2) arc.
    pub twist: [f64; 3],
    /// Pose-reading noise (SE(2) arc, SE(3)); both zero gives exact readings.
    pub translation_sd: f64,
    pub rotation_sd: f64,
    pub n_landmarks: Option<usize>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            kind: DatasetKind::Sinusoid,
            rate: 1.0,
            duration: 60.0,
            noise_sd: 0.1,
            n_states: None,
            dt: None,
            twist: [1.0, 0.0, 0.5],
            translation_sd: 0.05,
            rotation_sd: 0.02,
            n_landmarks: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Diagonal of the power spectral density; a per-dataset default when absent.
    pub qc_diag: Option<Vec<f64>>,
    /// Prior standard deviations on the first state of a linear solve (position then velocity).
    pub prior_sd: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSettings {
    pub max_iterations: usize,
    pub relative_tolerance: f64,
    pub lambda_initial: f64,
    pub lambda_factor: f64,
    pub lambda_max: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        let d = SolverConfig::default();
        SolverSettings {
            max_iterations: d.max_iterations,
            relative_tolerance: d.relative_tolerance,
            lambda_initial: d.lambda_initial,
            lambda_factor: d.lambda_factor,
            lambda_max: d.lambda_max,
        }
    }
}

/// Initialization of a nonlinear solve.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    /// Piecewise geodesics through pose readings when there are two or more,
    /// otherwise dead reckoning from the first pose reading.
    #[default]
    Auto,
    ConstantVelocity,
    Piecewise,
    DeadReckoning,
}

impl FromStr for InitKind {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| {
            CliError::Validation(format!("unknown init '{s}' (auto, constant_velocity, piecewise, dead_reckoning)"))
        })
    }
}

/// Source of the covariances reported for interpolated states after a reduced nonlinear solve.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceSource {
    /// Posterior interpolation from the border pair covariances.
    #[default]
    Interpolated,
    /// Inverse information of the original graph at the interpolated means.
    Laplace,
}

impl FromStr for CovarianceSource {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| CliError::Validation(format!("unknown covariance source '{s}' (interpolated, laplace)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    /// Spacing of a regular state grid added to the measurement times.
    pub knot_dt: Option<f64>,
    /// Keep every `interval`-th state (and the last) as a border; absent for a full solve.
    pub interval: Option<usize>,
    pub noise_mode: String,
    pub covariance: CovarianceSource,
    pub init: InitKind,
    pub solver: SolverSettings,
    pub parallel: bool,
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            knot_dt: None,
            interval: None,
            noise_mode: NoiseMode::Full.name().to_string(),
            covariance: CovarianceSource::default(),
            init: InitKind::default(),
            solver: SolverSettings::default(),
            parallel: true,
            seed: None,
            out_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<RunConfig, CliError> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Validation(m));
        let d = &self.dataset;
        if !(d.rate > 0.0) || !(d.duration > 0.0) {
            return bad(format!("dataset rate and duration must be positive (got {} and {})", d.rate, d.duration));
        }
        if !(d.noise_sd >= 0.0) || !(d.translation_sd >= 0.0) || !(d.rotation_sd >= 0.0) {
            return bad("noise standard deviations must be non-negative".into());
        }
        if d.dt.is_some_and(|dt| !(dt > 0.0)) || d.n_states.is_some_and(|n| n < 2) {
            return bad("dataset dt must be positive and n_states at least 2".into());
        }
        if self.knot_dt.is_some_and(|dt| !(dt > 0.0)) {
            return bad("knot_dt must be positive".into());
        }
        if self.interval == Some(0) {
            return bad("interval must be at least 1".into());
        }
        self.noise_mode()?;
        if let Some(q) = &self.model.qc_diag {
            let m = match d.kind.group() {
                Some(g) => g.dim(),
                None => 1,
            };
            if q.len() != m || q.iter().any(|v| !(*v > 0.0)) {
                return bad(format!("qc_diag needs {m} positive entries for dataset {:?}", d.kind));
            }
        }
        if let Some(p) = &self.model.prior_sd {
            if p.len() != 2 || p.iter().any(|v| !(*v > 0.0)) {
                return bad("prior_sd needs 2 positive entries".into());
            }
        }
        self.solver_config().validate().map_err(|e| CliError::Validation(e.to_string()))
    }

    pub fn noise_mode(&self) -> Result<NoiseMode, CliError> {
        self.noise_mode.parse().map_err(|e: gpct::Error| CliError::Validation(e.to_string()))
    }

    pub fn execution(&self) -> Execution {
        if self.parallel {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }

    pub fn solver_config(&self) -> SolverConfig {
        let s = &self.solver;
        SolverConfig {
            max_iterations: s.max_iterations,
            relative_tolerance: s.relative_tolerance,
            lambda_initial: s.lambda_initial,
            lambda_factor: s.lambda_factor,
            lambda_max: s.lambda_max,
            execution: self.execution(),
            ..SolverConfig::default()
        }
    }

    /// Power spectral density diagonal, falling back to a default per dataset kind.
    pub fn qc_diag(&self) -> Vec<f64> {
        if let Some(q) = &self.model.qc_diag {
            return q.clone();
        }
        match self.dataset.kind {
            DatasetKind::Sinusoid => vec![1.0],
            DatasetKind::Se2Arc => vec![1.0; 3],
            DatasetKind::Landmarks => gpct::datasets::LandmarkBenchConfig::default().qc_diag.to_vec(),
            DatasetKind::Se3 => vec![1.0; 6],
        }
    }

    pub fn require_seed(&self) -> Result<u64, CliError> {
        self.seed.ok_or_else(|| CliError::Validation("this subcommand is stochastic: pass --seed".into()))
    }
}
