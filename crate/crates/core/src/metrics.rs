//! Accuracy (RMSE) and consistency (NEES) of estimates against ground truth.

use nalgebra::{DMatrix, DVector};

use crate::chain::TIME_SNAP;
use crate::error::{Error, Result};
use crate::lie::LieElement;
use crate::linalg::cholesky;

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    /// Translation (or position) RMSE.
    pub rmse_translation: f64,
    /// Rotation-angle RMSE in radians; absent for vector states.
    pub rmse_rotation: Option<f64>,
    pub nees: Vec<f64>,
    pub mean_nees: f64,
}

/// `e^T P^-1 e`.
pub fn nees(error: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    if cov.nrows() != error.len() {
        return Err(Error::Dimension(format!(
            "error has length {}, covariance is {}x{}",
            error.len(),
            cov.nrows(),
            cov.ncols()
        )));
    }
    let ch = cholesky(cov, "estimate covariance")?;
    Ok(error.dot(&ch.solve(error)))
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

pub fn check_aligned(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Invalid(format!("{} estimates for {} truth states", a.len(), b.len())));
    }
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        if (x - y).abs() > TIME_SNAP {
            return Err(Error::Invalid(format!("timestamp mismatch at row {i}: {x} vs {y}")));
        }
    }
    Ok(())
}

/// Vector-state metrics; RMSE over the first `position_dim` components, NEES over the full state.
pub fn vector_metrics(
    times: &[f64],
    means: &[DVector<f64>],
    covs: &[DMatrix<f64>],
    truth_times: &[f64],
    truth: &[DVector<f64>],
    position_dim: usize,
) -> Result<MetricsReport> {
    check_aligned(times, truth_times)?;
    if means.len() != times.len() || covs.len() != times.len() {
        return Err(Error::Invalid("means, covariances and times differ in length".into()));
    }
    let mut sq = 0.0;
    let mut series = Vec::with_capacity(times.len());
    for ((m, p), x) in means.iter().zip(covs).zip(truth) {
        if m.len() != x.len() || position_dim > m.len() {
            return Err(Error::Dimension("estimate and truth dimensions differ".into()));
        }
        let e = m - x;
        sq += e.rows(0, position_dim).norm_squared();
        series.push(nees(&e, p)?);
    }
    let n = times.len().max(1) as f64;
    Ok(MetricsReport { rmse_translation: (sq / n).sqrt(), rmse_rotation: None, mean_nees: mean(&series), nees: series })
}

/// Which part of a group state enters the NEES.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum NeesScope {
    Pose,
    #[default]
    PoseVelocity,
}

/// Group-state metrics. The error is `[Log(T_est^-1 T_true); w_true - w_est]`,
/// matching right perturbations of the estimate.
pub fn lie_metrics(
    times: &[f64],
    estimates: &[(LieElement, DVector<f64>)],
    covs: &[DMatrix<f64>],
    truth_times: &[f64],
    truth: &[(LieElement, DVector<f64>)],
    scope: NeesScope,
) -> Result<MetricsReport> {
    check_aligned(times, truth_times)?;
    if estimates.len() != times.len() || covs.len() != times.len() {
        return Err(Error::Invalid("estimates, covariances and times differ in length".into()));
    }
    let (mut st, mut sr) = (0.0, 0.0);
    let mut series = Vec::with_capacity(times.len());
    for (((pe, we), p), (pt, wt)) in estimates.iter().zip(covs).zip(truth) {
        let m = pe.group().dim();
        st += (pe.translation() - pt.translation()).norm_squared();
        let rel = pe.between(pt);
        sr += rel.angle().powi(2);
        let eps = rel.log()?;
        let (e, cov) = match scope {
            NeesScope::Pose => (eps, p.view((0, 0), (m, m)).into_owned()),
            NeesScope::PoseVelocity => {
                let mut e = DVector::zeros(2 * m);
                e.rows_mut(0, m).copy_from(&eps);
                e.rows_mut(m, m).copy_from(&(wt - we));
                (e, p.clone())
            }
        };
        series.push(nees(&e, &cov)?);
    }
    let n = times.len().max(1) as f64;
    Ok(MetricsReport {
        rmse_translation: (st / n).sqrt(),
        rmse_rotation: Some((sr / n).sqrt()),
        mean_nees: mean(&series),
        nees: series,
    })
}
