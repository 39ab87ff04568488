//! Posterior queries at arbitrary times between (or beyond) solved knots.
//!
//! Between two knots the state at `tau` depends only on the bracketing pair:
//! `x_tau = eta + [Lambda Psi] [x_{k-1}; x_k]` plus independent noise with
//! covariance `Sigma`. They are what eliminating `x_tau` between the two motion
//! factors `(t_{k-1}, tau)` and `(tau, t_k)` gives, computed through the prior
//! kernel: `Psi = Q(tau, t_{k-1}) Phi(t_k, tau)^T Q(t_k, t_{k-1})^-1` where
//! `Q(tau, t_{k-1})` is the process noise accumulated over `[t_{k-1}, tau]`.

use nalgebra::{DMatrix, DVector};

use crate::chain::{check_increasing, find_knot, ChainSolution, Measurement, TIME_SNAP};
use crate::error::{Error, Result};
use crate::gaussian::GaussianDensity;
use crate::linalg::{block_diag, cholesky, symmetrized};
use crate::lti::LtiModel;
use crate::par::{self, Execution};

/// Interpolation coefficients for one query time.
#[derive(Clone, Debug, PartialEq)]
pub struct InterpCoeffs {
    pub t_prev: f64,
    pub tau: f64,
    pub t_next: f64,
    pub lambda: DMatrix<f64>,
    pub psi: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    pub eta: DVector<f64>,
}

impl InterpCoeffs {
    /// `[Lambda Psi]`.
    pub fn jacobian(&self) -> DMatrix<f64> {
        let n = self.lambda.nrows();
        let mut j = DMatrix::zeros(n, 2 * n);
        j.view_mut((0, 0), (n, n)).copy_from(&self.lambda);
        j.view_mut((0, n), (n, n)).copy_from(&self.psi);
        j
    }

    /// Mean for given bracket states.
    pub fn mean(&self, prev: &DVector<f64>, next: &DVector<f64>) -> DVector<f64> {
        &self.eta + &self.lambda * prev + &self.psi * next
    }

    /// Mean and covariance given the joint density of the bracket pair.
    pub fn apply(&self, pair: &GaussianDensity) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let n = self.lambda.nrows();
        if pair.mean.len() != 2 * n {
            return Err(Error::Dimension(format!(
                "pair density has dimension {}, expected {}",
                pair.mean.len(),
                2 * n
            )));
        }
        let j = self.jacobian();
        let mean = &self.eta + &j * &pair.mean;
        let cov = symmetrized(&self.sigma + &j * &pair.cov * j.transpose());
        Ok((mean, cov))
    }
}

/// Coefficients for `t_prev < tau < t_next`.
pub fn interp_coeffs(model: &LtiModel, t_prev: f64, tau: f64, t_next: f64) -> Result<InterpCoeffs> {
    if !(tau >= t_prev && tau <= t_next) {
        return Err(Error::OutOfSpan { time: tau, start: t_prev, end: t_next });
    }
    if tau - t_prev <= TIME_SNAP || t_next - tau <= TIME_SNAP {
        return Err(Error::Invalid(format!("query time {tau} coincides with a bracket knot")));
    }
    let first = model.discretize(t_prev, tau)?;
    let second = model.discretize(tau, t_next)?;
    // kernel form: only the noise of the whole bracket is inverted, which stays
    // well conditioned when tau is close to either knot
    let q1_a2t = &first.q * second.a.transpose();
    let total = symmetrized(&second.a * &q1_a2t + &second.q);
    let psi = cholesky(&total, "process noise")?.solve(&q1_a2t.transpose()).transpose();
    let lambda = &first.a - &psi * &second.a * &first.a;
    let sigma = symmetrized(&first.q - &psi * q1_a2t.transpose());
    let eta = &first.v - &psi * (&second.a * &first.v + &second.v);
    Ok(InterpCoeffs { t_prev, tau, t_next, lambda, psi, sigma, eta })
}

/// Interpolated density from coefficients and the bracket-pair posterior.
pub fn query(coeffs: &InterpCoeffs, pair: &GaussianDensity) -> Result<(DVector<f64>, DMatrix<f64>)> {
    coeffs.apply(pair)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QueryKind {
    /// Query time coincides with a knot.
    Knot,
    Interpolated,
    /// Outside the knot span; uses one-sided prior propagation.
    Extrapolated,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StateEstimate {
    pub time: f64,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub kind: QueryKind,
}

/// Posterior at `tau` from a chain solution.
pub fn query_at(model: &LtiModel, sol: &ChainSolution, tau: f64) -> Result<StateEstimate> {
    if sol.is_empty() {
        return Err(Error::Invalid("empty solution".into()));
    }
    if !tau.is_finite() {
        return Err(Error::Invalid("query time is not finite".into()));
    }
    if let Some(k) = find_knot(&sol.times, tau) {
        return Ok(StateEstimate {
            time: tau,
            mean: sol.means[k].clone(),
            cov: sol.covs[k].clone(),
            kind: QueryKind::Knot,
        });
    }
    let last = sol.len() - 1;
    if tau > sol.times[last] {
        let tb = model.discretize(sol.times[last], tau)?;
        let mean = &tb.a * &sol.means[last] + &tb.v;
        let cov = symmetrized(&tb.a * &sol.covs[last] * tb.a.transpose() + &tb.q);
        return Ok(StateEstimate { time: tau, mean, cov, kind: QueryKind::Extrapolated });
    }
    if tau < sol.times[0] {
        let tb = model.discretize(tau, sol.times[0])?;
        let ainv = tb.a.clone().try_inverse().ok_or_else(|| Error::Numerical("transition is singular".into()))?;
        let mean = &ainv * (&sol.means[0] - &tb.v);
        let cov = symmetrized(&ainv * (&sol.covs[0] + &tb.q) * ainv.transpose());
        return Ok(StateEstimate { time: tau, mean, cov, kind: QueryKind::Extrapolated });
    }
    let k = sol.times.partition_point(|&t| t < tau);
    let coeffs = interp_coeffs(model, sol.times[k - 1], tau, sol.times[k])?;
    let (mean, cov) = coeffs.apply(&sol.pair(k - 1)?)?;
    Ok(StateEstimate { time: tau, mean, cov, kind: QueryKind::Interpolated })
}

/// Queries many times, optionally in parallel; each query is independent.
pub fn query_batch(model: &LtiModel, sol: &ChainSolution, taus: &[f64], exec: Execution) -> Result<Vec<StateEstimate>> {
    par::map(exec, taus, |&t| query_at(model, sol, t)).into_iter().collect()
}

/// Largest number of knots accepted by [`dense_gp_posterior`].
pub const DENSE_MAX_KNOTS: usize = 51;

/// Posterior by conditioning the lifted prior over all knot and query times at once.
///
/// The prior is built from the kernel `Phi(t, s)` on the union of times and the
/// measurements are applied through the full joint covariance. Cubic in the
/// number of times; intended as a reference for small problems.
pub fn dense_gp_posterior(
    model: &LtiModel,
    prior_mean: &DVector<f64>,
    prior_cov: &DMatrix<f64>,
    knot_times: &[f64],
    measurements: &[Measurement],
    query_times: &[f64],
) -> Result<Vec<StateEstimate>> {
    if knot_times.is_empty() || knot_times.len() > DENSE_MAX_KNOTS {
        return Err(Error::Invalid(format!("dense posterior supports 1..={DENSE_MAX_KNOTS} knots")));
    }
    check_increasing(knot_times)?;
    let t0 = knot_times[0];
    let mut grid: Vec<f64> = knot_times.to_vec();
    for &q in query_times {
        if q < t0 - TIME_SNAP {
            return Err(Error::OutOfSpan { time: q, start: t0, end: f64::INFINITY });
        }
        if find_knot(&grid, q).is_none() {
            let pos = grid.partition_point(|&t| t < q);
            grid.insert(pos, q);
        }
    }
    let n = model.state_dim();
    let big = grid.len();
    // lifted transition and noise
    let mut lifted_a = DMatrix::zeros(n * big, n * big);
    let mut qblocks = Vec::with_capacity(big);
    let mut lifted_v = DVector::zeros(n * big);
    for i in 0..big {
        lifted_a.view_mut((i * n, i * n), (n, n)).fill_with_identity();
        for j in 0..i {
            let phi = model.transition(grid[i] - grid[j]);
            lifted_a.view_mut((i * n, j * n), (n, n)).copy_from(&phi);
        }
        if i == 0 {
            qblocks.push(prior_cov.clone());
            lifted_v.rows_mut(0, n).copy_from(prior_mean);
        } else {
            let tb = model.discretize(grid[i - 1], grid[i])?;
            qblocks.push(tb.q);
            lifted_v.rows_mut(i * n, n).copy_from(&tb.v);
        }
    }
    let lifted_q = block_diag(&qblocks.iter().collect::<Vec<_>>());
    let xprior = &lifted_a * lifted_v;
    let pprior = symmetrized(&lifted_a * lifted_q * lifted_a.transpose());

    let rows: usize = measurements.iter().map(|m| m.y.len()).sum();
    let mut c = DMatrix::zeros(rows, n * big);
    let mut y = DVector::zeros(rows);
    let mut r = 0;
    for m in measurements {
        let k = find_knot(&grid, m.time)
            .ok_or_else(|| Error::Invalid(format!("measurement time {} matches no knot", m.time)))?;
        c.view_mut((r, k * n), (m.y.len(), n)).copy_from(&m.c);
        y.rows_mut(r, m.y.len()).copy_from(&m.y);
        r += m.y.len();
    }
    let rmat = block_diag(&measurements.iter().map(|m| &m.r).collect::<Vec<_>>());
    let (mean, cov) = if rows == 0 {
        (xprior, pprior)
    } else {
        let pct = &pprior * c.transpose();
        let s = &c * &pct + rmat;
        let ch = cholesky(&s, "innovation covariance")?;
        let gain_t = ch.solve(&pct.transpose());
        let mean = &xprior + gain_t.transpose() * (y - &c * &xprior);
        let cov = symmetrized(&pprior - &pct * gain_t);
        (mean, cov)
    };
    let mut out = Vec::with_capacity(knot_times.len() + query_times.len());
    for &t in knot_times.iter().chain(query_times) {
        let k = find_knot(&grid, t).expect("time placed on grid");
        let kind = if find_knot(knot_times, t).is_some() {
            QueryKind::Knot
        } else if t > knot_times[knot_times.len() - 1] {
            QueryKind::Extrapolated
        } else {
            QueryKind::Interpolated
        };
        out.push(StateEstimate {
            time: t,
            mean: mean.rows(k * n, n).into_owned(),
            cov: cov.view((k * n, k * n), (n, n)).into_owned(),
            kind,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{build_chain, solve_chain};
    use crate::linalg::rel_diff;
    use crate::lti::Input;
    use proptest::prelude::*;

    fn model(q: f64) -> LtiModel {
        LtiModel::wnoa(DMatrix::from_element(1, 1, q)).unwrap()
    }

    fn pos(t: f64, y: f64) -> Measurement {
        Measurement::new(
            t,
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DMatrix::from_element(1, 1, 0.05),
            DVector::from_element(1, y),
        )
    }

    fn problem() -> (LtiModel, Vec<f64>, Vec<Measurement>) {
        let times = vec![0.0, 0.5, 1.3, 2.0, 3.1];
        let meas = times.iter().map(|&t| pos(t, t.sin())).collect();
        (model(0.8), times, meas)
    }

    #[test]
    fn wnoa_has_zero_eta_and_static_midpoint_shape() {
        let c = interp_coeffs(&model(1.0), 0.0, 0.5, 1.0).unwrap();
        assert_eq!(c.eta, DVector::zeros(2));
        // a constant-velocity trajectory is reproduced exactly
        let prev = DVector::from_vec(vec![1.0, 2.0]);
        let next = DVector::from_vec(vec![3.0, 2.0]);
        let m = c.mean(&prev, &next);
        assert!((m[0] - 2.0).abs() < 1e-12 && (m[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn query_next_to_a_knot_matches_dense() {
        let (mdl, times, meas) = problem();
        let sol = solve_chain(&build_chain(&mdl, DVector::zeros(2), DMatrix::identity(2, 2), &times, &meas).unwrap())
            .unwrap();
        for tau in [0.5 + 1e-5, 1.3 - 1e-5] {
            let q = query_at(&mdl, &sol, tau).unwrap();
            let d = &dense_gp_posterior(&mdl, &DVector::zeros(2), &DMatrix::identity(2, 2), &times, &meas, &[tau])
                .unwrap()[times.len()];
            assert!((&q.mean - &d.mean).amax() < 1e-11);
            assert!(rel_diff(&q.cov, &d.cov) < 1e-11);
        }
    }

    #[test]
    fn coefficients_match_kernel_form() {
        let mdl = model(0.7);
        for &(t1, tau, t2) in &[(0.0, 0.2, 1.0), (1.0, 1.9, 2.5), (0.0, 0.5, 1.0)] {
            let c = interp_coeffs(&mdl, t1, tau, t2).unwrap();
            let q_tau_1 = mdl.discretize(t1, tau).unwrap().q;
            let q_2_tau = mdl.discretize(tau, t2).unwrap().q;
            let q_2_1 = mdl.discretize(t1, t2).unwrap().q;
            let phi_2_tau = mdl.transition(t2 - tau);
            let phi_tau_1 = mdl.transition(tau - t1);
            let phi_2_1 = mdl.transition(t2 - t1);
            let q21inv = q_2_1.clone().try_inverse().unwrap();
            let psi = &q_tau_1 * phi_2_tau.transpose() * &q21inv;
            let lambda = &phi_tau_1 - &psi * &phi_2_1;
            assert!(rel_diff(&c.psi, &psi) < 1e-10);
            assert!(rel_diff(&c.lambda, &lambda) < 1e-10);
            // the variant built from the noise over [tau, t_k] only agrees at the midpoint
            let psi_alt = &q_2_tau * phi_2_tau.transpose() * &q21inv;
            let midpoint = ((tau - t1) - (t2 - tau)).abs() < 1e-12;
            assert_eq!(rel_diff(&c.psi, &psi_alt) < 1e-10, midpoint);
        }
    }

    #[test]
    fn general_model_with_input_matches_dense() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, -0.2]);
        let l = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let mdl = LtiModel::new(a, l, DMatrix::from_element(1, 1, 0.5))
            .unwrap()
            .with_input(Input::Constant(DVector::from_vec(vec![0.0, 0.3])))
            .unwrap();
        let times = vec![0.0, 0.7, 1.5, 2.2];
        let meas: Vec<_> = times.iter().map(|&t| pos(t, t.cos())).collect();
        let g = build_chain(&mdl, DVector::zeros(2), DMatrix::identity(2, 2), &times, &meas).unwrap();
        let sol = solve_chain(&g).unwrap();
        let taus = [0.2, 1.0, 2.0];
        let dense =
            dense_gp_posterior(&mdl, &DVector::zeros(2), &DMatrix::identity(2, 2), &times, &meas, &taus).unwrap();
        for (i, &tau) in taus.iter().enumerate() {
            let q = query_at(&mdl, &sol, tau).unwrap();
            let d = &dense[times.len() + i];
            assert!((&q.mean - &d.mean).amax() < 1e-9);
            assert!(rel_diff(&q.cov, &d.cov) < 1e-8);
        }
    }

    #[test]
    fn knot_query_snaps() {
        let (mdl, times, meas) = problem();
        let g = build_chain(&mdl, DVector::zeros(2), DMatrix::identity(2, 2), &times, &meas).unwrap();
        let sol = solve_chain(&g).unwrap();
        let q = query_at(&mdl, &sol, 1.3 + 5e-10).unwrap();
        assert_eq!(q.kind, QueryKind::Knot);
        assert_eq!(q.mean, sol.means[2]);
    }

    #[test]
    fn extrapolation_is_flagged_and_grows() {
        let (mdl, times, meas) = problem();
        let g = build_chain(&mdl, DVector::zeros(2), DMatrix::identity(2, 2), &times, &meas).unwrap();
        let sol = solve_chain(&g).unwrap();
        let after = query_at(&mdl, &sol, 4.0).unwrap();
        let before = query_at(&mdl, &sol, -0.5).unwrap();
        assert_eq!(after.kind, QueryKind::Extrapolated);
        assert_eq!(before.kind, QueryKind::Extrapolated);
        assert!(after.cov[(0, 0)] > sol.covs[4][(0, 0)]);
        assert!(before.cov[(0, 0)] > sol.covs[0][(0, 0)]);
        // forward extrapolation equals the dense posterior beyond the last knot
        let dense =
            dense_gp_posterior(&mdl, &DVector::zeros(2), &DMatrix::identity(2, 2), &times, &meas, &[4.0]).unwrap();
        assert!((&after.mean - &dense[5].mean).amax() < 1e-9);
        assert!(rel_diff(&after.cov, &dense[5].cov) < 1e-8);
    }

    #[test]
    fn dense_guard_and_bad_queries() {
        let mdl = model(1.0);
        let many: Vec<f64> = (0..60).map(|i| i as f64).collect();
        assert!(dense_gp_posterior(&mdl, &DVector::zeros(2), &DMatrix::identity(2, 2), &many, &[], &[]).is_err());
        assert!(matches!(interp_coeffs(&mdl, 0.0, 2.0, 1.0), Err(Error::OutOfSpan { .. })));
        assert!(interp_coeffs(&mdl, 0.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn batch_paths_agree() {
        let (mdl, times, meas) = problem();
        let g = build_chain(&mdl, DVector::zeros(2), DMatrix::identity(2, 2), &times, &meas).unwrap();
        let sol = solve_chain(&g).unwrap();
        let taus: Vec<f64> = (0..50).map(|i| -0.2 + i as f64 * 0.07).collect();
        let a = query_batch(&mdl, &sol, &taus, Execution::Sequential).unwrap();
        let b = query_batch(&mdl, &sol, &taus, Execution::Parallel).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn interpolated_covariance_is_spd_and_bounded_by_prior(
            seedy in proptest::collection::vec(-1.0f64..1.0, 5),
            frac in 0.01f64..0.99,
        ) {
            let (mdl, times, _) = problem();
            let meas: Vec<_> = times.iter().zip(&seedy).map(|(&t, &y)| pos(t, y)).collect();
            let g = build_chain(&mdl, DVector::zeros(2), DMatrix::identity(2, 2), &times, &meas).unwrap();
            let sol = solve_chain(&g).unwrap();
            let tau = times[1] + frac * (times[2] - times[1]);
            let q = query_at(&mdl, &sol, tau).unwrap();
            prop_assert!(crate::linalg::is_spd(&q.cov));
            let prior = dense_gp_posterior(&mdl, &DVector::zeros(2), &DMatrix::identity(2, 2), &times, &[], &[tau]).unwrap();
            let diff = &prior[5].cov - &q.cov;
            prop_assert!(diff.symmetric_eigenvalues().min() > -1e-10);
        }
    }
}
