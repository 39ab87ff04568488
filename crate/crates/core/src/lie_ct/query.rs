use nalgebra::{DMatrix, DVector};

use super::{wnoa_error, LieSolution, StateStamp};
use crate::chain::TIME_SNAP;
use crate::error::{Error, Result};
use crate::lie::{d_right_jacobian_inv_times, d_right_jacobian_times, exp, right_jacobian, right_jacobian_inv};
use crate::lie::{LieElement, LieGroup, Tangent};
use crate::linalg::{spd_inverse, symmetrized};
use crate::lti::{wnoa_q, LtiModel};
use crate::query::{interp_coeffs, QueryKind};

/// Interpolated state between two trajectory states.
#[derive(Clone, Debug, PartialEq)]
pub struct LieInterpolation {
    pub tau: f64,
    pub pose: LieElement,
    pub vel: DVector<f64>,
    /// Local variable `[xi; xi_dot]` relative to the previous state.
    pub gamma: DVector<f64>,
    /// Derivative of `[eps_tau; eta_tau]` with respect to `[eps_1, eta_1, eps_2, eta_2]`.
    pub jacobian: DMatrix<f64>,
    /// Conditional covariance of the interpolated perturbation given both bracket states.
    pub sigma: DMatrix<f64>,
    /// Conditional gains on the previous and next state perturbations.
    pub lambda: DMatrix<f64>,
    pub psi: DMatrix<f64>,
}

impl LieInterpolation {
    /// `Sigma + [Lambda Psi] P [Lambda Psi]^T` for a joint covariance `P` of the bracket pair.
    pub fn covariance(&self, pair_cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let n = self.lambda.nrows();
        if pair_cov.nrows() != 2 * n || pair_cov.ncols() != 2 * n {
            return Err(Error::Dimension(format!("pair covariance must be {}x{}", 2 * n, 2 * n)));
        }
        let mut g = DMatrix::zeros(n, 2 * n);
        g.view_mut((0, 0), (n, n)).copy_from(&self.lambda);
        g.view_mut((0, n), (n, n)).copy_from(&self.psi);
        Ok(symmetrized(&self.sigma + &g * pair_cov * g.transpose()))
    }
}

/// Interpolates the trajectory at `tau` strictly inside `(t1, t2)`.
///
/// The mean comes from the linear WNOA interpolation of the local variable
/// `gamma = [Log(T1^-1 T); J_r(xi)^-1 w]`, pushed forward through `T = T1 Exp(xi)` and
/// `w = J_r(xi) xi_dot`.
pub fn interpolate_lie(
    qc: &DMatrix<f64>,
    prev: (&LieElement, &DVector<f64>, f64),
    next: (&LieElement, &DVector<f64>, f64),
    tau: f64,
) -> Result<LieInterpolation> {
    let group = prev.0.group();
    let m = group.dim();
    let (t1, t2) = (prev.2, next.2);
    let model = LtiModel::wnoa(qc.clone())?;
    let c = interp_coeffs(&model, t1, tau, t2)?;
    let xi2 = prev.0.local(next.0).map_err(|e| with_interval(e, t1, t2))?;
    let jinv2 = right_jacobian_inv(group, &xi2);
    let mut g1 = DVector::zeros(2 * m);
    g1.rows_mut(m, m).copy_from(prev.1);
    let mut g2 = DVector::zeros(2 * m);
    g2.rows_mut(0, m).copy_from(&xi2);
    g2.rows_mut(m, m).copy_from(&(&jinv2 * next.1));
    let gamma = &c.lambda * &g1 + &c.psi * &g2;
    let xi = gamma.rows(0, m).into_owned();
    let xi_dot = gamma.rows(m, m).into_owned();
    let pose = prev.0.compose(&exp(group, &xi));
    let jr = right_jacobian(group, &xi);
    let vel = &jr * &xi_dot;

    // d gamma / d [eps1, eta1, eps2, eta2]
    let x1 = -(&jinv2 * exp(group, &xi2).inverse().adjoint());
    let d2 = d_right_jacobian_inv_times(group, &xi2, next.1);
    let mut dg2 = DMatrix::zeros(2 * m, 4 * m);
    dg2.view_mut((0, 0), (m, m)).copy_from(&x1);
    dg2.view_mut((0, 2 * m), (m, m)).copy_from(&jinv2);
    dg2.view_mut((m, 0), (m, m)).copy_from(&(&d2 * &x1));
    dg2.view_mut((m, 2 * m), (m, m)).copy_from(&(&d2 * &jinv2));
    dg2.view_mut((m, 3 * m), (m, m)).copy_from(&jinv2);
    let mut dg1 = DMatrix::zeros(2 * m, 4 * m);
    dg1.view_mut((m, m), (m, m)).fill_with_identity();
    let dgamma = &c.lambda * dg1 + &c.psi * dg2;
    let top = dgamma.rows(0, m).into_owned();
    let bottom = dgamma.rows(m, m).into_owned();
    let mut jacobian = DMatrix::zeros(2 * m, 4 * m);
    let mut deps = &jr * &top;
    {
        let mut first = deps.view_mut((0, 0), (m, m));
        first += exp(group, &(-&xi)).adjoint();
    }
    jacobian.rows_mut(0, m).copy_from(&deps);
    jacobian.rows_mut(m, m).copy_from(&(d_right_jacobian_times(group, &xi, &xi_dot) * top + &jr * bottom));

    let (sigma, lambda, psi) = perturbation_conditional(qc, prev, (&pose, &vel, tau), next)?;
    Ok(LieInterpolation { tau, pose, vel, gamma, jacobian, sigma, lambda, psi })
}

fn with_interval(e: Error, t1: f64, t2: f64) -> Error {
    match e {
        Error::InjectivityRadius { angle, .. } => Error::InjectivityRadius { angle, interval: Some((t1, t2)) },
        other => other,
    }
}

/// Eliminates the interpolated perturbation between the two linearized motion factors.
fn perturbation_conditional(
    qc: &DMatrix<f64>,
    prev: (&LieElement, &DVector<f64>, f64),
    mid: (&LieElement, &DVector<f64>, f64),
    next: (&LieElement, &DVector<f64>, f64),
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let a = wnoa_error((prev.0, prev.1), (mid.0, mid.1), mid.2 - prev.2, true)
        .map_err(|e| with_interval(e, prev.2, mid.2))?;
    let b = wnoa_error((mid.0, mid.1), (next.0, next.1), next.2 - mid.2, true)
        .map_err(|e| with_interval(e, mid.2, next.2))?;
    let q1inv = spd_inverse(&wnoa_q(qc, mid.2 - prev.2), "process noise")?;
    let q2inv = spd_inverse(&wnoa_q(qc, next.2 - mid.2), "process noise")?;
    let e_tau = -&a.j_next;
    let f_next = &b.j_prev;
    let et_q1 = e_tau.transpose() * &q1inv;
    let ft_q2 = f_next.transpose() * &q2inv;
    let info = &et_q1 * &e_tau + &ft_q2 * f_next;
    let sigma = spd_inverse(&symmetrized(info), "interpolation information")?;
    let lambda = &sigma * et_q1 * &a.j_prev;
    let psi = &sigma * ft_q2 * (-&b.j_next);
    Ok((sigma, lambda, psi))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LieStateEstimate {
    pub time: f64,
    pub pose: LieElement,
    pub vel: DVector<f64>,
    /// Covariance of `[eps; eta]`.
    pub cov: DMatrix<f64>,
    pub kind: QueryKind,
    /// `tr(P_tau) / max(tr(P_prev), tr(P_next))` for interpolated queries.
    pub bubbling: Option<f64>,
}

/// Position of `tau` relative to the time-ordered `states`.
pub(crate) enum Bracket {
    At(usize),
    Between(usize),
}

pub(crate) fn bracket(states: &[StateStamp], tau: f64) -> Result<Bracket> {
    if states.is_empty() {
        return Err(Error::Invalid("no trajectory states".into()));
    }
    if !tau.is_finite() {
        return Err(Error::Invalid("query time is not finite".into()));
    }
    let (start, end) = (states[0].time, states[states.len() - 1].time);
    if tau < start - TIME_SNAP || tau > end + TIME_SNAP {
        return Err(Error::OutOfSpan { time: tau, start, end });
    }
    let k = states.partition_point(|s| s.time < tau);
    for j in [k.saturating_sub(1), k.min(states.len() - 1)] {
        if (states[j].time - tau).abs() <= TIME_SNAP {
            return Ok(Bracket::At(j));
        }
    }
    Ok(Bracket::Between(k - 1))
}

/// Posterior pose, velocity and covariance at `tau` within the solved span.
pub fn query_lie(sol: &LieSolution, qc: &DMatrix<f64>, tau: f64) -> Result<LieStateEstimate> {
    match bracket(&sol.states, tau)? {
        Bracket::At(k) => Ok(LieStateEstimate {
            time: sol.states[k].time,
            pose: sol.pose(k)?.clone(),
            vel: sol.velocity(k)?.clone(),
            cov: sol.state_cov(k)?,
            kind: QueryKind::Knot,
            bubbling: None,
        }),
        Bracket::Between(k) => {
            let (a, b) = (sol.states[k], sol.states[k + 1]);
            let it = interpolate_lie(
                qc,
                (sol.pose(k)?, sol.velocity(k)?, a.time),
                (sol.pose(k + 1)?, sol.velocity(k + 1)?, b.time),
                tau,
            )?;
            let cov = it.covariance(&sol.pair_cov(k)?)?;
            let border = sol.state_cov(k)?.trace().max(sol.state_cov(k + 1)?.trace());
            Ok(LieStateEstimate {
                time: tau,
                bubbling: Some(cov.trace() / border),
                pose: it.pose,
                vel: it.vel,
                cov,
                kind: QueryKind::Interpolated,
            })
        }
    }
}

/// Jacobian of `[eps; eta]` after a constant-twist step of `s` seconds with respect to
/// the perturbation before it.
pub fn extrapolation_jacobian(group: LieGroup, w: &Tangent, s: f64) -> DMatrix<f64> {
    let m = group.dim();
    let step = w * s;
    let mut f = DMatrix::identity(2 * m, 2 * m);
    f.view_mut((0, 0), (m, m)).copy_from(&exp(group, &step).inverse().adjoint());
    f.view_mut((0, m), (m, m)).copy_from(&(right_jacobian(group, &step) * s));
    f
}

/// State at `tau` outside the solved span, propagated from the nearest end state
/// along its constant twist. The covariance is the linearized propagation plus
/// the prior process noise accumulated over `|tau - t|`.
pub fn extrapolate_lie(
    qc: &DMatrix<f64>,
    from: (&LieElement, &DVector<f64>, f64),
    cov: &DMatrix<f64>,
    tau: f64,
) -> Result<LieStateEstimate> {
    let (pose, vel, t) = from;
    let group = pose.group();
    let m = group.dim();
    if vel.len() != m || cov.nrows() != 2 * m || cov.ncols() != 2 * m || qc.nrows() != m {
        return Err(Error::Dimension(format!(
            "{} extrapolation needs a {m}-vector velocity and {}x{} covariance",
            group.name(),
            2 * m,
            2 * m
        )));
    }
    let s = tau - t;
    let f = extrapolation_jacobian(group, vel, s);
    Ok(LieStateEstimate {
        time: tau,
        pose: geodesic(group, pose, vel, s),
        vel: vel.clone(),
        cov: symmetrized(&f * cov * f.transpose() + wnoa_q(qc, s.abs())),
        kind: QueryKind::Extrapolated,
        bubbling: None,
    })
}

/// `start Exp(s w)`.
pub fn geodesic(group: LieGroup, start: &LieElement, w: &Tangent, s: f64) -> LieElement {
    start.compose(&exp(group, &(w * s)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::Key;
    use crate::lie_ct::{gauss_newton, Factor, Linearization, Residual};
    use crate::lie_ct::{local_difference, NonlinearGraph, PosePriorFactor, SolverConfig, Value, Values};
    use proptest::prelude::*;
    use std::any::Any;

    fn tangent(g: LieGroup, raw: &[f64], s: f64) -> Tangent {
        DVector::from_iterator(g.dim(), raw.iter().take(g.dim()).map(|v| v * s))
    }

    /// Identity factor exposing the interpolated state as its error, for finite differences.
    #[derive(Debug)]
    struct InterpProbe {
        keys: [Key; 4],
        qc: DMatrix<f64>,
        t: (f64, f64, f64),
        base: (LieElement, DVector<f64>),
    }

    impl Factor for InterpProbe {
        fn keys(&self) -> &[Key] {
            &self.keys
        }
        fn evaluate(&self, v: &Values) -> Result<Residual> {
            let it = interpolate_lie(
                &self.qc,
                (v.pose(self.keys[0])?, v.vector(self.keys[1])?, self.t.0),
                (v.pose(self.keys[2])?, v.vector(self.keys[3])?, self.t.2),
                self.t.1,
            )?;
            let m = it.pose.group().dim();
            let mut e = DVector::zeros(2 * m);
            e.rows_mut(0, m).copy_from(&local_difference(&Value::Pose(self.base.0.clone()), &Value::Pose(it.pose))?);
            e.rows_mut(m, m).copy_from(&(it.vel - &self.base.1));
            Ok(Residual { error: e, cov: DMatrix::identity(2 * m, 2 * m) })
        }
        fn linearize(&self, _: &Values) -> Result<Linearization> {
            unreachable!()
        }
        fn as_any(&self) -> &dyn Any {
            self
        }
    }

    fn bracket_values(g: LieGroup, raw: &[f64]) -> (Values, StateStamp, StateStamp) {
        let a = StateStamp::indexed(0, 0.2);
        let b = StateStamp::indexed(1, 1.1);
        let mut v = Values::new();
        v.insert_pose(a.pose, exp(g, &tangent(g, raw, 1.0)));
        v.insert_vector(a.vel, tangent(g, &raw[6..], 1.0));
        v.insert_pose(b.pose, exp(g, &tangent(g, raw, 1.0)).compose(&exp(g, &tangent(g, &raw[12..], 1.0))));
        v.insert_vector(b.vel, tangent(g, &raw[18..], 1.0));
        (v, a, b)
    }

    proptest! {
        #[test]
        fn interpolation_jacobian_matches_finite_differences(
            raw in proptest::collection::vec(-1.0f64..1.0, 24),
            frac in 0.05f64..0.95,
        ) {
            for g in [LieGroup::Se2, LieGroup::Se3] {
                let (v, a, b) = bracket_values(g, &raw);
                let qc = DMatrix::identity(g.dim(), g.dim());
                let tau = a.time + frac * (b.time - a.time);
                let it = interpolate_lie(&qc, (v.pose(a.pose)?, v.vector(a.vel)?, a.time), (v.pose(b.pose)?, v.vector(b.vel)?, b.time), tau).unwrap();
                let probe = InterpProbe { keys: [a.pose, a.vel, b.pose, b.vel], qc: qc.clone(), t: (a.time, tau, b.time), base: (it.pose.clone(), it.vel.clone()) };
                let num = crate::lie_ct::numerical_jacobians(&probe, &v, 1e-6).unwrap();
                let m = g.dim();
                for (i, blk) in num.iter().enumerate() {
                    let ana = it.jacobian.columns(i * m, m);
                    prop_assert!((ana - blk).amax() < 1e-5, "block {} differs", i);
                }
                prop_assert!(crate::linalg::is_spd(&it.sigma));
            }
        }
    }

    #[test]
    fn extrapolation_jacobian_matches_finite_differences() {
        for g in [LieGroup::Se2, LieGroup::Se3] {
            let m = g.dim();
            let w = tangent(g, &[0.7, -0.2, 0.4, 0.3, -0.5, 0.9], 1.0);
            let t0 = exp(g, &tangent(g, &[0.3, 0.1, -0.6, 0.2, 0.4, -0.1], 1.0));
            for s in [0.4, -0.7] {
                let f = extrapolation_jacobian(g, &w, s);
                let base = geodesic(g, &t0, &w, s);
                let h = 1e-6;
                for i in 0..2 * m {
                    let mut d = DVector::zeros(2 * m);
                    d[i] = h;
                    let p = t0.perturb(&d.rows(0, m).into_owned());
                    let v = &w + d.rows(m, m);
                    let moved = geodesic(g, &p, &v, s);
                    let col = DVector::from_iterator(
                        2 * m,
                        base.local(&moved).unwrap().iter().copied().chain(d.rows(m, m).iter().copied()),
                    ) / h;
                    assert!((f.column(i) - col).amax() < 1e-5, "{g:?} s={s} col {i}");
                }
            }
            let e = extrapolate_lie(&DMatrix::identity(m, m), (&t0, &w, 1.0), &DMatrix::identity(2 * m, 2 * m), 1.5)
                .unwrap();
            assert_eq!(e.kind, QueryKind::Extrapolated);
            assert!(crate::linalg::is_spd(&e.cov));
        }
    }

    #[test]
    fn constant_twist_queries_lie_on_the_geodesic() {
        let g = LieGroup::Se3;
        let w = DVector::from_vec(vec![1.0, 0.2, -0.1, 0.3, -0.2, 0.6]);
        let times: Vec<f64> = (0..6).map(|i| i as f64 * 0.5).collect();
        let mut graph = NonlinearGraph::trajectory(g, DMatrix::identity(6, 6), &times).unwrap();
        let start = LieElement::se3(nalgebra::Vector3::new(1.0, 2.0, 0.5), nalgebra::Vector3::new(0.1, 0.0, 0.3));
        let mut init = Values::new();
        for s in graph.states.clone() {
            let p = geodesic(g, &start, &w, s.time);
            graph.add(PosePriorFactor::new(s.pose, p.clone(), DMatrix::identity(6, 6) * 1e-6).unwrap());
            init.insert_pose(s.pose, p.perturb(&DVector::from_element(6, 0.01)));
            init.insert_vector(s.vel, DVector::zeros(6));
        }
        let sol = gauss_newton(&graph, &init, &SolverConfig::default()).unwrap();
        assert!(sol.converged);
        let qc = DMatrix::identity(6, 6);
        for &tau in &[0.1, 0.77, 1.5, 2.33] {
            let est = query_lie(&sol, &qc, tau).unwrap();
            let truth = geodesic(g, &start, &w, tau);
            assert!(truth.local(&est.pose).unwrap().amax() < 1e-6);
            assert!((&est.vel - &w).amax() < 1e-6);
            assert!(crate::linalg::is_spd(&est.cov));
        }
        let knot = query_lie(&sol, &qc, 1.0 + 1e-12).unwrap();
        assert_eq!(knot.kind, QueryKind::Knot);
        assert_eq!(knot.cov, sol.state_cov(2).unwrap());
        assert!(matches!(query_lie(&sol, &qc, 2.6), Err(Error::OutOfSpan { .. })));
        assert!(matches!(query_lie(&sol, &qc, -0.1), Err(Error::OutOfSpan { .. })));
    }
}
