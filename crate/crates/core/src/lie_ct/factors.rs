use std::any::Any;

use nalgebra::{DMatrix, DVector, Vector2};

use super::{Factor, Linearization, Residual, StateStamp, Values};
use crate::error::{Error, Result};
use crate::gaussian::Key;
use crate::lie::{d_right_jacobian_inv_times, right_jacobian_inv, LieElement, LieGroup, Tangent};
use crate::linalg::{check_square, cholesky};
use crate::lti::wnoa_q;

/// Motion-prior error between two states and its Jacobians.
#[derive(Clone, Debug, PartialEq)]
pub struct WnoaError {
    pub error: DVector<f64>,
    /// With respect to `[eps_prev; eta_prev]`.
    pub j_prev: DMatrix<f64>,
    /// With respect to `[eps_next; eta_next]`.
    pub j_next: DMatrix<f64>,
    /// `Log(T_prev^-1 T_next)`.
    pub xi: Tangent,
}

/// `e = [xi - dt w_prev; J_r(xi)^-1 w_next - w_prev]`, `xi = Log(T_prev^-1 T_next)`.
pub fn wnoa_error(
    prev: (&LieElement, &DVector<f64>),
    next: (&LieElement, &DVector<f64>),
    dt: f64,
    jacobians: bool,
) -> Result<WnoaError> {
    let group = prev.0.group();
    let m = group.dim();
    let rel = prev.0.between(next.0);
    let xi = rel.log().map_err(|e| match e {
        Error::InjectivityRadius { angle, .. } => Error::InjectivityRadius { angle, interval: None },
        other => other,
    })?;
    let jinv = right_jacobian_inv(group, &xi);
    let mut error = DVector::zeros(2 * m);
    error.rows_mut(0, m).copy_from(&(&xi - prev.1 * dt));
    error.rows_mut(m, m).copy_from(&(&jinv * next.1 - prev.1));
    if !jacobians {
        return Ok(WnoaError { error, j_prev: DMatrix::zeros(0, 0), j_next: DMatrix::zeros(0, 0), xi });
    }
    let d = d_right_jacobian_inv_times(group, &xi, next.1);
    let dxi_prev = -(&jinv * rel.inverse().adjoint());
    let ident = DMatrix::<f64>::identity(m, m);
    let mut j_prev = DMatrix::zeros(2 * m, 2 * m);
    j_prev.view_mut((0, 0), (m, m)).copy_from(&dxi_prev);
    j_prev.view_mut((0, m), (m, m)).copy_from(&(-&ident * dt));
    j_prev.view_mut((m, 0), (m, m)).copy_from(&(&d * &dxi_prev));
    j_prev.view_mut((m, m), (m, m)).copy_from(&(-&ident));
    let mut j_next = DMatrix::zeros(2 * m, 2 * m);
    j_next.view_mut((0, 0), (m, m)).copy_from(&jinv);
    j_next.view_mut((m, 0), (m, m)).copy_from(&(&d * &jinv));
    j_next.view_mut((m, m), (m, m)).copy_from(&jinv);
    Ok(WnoaError { error, j_prev, j_next, xi })
}

/// Motion prior between two consecutive states.
#[derive(Clone, Debug, PartialEq)]
pub struct WnoaFactor {
    pub prev: StateStamp,
    pub next: StateStamp,
    pub group: LieGroup,
    pub q: DMatrix<f64>,
    keys: [Key; 4],
}

impl WnoaFactor {
    pub fn new(group: LieGroup, qc: &DMatrix<f64>, prev: StateStamp, next: StateStamp) -> Result<Self> {
        let dt = next.time - prev.time;
        if !(dt > 0.0) {
            return Err(Error::NonIncreasingTime { index: 1 });
        }
        check_square(qc, group.dim(), "Qc")?;
        cholesky(qc, "Qc")?;
        Ok(WnoaFactor { prev, next, group, q: wnoa_q(qc, dt), keys: [prev.pose, prev.vel, next.pose, next.vel] })
    }

    pub fn dt(&self) -> f64 {
        self.next.time - self.prev.time
    }

    fn compute(&self, values: &Values, jacobians: bool) -> Result<WnoaError> {
        let p1 = values.pose(self.prev.pose)?;
        let w1 = values.vector(self.prev.vel)?;
        let p2 = values.pose(self.next.pose)?;
        let w2 = values.vector(self.next.vel)?;
        wnoa_error((p1, w1), (p2, w2), self.dt(), jacobians).map_err(|e| match e {
            Error::InjectivityRadius { angle, .. } => {
                Error::InjectivityRadius { angle, interval: Some((self.prev.time, self.next.time)) }
            }
            other => other,
        })
    }
}

impl Factor for WnoaFactor {
    fn keys(&self) -> &[Key] {
        &self.keys
    }

    fn evaluate(&self, values: &Values) -> Result<Residual> {
        Ok(Residual { error: self.compute(values, false)?.error, cov: self.q.clone() })
    }

    fn linearize(&self, values: &Values) -> Result<Linearization> {
        let w = self.compute(values, true)?;
        let m = self.group.dim();
        let n = 2 * m;
        Ok(Linearization {
            residual: Residual { error: w.error, cov: self.q.clone() },
            jacobians: vec![
                w.j_prev.view((0, 0), (n, m)).into_owned(),
                w.j_prev.view((0, m), (n, m)).into_owned(),
                w.j_next.view((0, 0), (n, m)).into_owned(),
                w.j_next.view((0, m), (n, m)).into_owned(),
            ],
        })
    }

    fn motion(&self) -> Option<&WnoaFactor> {
        Some(self)
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

/// Pose measurement: `e = Log(Z^-1 T)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PosePriorFactor {
    pub measured: LieElement,
    pub cov: DMatrix<f64>,
    keys: [Key; 1],
}

impl PosePriorFactor {
    pub fn new(key: Key, measured: LieElement, cov: DMatrix<f64>) -> Result<Self> {
        check_square(&cov, measured.group().dim(), "pose covariance")?;
        cholesky(&cov, "pose covariance")?;
        Ok(PosePriorFactor { measured, cov, keys: [key] })
    }

    pub fn key(&self) -> Key {
        self.keys[0]
    }
}

impl Factor for PosePriorFactor {
    fn keys(&self) -> &[Key] {
        &self.keys
    }

    fn evaluate(&self, values: &Values) -> Result<Residual> {
        let e = self.measured.local(values.pose(self.keys[0])?)?;
        Ok(Residual { error: e, cov: self.cov.clone() })
    }

    fn linearize(&self, values: &Values) -> Result<Linearization> {
        let r = self.evaluate(values)?;
        let j = right_jacobian_inv(self.measured.group(), &r.error);
        Ok(Linearization { residual: r, jacobians: vec![j] })
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

/// Relative pose measurement: `e = Log(Z^-1 T_a^-1 T_b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BetweenFactor {
    pub measured: LieElement,
    pub cov: DMatrix<f64>,
    keys: [Key; 2],
}

impl BetweenFactor {
    pub fn new(a: Key, b: Key, measured: LieElement, cov: DMatrix<f64>) -> Result<Self> {
        check_square(&cov, measured.group().dim(), "relative pose covariance")?;
        cholesky(&cov, "relative pose covariance")?;
        Ok(BetweenFactor { measured, cov, keys: [a, b] })
    }
}

impl Factor for BetweenFactor {
    fn keys(&self) -> &[Key] {
        &self.keys
    }

    fn evaluate(&self, values: &Values) -> Result<Residual> {
        let rel = values.pose(self.keys[0])?.between(values.pose(self.keys[1])?);
        Ok(Residual { error: self.measured.local(&rel)?, cov: self.cov.clone() })
    }

    fn linearize(&self, values: &Values) -> Result<Linearization> {
        let ta = values.pose(self.keys[0])?;
        let tb = values.pose(self.keys[1])?;
        let r = self.evaluate(values)?;
        let jinv = right_jacobian_inv(self.measured.group(), &r.error);
        let ja = -(&jinv * tb.between(ta).adjoint());
        Ok(Linearization { residual: r, jacobians: vec![ja, jinv] })
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

/// Linear observation of a vector variable: `e = C x - y`.
///
/// Used for velocity constraints (e.g. zero lateral velocity) and landmark priors.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearVectorFactor {
    pub c: DMatrix<f64>,
    pub y: DVector<f64>,
    pub cov: DMatrix<f64>,
    keys: [Key; 1],
}

impl LinearVectorFactor {
    pub fn new(key: Key, c: DMatrix<f64>, y: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if c.nrows() != y.len() {
            return Err(Error::Dimension("observation matrix rows must match the measurement".into()));
        }
        check_square(&cov, y.len(), "observation covariance")?;
        cholesky(&cov, "observation covariance")?;
        Ok(LinearVectorFactor { c, y, cov, keys: [key] })
    }

    pub fn key(&self) -> Key {
        self.keys[0]
    }
}

impl Factor for LinearVectorFactor {
    fn keys(&self) -> &[Key] {
        &self.keys
    }

    fn evaluate(&self, values: &Values) -> Result<Residual> {
        let x = values.vector(self.keys[0])?;
        if x.len() != self.c.ncols() {
            return Err(Error::Dimension(format!("value for {} has length {}", self.keys[0], x.len())));
        }
        Ok(Residual { error: &self.c * x - &self.y, cov: self.cov.clone() })
    }

    fn linearize(&self, values: &Values) -> Result<Linearization> {
        Ok(Linearization { residual: self.evaluate(values)?, jacobians: vec![self.c.clone()] })
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Landmark {
    Known(Vector2<f64>),
    Variable(Key),
}

/// Planar bearing and range to a landmark, observed from an SE(2) pose.
#[derive(Clone, Debug, PartialEq)]
pub struct BearingRangeFactor {
    pub landmark: Landmark,
    pub bearing: f64,
    pub range: f64,
    pub cov: DMatrix<f64>,
    keys: Vec<Key>,
}

fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    a - two_pi * ((a + std::f64::consts::PI) / two_pi).floor()
}

impl BearingRangeFactor {
    pub fn new(pose: Key, landmark: Landmark, bearing: f64, range: f64, cov: DMatrix<f64>) -> Result<Self> {
        check_square(&cov, 2, "bearing-range covariance")?;
        cholesky(&cov, "bearing-range covariance")?;
        let mut keys = vec![pose];
        if let Landmark::Variable(k) = landmark {
            keys.push(k);
        }
        Ok(BearingRangeFactor { landmark, bearing, range, cov, keys })
    }

    /// Landmark position in the body frame.
    fn body_point(&self, values: &Values) -> Result<(LieElement, Vector2<f64>, Vector2<f64>)> {
        let pose = values.pose(self.keys[0])?.clone();
        if pose.group() != LieGroup::Se2 {
            return Err(Error::Invalid("bearing-range factors need planar poses".into()));
        }
        let l = match &self.landmark {
            Landmark::Known(p) => *p,
            Landmark::Variable(k) => {
                let v = values.vector(*k)?;
                if v.len() != 2 {
                    return Err(Error::Dimension(format!("landmark {k} must be 2-dimensional")));
                }
                Vector2::new(v[0], v[1])
            }
        };
        let r = pose.rotation();
        let t = pose.translation();
        let d = Vector2::new(l.x - t[0], l.y - t[1]);
        let pb = Vector2::new(r[(0, 0)] * d.x + r[(1, 0)] * d.y, r[(0, 1)] * d.x + r[(1, 1)] * d.y);
        Ok((pose, l, pb))
    }

    /// Predicted `(bearing, range)`.
    pub fn predict(&self, values: &Values) -> Result<(f64, f64)> {
        let (_, _, p) = self.body_point(values)?;
        Ok((p.y.atan2(p.x), p.norm()))
    }
}

impl Factor for BearingRangeFactor {
    fn keys(&self) -> &[Key] {
        &self.keys
    }

    fn evaluate(&self, values: &Values) -> Result<Residual> {
        let (b, r) = self.predict(values)?;
        if r <= 1e-12 {
            return Err(Error::Numerical("landmark coincides with the sensor position".into()));
        }
        let e = DVector::from_vec(vec![wrap_angle(b - self.bearing), r - self.range]);
        Ok(Residual { error: e, cov: self.cov.clone() })
    }

    fn linearize(&self, values: &Values) -> Result<Linearization> {
        let residual = self.evaluate(values)?;
        let (pose, _, p) = self.body_point(values)?;
        let r2 = p.norm_squared();
        let r = r2.sqrt();
        // d(bearing, range)/d(body point)
        let dh = DMatrix::from_row_slice(2, 2, &[-p.y / r2, p.x / r2, p.x / r, p.y / r]);
        // body point under T Exp([rho; theta]): p - rho - theta [-p.y; p.x]
        let dp_pose = DMatrix::from_row_slice(2, 3, &[-1.0, 0.0, p.y, 0.0, -1.0, -p.x]);
        let mut jacobians = vec![&dh * dp_pose];
        if let Landmark::Variable(_) = self.landmark {
            jacobians.push(&dh * pose.rotation().transpose());
        }
        Ok(Linearization { residual, jacobians })
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lie::exp;
    use crate::lie_ct::numerical_jacobians;
    use proptest::prelude::*;

    fn tangent(g: LieGroup, raw: &[f64], scale: f64) -> Tangent {
        DVector::from_iterator(g.dim(), raw.iter().map(|v| v * scale).take(g.dim()))
    }

    fn check(f: &dyn Factor, values: &Values) -> f64 {
        let a = f.linearize(values).unwrap();
        let n = numerical_jacobians(f, values, 1e-6).unwrap();
        a.jacobians.iter().zip(&n).map(|(x, y)| (x - y).amax()).fold(0.0, f64::max)
    }

    fn two_states(g: LieGroup, raw: &[f64]) -> (Values, StateStamp, StateStamp) {
        let a = StateStamp::indexed(0, 0.0);
        let b = StateStamp::indexed(1, 0.7);
        let mut v = Values::new();
        v.insert_pose(a.pose, exp(g, &tangent(g, raw, 1.0)));
        v.insert_vector(a.vel, tangent(g, &raw[3..], 0.8));
        v.insert_pose(b.pose, exp(g, &tangent(g, &raw[6..], 1.0)));
        v.insert_vector(b.vel, tangent(g, &raw[9..], 0.8));
        (v, a, b)
    }

    #[test]
    fn constant_twist_has_zero_error() {
        for g in [LieGroup::Se2, LieGroup::Se3] {
            let w = DVector::from_iterator(g.dim(), (0..g.dim()).map(|i| 0.3 + 0.1 * i as f64));
            let t0 = exp(g, &DVector::from_element(g.dim(), 0.2));
            let t1 = t0.compose(&exp(g, &(&w * 1.5)));
            let e = wnoa_error((&t0, &w), (&t1, &w), 1.5, false).unwrap();
            assert!(e.error.amax() < 1e-12);
        }
    }

    #[test]
    fn half_turn_between_states_is_refused() {
        let a = StateStamp::indexed(0, 0.0);
        let b = StateStamp::indexed(1, 1.0);
        let f = WnoaFactor::new(LieGroup::Se2, &DMatrix::identity(3, 3), a, b).unwrap();
        let mut v = Values::new();
        v.insert_pose(a.pose, LieElement::identity(LieGroup::Se2));
        v.insert_pose(b.pose, LieElement::se2(0.0, 0.0, std::f64::consts::PI));
        v.insert_vector(a.vel, DVector::zeros(3));
        v.insert_vector(b.vel, DVector::zeros(3));
        match f.evaluate(&v) {
            Err(Error::InjectivityRadius { interval: Some((s, e)), .. }) => assert_eq!((s, e), (0.0, 1.0)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bearing_range_geometry() {
        let mut v = Values::new();
        let k = Key::symbol('x', 0);
        v.insert_pose(k, LieElement::se2(1.0, 0.0, std::f64::consts::FRAC_PI_2));
        let f = BearingRangeFactor::new(k, Landmark::Known(Vector2::new(1.0, 2.0)), 0.0, 2.0, DMatrix::identity(2, 2))
            .unwrap();
        let (b, r) = f.predict(&v).unwrap();
        assert!(b.abs() < 1e-15 && (r - 2.0).abs() < 1e-15);
    }

    #[test]
    fn landmark_on_sensor_is_numerical_failure() {
        let mut v = Values::new();
        let k = Key::symbol('x', 0);
        v.insert_pose(k, LieElement::se2(1.0, 2.0, 0.0));
        let f = BearingRangeFactor::new(k, Landmark::Known(Vector2::new(1.0, 2.0)), 0.0, 2.0, DMatrix::identity(2, 2))
            .unwrap();
        assert!(f.evaluate(&v).unwrap_err().is_numerical());
    }

    proptest! {
        #[test]
        fn factor_jacobians_match_finite_differences(raw in proptest::collection::vec(-1.0f64..1.0, 16)) {
            for g in [LieGroup::Se2, LieGroup::Se3] {
                let (v, a, b) = two_states(g, &raw);
                let qc = DMatrix::identity(g.dim(), g.dim());
                prop_assert!(check(&WnoaFactor::new(g, &qc, a, b).unwrap(), &v) < 1e-5);
                let z = exp(g, &tangent(g, &raw[4..], 0.5));
                prop_assert!(check(&PosePriorFactor::new(a.pose, z.clone(), qc.clone()).unwrap(), &v) < 1e-5);
                prop_assert!(check(&BetweenFactor::new(a.pose, b.pose, z, qc.clone()).unwrap(), &v) < 1e-5);
                let c = DMatrix::from_fn(2, g.dim(), |i, j| if i + 1 == j { 1.0 } else { 0.0 });
                let lf = LinearVectorFactor::new(a.vel, c, DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
                prop_assert!(check(&lf, &v) < 1e-5);
            }
            let (mut v, a, _) = two_states(LieGroup::Se2, &raw);
            let l = Key::symbol('l', 0);
            v.insert_vector(l, DVector::from_vec(vec![3.0 + raw[12], -2.0 + raw[13]]));
            let br = BearingRangeFactor::new(a.pose, Landmark::Variable(l), 0.3, 4.0, DMatrix::identity(2, 2)).unwrap();
            prop_assert!(check(&br, &v) < 1e-5);
            let known = BearingRangeFactor::new(a.pose, Landmark::Known(Vector2::new(-2.0, 5.0)), 0.3, 4.0, DMatrix::identity(2, 2)).unwrap();
            prop_assert!(check(&known, &v) < 1e-5);
        }
    }
}
