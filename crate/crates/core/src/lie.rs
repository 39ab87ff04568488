//! SE(2) and SE(3) rigid-body transforms.
//!
//! Tangent vectors put translation first and rotation last: `[x, y, theta]` for
//! SE(2) and `[rho_x, rho_y, rho_z, phi_x, phi_y, phi_z]` for SE(3). Perturbations
//! act on the right, `T = T_op * Exp(eps)`, so Jacobians are right Jacobians.
//!
//! Exponential, logarithm and Jacobians use closed forms with series branches for
//! small rotation angles. Derivatives of `J_r(xi) w` and `J_r^-1(xi) w` with
//! respect to `xi` come from the power series in `ad(xi)`, which converges for
//! every rotation angle below `2 pi`.

use std::f64::consts::PI;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, Matrix4, Vector2, Vector3};

use crate::error::{Error, Result};

/// Below this rotation angle exp/log switch to a Taylor expansion.
pub const SMALL_ANGLE: f64 = 1e-6;
/// The logarithm is refused for rotation angles at or above `PI - LOG_MARGIN`.
pub const LOG_MARGIN: f64 = 1e-9;
/// Below this angle Jacobian coefficients with cancellation use series.
const SERIES_ANGLE: f64 = 0.05;

pub type Tangent = DVector<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LieGroup {
    Se2,
    Se3,
}

impl LieGroup {
    /// Tangent-space dimension.
    pub fn dim(self) -> usize {
        match self {
            LieGroup::Se2 => 3,
            LieGroup::Se3 => 6,
        }
    }

    /// Spatial dimension (2 or 3).
    pub fn space_dim(self) -> usize {
        match self {
            LieGroup::Se2 => 2,
            LieGroup::Se3 => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LieGroup::Se2 => "se2",
            LieGroup::Se3 => "se3",
        }
    }

    fn check(self, xi: &Tangent) {
        assert_eq!(xi.len(), self.dim(), "tangent vector of length {} for {}", xi.len(), self.name());
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LieElement {
    Se2(Matrix3<f64>),
    Se3(Matrix4<f64>),
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn rot2(theta: f64) -> Matrix2<f64> {
    let (s, c) = theta.sin_cos();
    Matrix2::new(c, -s, s, c)
}

/// `(1 - cos t) / t^2` without cancellation.
fn one_minus_cos_over_sq(t: f64) -> f64 {
    if t < SMALL_ANGLE {
        0.5 - t * t / 24.0
    } else {
        let h = (0.5 * t).sin();
        2.0 * h * h / (t * t)
    }
}

/// `sin t / t`.
fn sinc(t: f64) -> f64 {
    if t < SMALL_ANGLE {
        1.0 - t * t / 6.0
    } else {
        t.sin() / t
    }
}

/// `(t - sin t) / t^3`.
fn t_minus_sin_over_cube(t: f64) -> f64 {
    if t < SERIES_ANGLE {
        let t2 = t * t;
        1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
    } else {
        (t - t.sin()) / (t * t * t)
    }
}

/// `1/t^2 - (1 + cos t) / (2 t sin t)`.
fn inv_jacobian_coeff(t: f64) -> f64 {
    if t < SERIES_ANGLE {
        let t2 = t * t;
        1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    } else {
        1.0 / (t * t) - (1.0 + t.cos()) / (2.0 * t * t.sin())
    }
}

fn so3_exp(phi: &Vector3<f64>) -> Matrix3<f64> {
    let t = phi.norm();
    let k = skew(phi);
    Matrix3::identity() + k * sinc(t) + k * k * one_minus_cos_over_sq(t)
}

fn so3_log(r: &Matrix3<f64>) -> Result<Vector3<f64>> {
    let c = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let s = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]) * 0.5;
    let sn = s.norm();
    let t = sn.atan2(c);
    if t >= PI - LOG_MARGIN {
        return Err(Error::InjectivityRadius { angle: t, interval: None });
    }
    if t < SMALL_ANGLE {
        Ok(s * (1.0 + t * t / 6.0))
    } else {
        Ok(s * (t / sn))
    }
}

/// Left Jacobian of SO(3).
fn so3_jl(phi: &Vector3<f64>) -> Matrix3<f64> {
    let t = phi.norm();
    let k = skew(phi);
    Matrix3::identity() + k * one_minus_cos_over_sq(t) + k * k * t_minus_sin_over_cube(t)
}

fn so3_jl_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let t = phi.norm();
    let k = skew(phi);
    Matrix3::identity() - k * 0.5 + k * k * inv_jacobian_coeff(t)
}

/// Off-diagonal block of the SE(3) left Jacobian for `[rho; phi]`.
fn se3_q(rho: &Vector3<f64>, phi: &Vector3<f64>) -> Matrix3<f64> {
    let t = phi.norm();
    let (a1, a2, a3) = if t < SERIES_ANGLE {
        let t2 = t * t;
        (
            1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0,
            1.0 / 24.0 - t2 / 720.0 + t2 * t2 / 40320.0,
            1.0 / 120.0 - t2 / 2520.0 + t2 * t2 / 120960.0,
        )
    } else {
        let (s, c) = t.sin_cos();
        let t2 = t * t;
        ((t - s) / (t2 * t), (t2 + 2.0 * c - 2.0) / (2.0 * t2 * t2), (2.0 * t - 3.0 * s + t * c) / (2.0 * t2 * t2 * t))
    };
    let p = skew(phi);
    let r = skew(rho);
    let pr = p * r;
    let rp = r * p;
    let prp = p * r * p;
    r * 0.5 + (pr + rp + prp) * a1 + (p * pr + rp * p - prp * 3.0) * a2 + (prp * p + p * prp) * a3
}

fn split3(xi: &Tangent) -> (Vector3<f64>, Vector3<f64>) {
    (Vector3::new(xi[0], xi[1], xi[2]), Vector3::new(xi[3], xi[4], xi[5]))
}

/// `Exp(xi)`.
pub fn exp(group: LieGroup, xi: &Tangent) -> LieElement {
    group.check(xi);
    match group {
        LieGroup::Se2 => {
            let t = xi[2];
            let a = sinc(t.abs());
            let b = one_minus_cos_over_sq(t.abs()) * t;
            let v = Matrix2::new(a, -b, b, a);
            let tr = v * Vector2::new(xi[0], xi[1]);
            let r = rot2(t);
            LieElement::Se2(Matrix3::new(r[(0, 0)], r[(0, 1)], tr.x, r[(1, 0)], r[(1, 1)], tr.y, 0.0, 0.0, 1.0))
        }
        LieGroup::Se3 => {
            let (rho, phi) = split3(xi);
            let mut m = Matrix4::identity();
            m.fixed_view_mut::<3, 3>(0, 0).copy_from(&so3_exp(&phi));
            m.fixed_view_mut::<3, 1>(0, 3).copy_from(&(so3_jl(&phi) * rho));
            LieElement::Se3(m)
        }
    }
}

/// Small adjoint `ad(xi)`, so that `ad(a) b` is the Lie bracket.
pub fn ad(group: LieGroup, xi: &Tangent) -> DMatrix<f64> {
    group.check(xi);
    match group {
        LieGroup::Se2 => DMatrix::from_row_slice(3, 3, &[0.0, -xi[2], xi[1], xi[2], 0.0, -xi[0], 0.0, 0.0, 0.0]),
        LieGroup::Se3 => {
            let (rho, phi) = split3(xi);
            let mut m = DMatrix::zeros(6, 6);
            let p = skew(&phi);
            m.view_mut((0, 0), (3, 3)).copy_from(&p);
            m.view_mut((3, 3), (3, 3)).copy_from(&p);
            m.view_mut((0, 3), (3, 3)).copy_from(&skew(&rho));
            m
        }
    }
}

/// Right Jacobian: `Exp(xi + d) ~ Exp(xi) Exp(J_r(xi) d)`.
pub fn right_jacobian(group: LieGroup, xi: &Tangent) -> DMatrix<f64> {
    group.check(xi);
    match group {
        LieGroup::Se2 => {
            let (a, b, g1, g2) = se2_coeffs(xi[2]);
            let (r1, r2) = (xi[0], xi[1]);
            DMatrix::from_row_slice(3, 3, &[a, b, r1 * g1 - r2 * g2, -b, a, r1 * g2 + r2 * g1, 0.0, 0.0, 1.0])
        }
        LieGroup::Se3 => {
            let (rho, phi) = split3(xi);
            let j = so3_jl(&(-phi));
            let mut m = DMatrix::zeros(6, 6);
            m.view_mut((0, 0), (3, 3)).copy_from(&j);
            m.view_mut((3, 3), (3, 3)).copy_from(&j);
            m.view_mut((0, 3), (3, 3)).copy_from(&se3_q(&(-rho), &(-phi)));
            m
        }
    }
}

/// Inverse of [`right_jacobian`], in closed form.
pub fn right_jacobian_inv(group: LieGroup, xi: &Tangent) -> DMatrix<f64> {
    group.check(xi);
    match group {
        LieGroup::Se2 => {
            let (a, b, g1, g2) = se2_coeffs(xi[2]);
            let (r1, r2) = (xi[0], xi[1]);
            let det = a * a + b * b;
            let ai = Matrix2::new(a, -b, b, a) / det;
            let col = Vector2::new(r1 * g1 - r2 * g2, r1 * g2 + r2 * g1);
            let c = -(ai * col);
            DMatrix::from_row_slice(3, 3, &[ai[(0, 0)], ai[(0, 1)], c.x, ai[(1, 0)], ai[(1, 1)], c.y, 0.0, 0.0, 1.0])
        }
        LieGroup::Se3 => {
            let (rho, phi) = split3(xi);
            let ji = so3_jl_inv(&(-phi));
            let q = se3_q(&(-rho), &(-phi));
            let mut m = DMatrix::zeros(6, 6);
            m.view_mut((0, 0), (3, 3)).copy_from(&ji);
            m.view_mut((3, 3), (3, 3)).copy_from(&ji);
            m.view_mut((0, 3), (3, 3)).copy_from(&(-(ji * q * ji)));
            m
        }
    }
}

pub fn left_jacobian(group: LieGroup, xi: &Tangent) -> DMatrix<f64> {
    right_jacobian(group, &(-xi))
}

/// `(sin t / t, (1 - cos t) / t, (t - sin t) / t^2, (1 - cos t) / t^2)`.
fn se2_coeffs(t: f64) -> (f64, f64, f64, f64) {
    let at = t.abs();
    let a = sinc(at);
    let g2 = one_minus_cos_over_sq(at);
    let b = g2 * t;
    let g1 = t_minus_sin_over_cube(at) * t;
    (a, b, g1, g2)
}

struct SeriesCoeffs {
    /// Coefficients of `J_r(xi) = sum a_n ad(xi)^n`.
    jr: Vec<f64>,
    /// Coefficients of `J_r(xi)^-1 = sum b_n ad(xi)^n`.
    jr_inv: Vec<f64>,
}

const MAX_TERMS: usize = 90;

fn series_coeffs() -> &'static SeriesCoeffs {
    static C: OnceLock<SeriesCoeffs> = OnceLock::new();
    C.get_or_init(|| {
        let mut jr = Vec::with_capacity(MAX_TERMS);
        let mut fact = 1.0;
        for n in 0..MAX_TERMS {
            fact *= (n + 1) as f64;
            jr.push(if n % 2 == 0 { 1.0 } else { -1.0 } / fact);
        }
        // B_{2k}/(2k)! = (-1)^{k+1} 2 zeta(2k) / (2 pi)^{2k}
        let mut jr_inv = vec![0.0; MAX_TERMS];
        jr_inv[0] = 1.0;
        jr_inv[1] = 0.5;
        for n in (2..MAX_TERMS).step_by(2) {
            let k = n / 2;
            let zeta = if k == 1 {
                PI * PI / 6.0
            } else {
                let mut z = 0.0;
                for j in (1..=2000).rev() {
                    z += (j as f64).powi(-(n as i32));
                }
                z
            };
            let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
            jr_inv[n] = sign * 2.0 * zeta / (2.0 * PI).powi(n as i32);
        }
        SeriesCoeffs { jr, jr_inv }
    })
}

fn rotation_angle(group: LieGroup, xi: &Tangent) -> f64 {
    match group {
        LieGroup::Se2 => xi[2].abs(),
        LieGroup::Se3 => (xi[3] * xi[3] + xi[4] * xi[4] + xi[5] * xi[5]).sqrt(),
    }
}

fn series_terms(theta: f64, decay: f64) -> usize {
    // smallest n with n^2 (theta/decay)^n below roundoff
    let r = (theta.max(1e-3)) / decay;
    let mut n = 4;
    while n < MAX_TERMS && (n * n) as f64 * r.powi(n as i32) > 1e-18 {
        n += 1;
    }
    n
}

/// `d/dxi [S(xi) w]` for `S(xi) = sum c_n ad(xi)^n`.
fn d_series_times(group: LieGroup, xi: &Tangent, w: &Tangent, c: &[f64], terms: usize) -> DMatrix<f64> {
    let a = ad(group, xi);
    let d = group.dim();
    let mut u = Vec::with_capacity(terms);
    u.push(w.clone());
    for i in 1..terms {
        let next = &a * &u[i - 1];
        u.push(next);
    }
    // Horner over j: M = -(ad_{v0} + ad (ad_{v1} + ad (...))), v_j = sum_i c_{i+j+1} u_i
    let mut acc = DMatrix::zeros(d, d);
    for j in (0..terms - 1).rev() {
        let mut v = DVector::zeros(d);
        for (i, ui) in u.iter().enumerate().take(terms - 1 - j) {
            let ci = c[i + j + 1];
            if ci != 0.0 {
                v += ui * ci;
            }
        }
        acc = ad(group, &v) + &a * acc;
    }
    -acc
}

/// Jacobian of `J_r(xi)^-1 w` with respect to `xi`.
pub fn d_right_jacobian_inv_times(group: LieGroup, xi: &Tangent, w: &Tangent) -> DMatrix<f64> {
    group.check(xi);
    let terms = series_terms(rotation_angle(group, xi), 2.0 * PI);
    d_series_times(group, xi, w, &series_coeffs().jr_inv, terms)
}

/// Jacobian of `J_r(xi) w` with respect to `xi`.
pub fn d_right_jacobian_times(group: LieGroup, xi: &Tangent, w: &Tangent) -> DMatrix<f64> {
    group.check(xi);
    let theta = rotation_angle(group, xi).max(1e-3);
    let c = &series_coeffs().jr;
    let mut terms = 4;
    while terms < MAX_TERMS && (terms * terms) as f64 * theta.powi(terms as i32) * c[terms].abs() > 1e-18 {
        terms += 1;
    }
    d_series_times(group, xi, w, c, terms)
}

/// `sum_n c_n ad(xi)^n` truncated; used as a reference in tests.
pub fn jacobian_series(group: LieGroup, xi: &Tangent, inverse: bool) -> DMatrix<f64> {
    let c = if inverse { &series_coeffs().jr_inv } else { &series_coeffs().jr };
    let a = ad(group, xi);
    let d = group.dim();
    let mut out = DMatrix::zeros(d, d);
    let mut p = DMatrix::identity(d, d);
    for &cn in c.iter().take(MAX_TERMS) {
        out += &p * cn;
        p = &p * &a;
    }
    out
}

impl LieElement {
    pub fn identity(group: LieGroup) -> LieElement {
        match group {
            LieGroup::Se2 => LieElement::Se2(Matrix3::identity()),
            LieGroup::Se3 => LieElement::Se3(Matrix4::identity()),
        }
    }

    /// SE(2) element from position and heading.
    pub fn se2(x: f64, y: f64, theta: f64) -> LieElement {
        let r = rot2(theta);
        LieElement::Se2(Matrix3::new(r[(0, 0)], r[(0, 1)], x, r[(1, 0)], r[(1, 1)], y, 0.0, 0.0, 1.0))
    }

    /// SE(3) element from a translation and a rotation vector.
    pub fn se3(translation: Vector3<f64>, rotvec: Vector3<f64>) -> LieElement {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&so3_exp(&rotvec));
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&translation);
        LieElement::Se3(m)
    }

    pub fn group(&self) -> LieGroup {
        match self {
            LieElement::Se2(_) => LieGroup::Se2,
            LieElement::Se3(_) => LieGroup::Se3,
        }
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        match self {
            LieElement::Se2(m) => DMatrix::from_iterator(3, 3, m.iter().copied()),
            LieElement::Se3(m) => DMatrix::from_iterator(4, 4, m.iter().copied()),
        }
    }

    pub fn translation(&self) -> DVector<f64> {
        match self {
            LieElement::Se2(m) => DVector::from_vec(vec![m[(0, 2)], m[(1, 2)]]),
            LieElement::Se3(m) => DVector::from_vec(vec![m[(0, 3)], m[(1, 3)], m[(2, 3)]]),
        }
    }

    pub fn rotation(&self) -> DMatrix<f64> {
        match self {
            LieElement::Se2(m) => DMatrix::from_iterator(2, 2, m.fixed_view::<2, 2>(0, 0).iter().copied()),
            LieElement::Se3(m) => DMatrix::from_iterator(3, 3, m.fixed_view::<3, 3>(0, 0).iter().copied()),
        }
    }

    /// Heading for SE(2), rotation vector for SE(3).
    pub fn rotation_vector(&self) -> Result<DVector<f64>> {
        match self {
            LieElement::Se2(m) => Ok(DVector::from_element(1, m[(1, 0)].atan2(m[(0, 0)]))),
            LieElement::Se3(m) => {
                let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
                Ok(DVector::from_iterator(3, so3_log(&r)?.iter().copied()))
            }
        }
    }

    /// Rotation angle of the element.
    pub fn angle(&self) -> f64 {
        match self {
            LieElement::Se2(m) => m[(1, 0)].atan2(m[(0, 0)]).abs(),
            LieElement::Se3(m) => {
                let c = ((m[(0, 0)] + m[(1, 1)] + m[(2, 2)] - 1.0) * 0.5).clamp(-1.0, 1.0);
                let s = Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]).norm() * 0.5;
                s.atan2(c)
            }
        }
    }

    pub fn compose(&self, other: &LieElement) -> LieElement {
        match (self, other) {
            (LieElement::Se2(a), LieElement::Se2(b)) => LieElement::Se2(a * b),
            (LieElement::Se3(a), LieElement::Se3(b)) => LieElement::Se3(a * b),
            _ => panic!("cannot compose elements of different groups"),
        }
    }

    pub fn inverse(&self) -> LieElement {
        match self {
            LieElement::Se2(m) => {
                let r = m.fixed_view::<2, 2>(0, 0).transpose();
                let t = -(r * m.fixed_view::<2, 1>(0, 2));
                LieElement::Se2(Matrix3::new(r[(0, 0)], r[(0, 1)], t.x, r[(1, 0)], r[(1, 1)], t.y, 0.0, 0.0, 1.0))
            }
            LieElement::Se3(m) => {
                let r = m.fixed_view::<3, 3>(0, 0).transpose();
                let t = -(r * m.fixed_view::<3, 1>(0, 3));
                let mut out = Matrix4::identity();
                out.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
                out.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
                LieElement::Se3(out)
            }
        }
    }

    /// `self^-1 * other`.
    pub fn between(&self, other: &LieElement) -> LieElement {
        self.inverse().compose(other)
    }

    pub fn log(&self) -> Result<Tangent> {
        match self {
            LieElement::Se2(m) => {
                let t = m[(1, 0)].atan2(m[(0, 0)]);
                if t.abs() >= PI - LOG_MARGIN {
                    return Err(Error::InjectivityRadius { angle: t.abs(), interval: None });
                }
                let a = sinc(t.abs());
                let b = one_minus_cos_over_sq(t.abs()) * t;
                let det = a * a + b * b;
                let (x, y) = (m[(0, 2)], m[(1, 2)]);
                Ok(DVector::from_vec(vec![(a * x + b * y) / det, (-b * x + a * y) / det, t]))
            }
            LieElement::Se3(m) => {
                let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
                let phi = so3_log(&r)?;
                let rho = so3_jl_inv(&phi) * m.fixed_view::<3, 1>(0, 3);
                Ok(DVector::from_vec(vec![rho.x, rho.y, rho.z, phi.x, phi.y, phi.z]))
            }
        }
    }

    /// Adjoint: `T Exp(xi) T^-1 = Exp(Ad(T) xi)`.
    pub fn adjoint(&self) -> DMatrix<f64> {
        match self {
            LieElement::Se2(m) => DMatrix::from_row_slice(
                3,
                3,
                &[m[(0, 0)], m[(0, 1)], m[(1, 2)], m[(1, 0)], m[(1, 1)], -m[(0, 2)], 0.0, 0.0, 1.0],
            ),
            LieElement::Se3(m) => {
                let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
                let t = Vector3::new(m[(0, 3)], m[(1, 3)], m[(2, 3)]);
                let mut out = DMatrix::zeros(6, 6);
                out.view_mut((0, 0), (3, 3)).copy_from(&r);
                out.view_mut((3, 3), (3, 3)).copy_from(&r);
                out.view_mut((0, 3), (3, 3)).copy_from(&(skew(&t) * r));
                out
            }
        }
    }

    /// `self * Exp(eps)`, re-orthonormalized when the rotation has drifted.
    pub fn perturb(&self, eps: &Tangent) -> LieElement {
        self.compose(&exp(self.group(), eps)).normalized()
    }

    fn normalized(self) -> LieElement {
        match self {
            LieElement::Se2(m) => {
                let t = m[(1, 0)].atan2(m[(0, 0)]);
                LieElement::se2(m[(0, 2)], m[(1, 2)], t)
            }
            LieElement::Se3(mut m) => {
                let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
                if (r.transpose() * r - Matrix3::identity()).amax() > 1e-12 {
                    let svd = r.svd(true, true);
                    let mut fixed = svd.u.unwrap() * svd.v_t.unwrap();
                    if fixed.determinant() < 0.0 {
                        fixed = -fixed;
                    }
                    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&fixed);
                }
                LieElement::Se3(m)
            }
        }
    }

    /// Maps a point from the body frame to the world frame.
    pub fn act(&self, p: &DVector<f64>) -> DVector<f64> {
        self.rotation() * p + self.translation()
    }

    /// `Log(a^-1 b)` via the group operations; the right-perturbation difference.
    pub fn local(&self, other: &LieElement) -> Result<Tangent> {
        self.between(other).log()
    }
}
