//! Linear time-invariant stochastic motion models and their exact discretization
//! into transition blocks (transition matrix, process-noise covariance, input term).

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{check_square, check_symmetric, cholesky, symmetrized};

/// Known input `v(t)` added to the drift.
#[derive(Clone, Debug, PartialEq)]
pub enum Input {
    Zero,
    Constant(DVector<f64>),
    /// `values[i]` applies on `[times[i], times[i+1])`; the last value holds afterwards
    /// and the first value holds before `times[0]`.
    PiecewiseConstant {
        times: Vec<f64>,
        values: Vec<DVector<f64>>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    /// White-noise-on-acceleration: state `[p; p_dot]`, closed-form discretization.
    Wnoa,
    /// Any other model: numerical discretization.
    General,
}

/// `x_dot = A x + v(t) + L w(t)`, `w ~ GP(0, Qc delta(t - t'))`.
#[derive(Clone, Debug, PartialEq)]
pub struct LtiModel {
    pub a: DMatrix<f64>,
    pub l: DMatrix<f64>,
    pub qc: DMatrix<f64>,
    pub input: Input,
    pub kind: ModelKind,
    nilpotent_index: Option<usize>,
}

/// Discrete transition from `t0` to `t1 = t0 + dt`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionBlocks {
    pub dt: f64,
    pub a: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub v: DVector<f64>,
}

impl LtiModel {
    pub fn new(a: DMatrix<f64>, l: DMatrix<f64>, qc: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        check_square(&a, n, "A")?;
        if l.nrows() != n {
            return Err(Error::Dimension(format!("L has {} rows, A is {n}x{n}", l.nrows())));
        }
        check_square(&qc, l.ncols(), "Qc")?;
        check_symmetric(&qc, "Qc")?;
        cholesky(&qc, "Qc")?;
        let nilpotent_index = nilpotent_index(&a);
        Ok(LtiModel { a, l, qc: symmetrized(qc), input: Input::Zero, kind: ModelKind::General, nilpotent_index })
    }

    /// White-noise-on-acceleration prior with `m`-dimensional position, `m = qc.nrows()`.
    pub fn wnoa(qc: DMatrix<f64>) -> Result<Self> {
        let m = qc.nrows();
        let mut a = DMatrix::zeros(2 * m, 2 * m);
        a.view_mut((0, m), (m, m)).fill_with_identity();
        let mut l = DMatrix::zeros(2 * m, m);
        l.view_mut((m, 0), (m, m)).fill_with_identity();
        let mut model = LtiModel::new(a, l, qc)?;
        model.kind = ModelKind::Wnoa;
        Ok(model)
    }

    pub fn with_input(mut self, input: Input) -> Result<Self> {
        if self.kind == ModelKind::Wnoa && input != Input::Zero {
            return Err(Error::Invalid("the white-noise-on-acceleration prior has no input".into()));
        }
        let n = self.state_dim();
        match &input {
            Input::Zero => {}
            Input::Constant(v) if v.len() != n => {
                return Err(Error::Dimension(format!("input has length {}, state has {n}", v.len())))
            }
            Input::Constant(_) => {}
            Input::PiecewiseConstant { times, values } => {
                if times.is_empty() || times.len() != values.len() {
                    return Err(Error::Invalid("piecewise input needs one value per breakpoint".into()));
                }
                if let Some(i) = times.windows(2).position(|w| w[1] <= w[0]) {
                    return Err(Error::NonIncreasingTime { index: i + 1 });
                }
                if values.iter().any(|v| v.len() != n) {
                    return Err(Error::Dimension("piecewise input value has wrong length".into()));
                }
            }
        }
        self.input = input;
        Ok(self)
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    /// Half the state dimension for WNOA models.
    pub fn position_dim(&self) -> usize {
        self.state_dim() / 2
    }

    /// `Phi(t0 + dt, t0) = exp(A dt)`.
    pub fn transition(&self, dt: f64) -> DMatrix<f64> {
        let m = &self.a * dt;
        match (self.kind, self.nilpotent_index) {
            (ModelKind::Wnoa, _) => wnoa_transition(self.position_dim(), dt),
            (_, Some(k)) => truncated_exp(&m, k),
            _ => expm(&m),
        }
    }

    /// Exact discretization over `[t0, t1]`.
    pub fn discretize(&self, t0: f64, t1: f64) -> Result<TransitionBlocks> {
        let dt = t1 - t0;
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::Invalid(format!("interval [{t0}, {t1}] is empty or reversed")));
        }
        let a = self.transition(dt);
        let q = match self.kind {
            ModelKind::Wnoa => wnoa_q(&self.qc, dt),
            ModelKind::General => self.quadrature_q(dt),
        };
        let v = self.input_term(t0, t1);
        Ok(TransitionBlocks { dt, a, q, v })
    }

    fn quadrature_q(&self, dt: f64) -> DMatrix<f64> {
        let lql = &self.l * &self.qc * self.l.transpose();
        let (nodes, weights) = gauss_legendre_32();
        let n = self.state_dim();
        let mut q = DMatrix::zeros(n, n);
        for (x, w) in nodes.iter().zip(weights) {
            let u = 0.5 * dt * (x + 1.0);
            let phi = self.transition(u);
            q += (&phi * &lql * phi.transpose()) * (0.5 * dt * w);
        }
        symmetrized(crate::linalg::sym_avg(&q))
    }

    /// `int_{t0}^{t1} Phi(t1, s) v(s) ds`.
    fn input_term(&self, t0: f64, t1: f64) -> DVector<f64> {
        let n = self.state_dim();
        match &self.input {
            Input::Zero => DVector::zeros(n),
            Input::Constant(c) => self.integrate_constant(t0, t1, t1, c),
            Input::PiecewiseConstant { times, values } => {
                let mut out = DVector::zeros(n);
                let mut start = t0;
                while start < t1 {
                    let idx = times.iter().rposition(|&b| b <= start).unwrap_or(0);
                    let end = times.get(idx + 1).map_or(t1, |&b| b.min(t1));
                    let end = if end <= start { t1 } else { end };
                    out += self.integrate_constant(start, end, t1, &values[idx]);
                    start = end;
                }
                out
            }
        }
    }

    fn integrate_constant(&self, s0: f64, s1: f64, t1: f64, c: &DVector<f64>) -> DVector<f64> {
        let (nodes, weights) = gauss_legendre_32();
        let h = s1 - s0;
        let mut acc = DVector::zeros(self.state_dim());
        for (x, w) in nodes.iter().zip(weights) {
            let s = s0 + 0.5 * h * (x + 1.0);
            acc += (self.transition(t1 - s) * c) * (0.5 * h * w);
        }
        acc
    }
}

/// `[[I, dt I], [0, I]]`.
pub fn wnoa_transition(m: usize, dt: f64) -> DMatrix<f64> {
    let mut a = DMatrix::identity(2 * m, 2 * m);
    a.view_mut((0, m), (m, m)).fill_diagonal(dt);
    a
}

/// `[[dt^3/3 Qc, dt^2/2 Qc], [dt^2/2 Qc, dt Qc]]`.
pub fn wnoa_q(qc: &DMatrix<f64>, dt: f64) -> DMatrix<f64> {
    let m = qc.nrows();
    let mut q = DMatrix::zeros(2 * m, 2 * m);
    q.view_mut((0, 0), (m, m)).copy_from(&(qc * (dt * dt * dt / 3.0)));
    let off = qc * (dt * dt / 2.0);
    q.view_mut((0, m), (m, m)).copy_from(&off);
    q.view_mut((m, 0), (m, m)).copy_from(&off);
    q.view_mut((m, m), (m, m)).copy_from(&(qc * dt));
    q
}

/// Smallest `k <= n` with `A^k = 0` exactly.
fn nilpotent_index(a: &DMatrix<f64>) -> Option<usize> {
    let n = a.nrows();
    let mut p = a.clone();
    for k in 1..=n {
        if p.iter().all(|&v| v == 0.0) {
            return Some(k);
        }
        p = &p * a;
    }
    None
}

fn truncated_exp(m: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let n = m.nrows();
    let mut out = DMatrix::identity(n, n);
    let mut term = DMatrix::identity(n, n);
    for i in 1..k {
        term = &term * m / i as f64;
        out += &term;
    }
    out
}

/// Matrix exponential by scaling and squaring with a degree-6 diagonal Pade approximant.
pub fn expm(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    if let Some(k) = nilpotent_index(m) {
        return truncated_exp(m, k);
    }
    let norm = (0..n).map(|j| m.column(j).abs().sum()).fold(0.0, f64::max);
    let s = if norm > 0.5 { (norm / 0.5).log2().ceil() as i32 } else { 0 };
    let x = m / 2f64.powi(s);
    const P: usize = 6;
    let mut c = 1.0;
    let mut num = DMatrix::identity(n, n);
    let mut den = DMatrix::identity(n, n);
    let mut xp = DMatrix::identity(n, n);
    for k in 1..=P {
        c *= (P - k + 1) as f64 / (k * (2 * P - k + 1)) as f64;
        xp = &xp * &x;
        num += &xp * c;
        if k % 2 == 0 {
            den += &xp * c;
        } else {
            den -= &xp * c;
        }
    }
    let mut r = den.lu().solve(&num).expect("Pade denominator is invertible for scaled input");
    for _ in 0..s {
        r = &r * &r;
    }
    r
}

/// 32-point Gauss-Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre_32() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| gauss_legendre(32))
}

/// Gauss-Legendre rule of order `n` by Newton iteration on the Legendre polynomial.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 1 { x } else { p1 };
            let pn1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * pn - pn1) / (x * x - 1.0);
            let dx = pn / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{is_spd, rel_diff};
    use proptest::prelude::*;

    fn qc(m: usize, s: f64) -> DMatrix<f64> {
        let mut q = DMatrix::identity(m, m) * s;
        if m > 1 {
            q[(0, 1)] = 0.2 * s;
            q[(1, 0)] = 0.2 * s;
        }
        q
    }

    /// Reference exponential: plain Taylor series on a heavily scaled argument.
    fn taylor_expm(m: &DMatrix<f64>) -> DMatrix<f64> {
        let n = m.nrows();
        let s = 12;
        let x = m / 2f64.powi(s);
        let mut out = DMatrix::identity(n, n);
        let mut term = DMatrix::identity(n, n);
        for k in 1..30 {
            term = &term * &x / k as f64;
            out += &term;
        }
        for _ in 0..s {
            out = &out * &out;
        }
        out
    }

    /// Reference discretization through the exponential of a block matrix.
    fn van_loan(model: &LtiModel, dt: f64) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = model.state_dim();
        let mut big = DMatrix::zeros(2 * n, 2 * n);
        big.view_mut((0, 0), (n, n)).copy_from(&(-&model.a));
        big.view_mut((0, n), (n, n)).copy_from(&(&model.l * &model.qc * model.l.transpose()));
        big.view_mut((n, n), (n, n)).copy_from(&model.a.transpose());
        let f = taylor_expm(&(big * dt));
        let phi = f.view((n, n), (n, n)).transpose();
        let q = &phi * f.view((0, n), (n, n));
        (phi, q)
    }

    #[test]
    fn wnoa_unit_interval() {
        let m = LtiModel::wnoa(DMatrix::identity(1, 1)).unwrap();
        let b = m.discretize(0.0, 1.0).unwrap();
        assert_eq!(b.q, DMatrix::from_row_slice(2, 2, &[1.0 / 3.0, 0.5, 0.5, 1.0]));
        assert_eq!(b.a, DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]));
        assert_eq!(b.v, DVector::zeros(2));
    }

    #[test]
    fn tiny_interval_is_symmetric_and_small() {
        let m = LtiModel::wnoa(qc(2, 1.0)).unwrap();
        let b = m.discretize(3.0, 3.0 + 1e-12).unwrap();
        assert!(b.q.amax() < 1e-11);
        assert_eq!(b.q, b.q.transpose());
    }

    #[test]
    fn reversed_interval_rejected() {
        let m = LtiModel::wnoa(qc(1, 1.0)).unwrap();
        assert!(m.discretize(1.0, 1.0).is_err());
        assert!(m.discretize(1.0, 0.5).is_err());
    }

    #[test]
    fn non_spd_qc_rejected() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(LtiModel::wnoa(bad), Err(Error::NotPositiveDefinite(_))));
    }

    #[test]
    fn wnoa_rejects_input() {
        let m = LtiModel::wnoa(qc(1, 1.0)).unwrap();
        assert!(m.with_input(Input::Constant(DVector::zeros(2))).is_err());
    }

    #[test]
    fn closed_form_matches_quadrature() {
        for m in [1, 2, 3] {
            let q = qc(m, 0.7);
            let closed = LtiModel::wnoa(q.clone()).unwrap();
            let general = LtiModel::new(closed.a.clone(), closed.l.clone(), q).unwrap();
            for &dt in &[1e-3, 0.01, 0.1, 0.5, 1.0, 3.3, 10.0] {
                let a = closed.discretize(0.0, dt).unwrap();
                let b = general.discretize(0.0, dt).unwrap();
                for (x, y) in b.q.iter().zip(a.q.iter()) {
                    assert!((x - y).abs() <= 1e-8 * y.abs(), "dt {dt}: {x} vs {y}");
                }
                assert!((&b.a - &a.a).amax() < 1e-12);
            }
        }
    }

    #[test]
    fn expm_matches_taylor_reference() {
        let m = DMatrix::from_row_slice(3, 3, &[-0.3, 1.2, 0.0, -2.0, 0.1, 0.5, 0.3, -0.4, -1.0]);
        for s in [0.01, 0.5, 2.0, 7.0] {
            let a = expm(&(&m * s));
            let b = taylor_expm(&(&m * s));
            assert!(rel_diff(&a, &b) < 1e-12, "scale {s}");
        }
    }

    #[test]
    fn general_model_matches_block_exponential() {
        // damped oscillator driven on the velocity
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -4.0, -0.6]);
        let l = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let model = LtiModel::new(a, l, DMatrix::from_element(1, 1, 0.8)).unwrap();
        for dt in [0.05, 0.7, 2.5] {
            let b = model.discretize(1.0, 1.0 + dt).unwrap();
            let (phi, q) = van_loan(&model, dt);
            assert!(rel_diff(&b.a, &phi) < 1e-11);
            assert!((&b.q - &q).amax() < 1e-10 * q.amax());
        }
    }

    #[test]
    fn constant_input_on_scalar_decay() {
        let a = DMatrix::from_element(1, 1, -0.5);
        let model = LtiModel::new(a, DMatrix::identity(1, 1), DMatrix::identity(1, 1))
            .unwrap()
            .with_input(Input::Constant(DVector::from_element(1, 2.0)))
            .unwrap();
        let b = model.discretize(0.0, 1.5).unwrap();
        let expect = 2.0 * (1.0 - (-0.5f64 * 1.5).exp()) / 0.5;
        assert!((b.v[0] - expect).abs() < 1e-13);
    }

    #[test]
    fn piecewise_input_splits_at_breakpoints() {
        let a = DMatrix::from_element(1, 1, -1.0);
        let model = LtiModel::new(a, DMatrix::identity(1, 1), DMatrix::identity(1, 1))
            .unwrap()
            .with_input(Input::PiecewiseConstant {
                times: vec![0.0, 1.0],
                values: vec![DVector::from_element(1, 1.0), DVector::from_element(1, -3.0)],
            })
            .unwrap();
        let b = model.discretize(0.5, 2.0).unwrap();
        // int_{0.5}^{1} e^{-(2-s)} ds - 3 int_1^2 e^{-(2-s)} ds
        let expect = ((-1.0f64).exp() - (-1.5f64).exp()) - 3.0 * (1.0 - (-1.0f64).exp());
        assert!((b.v[0] - expect).abs() < 1e-13);
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre(32);
        assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-14);
        let i: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(62)).sum();
        assert!((i - 2.0 / 63.0).abs() < 1e-14);
        let (x5, w5) = gauss_legendre(5);
        let i5: f64 = x5.iter().zip(&w5).map(|(x, w)| w * x.powi(8)).sum();
        assert!((i5 - 2.0 / 9.0).abs() < 1e-14);
    }

    proptest! {
        #[test]
        fn q_is_additive_over_split_intervals(t1 in 0.01f64..3.0, t2 in 0.01f64..3.0, s in 0.1f64..5.0) {
            for model in [
                LtiModel::wnoa(qc(2, s)).unwrap(),
                LtiModel::new(
                    DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, -0.3]),
                    DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
                    DMatrix::from_element(1, 1, s),
                ).unwrap(),
            ] {
                let a = model.discretize(0.0, t1).unwrap();
                let b = model.discretize(t1, t1 + t2).unwrap();
                let whole = model.discretize(0.0, t1 + t2).unwrap();
                let composed = &b.a * &a.q * b.a.transpose() + &b.q;
                prop_assert!((&composed - &whole.q).amax() <= 1e-9 * whole.q.amax());
                prop_assert!((&b.a * &a.a - &whole.a).amax() <= 1e-10 * whole.a.amax());
                prop_assert!(is_spd(&whole.q));
            }
        }
    }
}
