//! Batch estimation on a time-ordered chain of knots: prior on the first knot,
//! motion factors between consecutive knots and measurement factors on knots.
//! The information matrix is block tridiagonal; the solve eliminates it knot
//! by knot in square-root form and back-substitutes. A forward filter /
//! backward smoother implementation is provided for cross-checking.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gaussian::{GaussianDensity, Key, QuadraticFactor, Scope};
use crate::linalg::{block_diag, check_square, cholesky, spd_inverse, symmetrized, vstack};
use crate::lti::{LtiModel, TransitionBlocks};

/// Tolerance for matching a time to a knot.
pub const TIME_SNAP: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Knot {
    pub key: Key,
    pub time: f64,
}

/// Linear observation `y = C x + n`, `n ~ N(0, R)`, taken at `time`.
#[derive(Clone, Debug, PartialEq)]
pub struct Measurement {
    pub time: f64,
    pub c: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub y: DVector<f64>,
}

impl Measurement {
    pub fn new(time: f64, c: DMatrix<f64>, r: DMatrix<f64>, y: DVector<f64>) -> Self {
        Measurement { time, c, r, y }
    }

    fn validate(&self, n: usize) -> Result<()> {
        let rows = self.y.len();
        if self.c.nrows() != rows || self.c.ncols() != n {
            return Err(Error::Dimension(format!(
                "measurement at t={} has C {}x{}, expected {rows}x{n}",
                self.time,
                self.c.nrows(),
                self.c.ncols()
            )));
        }
        check_square(&self.r, rows, "measurement covariance")?;
        crate::linalg::check_symmetric(&self.r, "measurement covariance")?;
        cholesky(&self.r, "measurement covariance")?;
        Ok(())
    }
}

/// Measurement attached to a knot.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementFactor {
    pub knot: usize,
    pub key: Key,
    pub c: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub y: DVector<f64>,
}

impl MeasurementFactor {
    pub fn to_factor(&self) -> Result<QuadraticFactor> {
        QuadraticFactor::from_residual(Scope::single(self.key, self.c.ncols()), &self.c, &self.y, &self.r)
    }
}

/// Factor graph for a chain of knots.
#[derive(Clone, Debug)]
pub struct ChainGraph {
    pub model: LtiModel,
    pub knots: Vec<Knot>,
    pub prior: GaussianDensity,
    /// `transitions[k]` maps knot `k` to knot `k+1`.
    pub transitions: Vec<TransitionBlocks>,
    pub measurements: Vec<MeasurementFactor>,
    /// Additional factors on single knots or on consecutive pairs.
    pub extra: Vec<QuadraticFactor>,
}

/// Index of the knot within [`TIME_SNAP`] of `t`.
pub fn find_knot(times: &[f64], t: f64) -> Option<usize> {
    let i = times.partition_point(|&x| x < t - TIME_SNAP);
    (i < times.len() && (times[i] - t).abs() <= TIME_SNAP).then_some(i)
}

pub fn check_increasing(times: &[f64]) -> Result<()> {
    if let Some(i) = times.iter().position(|t| !t.is_finite()) {
        return Err(Error::Invalid(format!("time at index {i} is not finite")));
    }
    match times.windows(2).position(|w| w[1] <= w[0]) {
        Some(i) => Err(Error::NonIncreasingTime { index: i + 1 }),
        None => Ok(()),
    }
}

pub fn knot_key(i: usize) -> Key {
    Key::symbol('x', i as u64)
}

/// Builds the chain factor graph. Knot `i` gets key `x{i}`.
pub fn build_chain(
    model: &LtiModel,
    prior_mean: DVector<f64>,
    prior_cov: DMatrix<f64>,
    times: &[f64],
    measurements: &[Measurement],
) -> Result<ChainGraph> {
    if times.is_empty() {
        return Err(Error::Invalid("a chain needs at least one knot".into()));
    }
    check_increasing(times)?;
    let n = model.state_dim();
    let knots: Vec<Knot> = times.iter().enumerate().map(|(i, &t)| Knot { key: knot_key(i), time: t }).collect();
    if prior_mean.len() != n {
        return Err(Error::Dimension(format!("prior mean has length {}, state has {n}", prior_mean.len())));
    }
    let prior = GaussianDensity::single(knots[0].key, prior_mean, prior_cov)?;
    let transitions = times.windows(2).map(|w| model.discretize(w[0], w[1])).collect::<Result<Vec<_>>>()?;
    let mut mfs = Vec::with_capacity(measurements.len());
    for m in measurements {
        m.validate(n)?;
        let k = find_knot(times, m.time)
            .ok_or_else(|| Error::Invalid(format!("measurement time {} matches no knot", m.time)))?;
        mfs.push(MeasurementFactor { knot: k, key: knots[k].key, c: m.c.clone(), r: m.r.clone(), y: m.y.clone() });
    }
    Ok(ChainGraph { model: model.clone(), knots, prior, transitions, measurements: mfs, extra: Vec::new() })
}

impl ChainGraph {
    pub fn state_dim(&self) -> usize {
        self.model.state_dim()
    }

    pub fn times(&self) -> Vec<f64> {
        self.knots.iter().map(|k| k.time).collect()
    }

    /// Motion factor `x_{k+1} - A x_k - v` with covariance `Q`.
    pub fn motion_factor(&self, k: usize) -> Result<QuadraticFactor> {
        let n = self.state_dim();
        let tb = &self.transitions[k];
        let mut j = DMatrix::zeros(n, 2 * n);
        j.view_mut((0, 0), (n, n)).copy_from(&(-&tb.a));
        j.view_mut((0, n), (n, n)).fill_with_identity();
        let scope = Scope::new(vec![(self.knots[k].key, n), (self.knots[k + 1].key, n)])?;
        QuadraticFactor::from_residual(scope, &j, &tb.v, &tb.q)
    }

    /// All factors: prior, motion factors, measurements, extras.
    pub fn factors(&self) -> Result<Vec<QuadraticFactor>> {
        let mut out = Vec::with_capacity(1 + self.transitions.len() + self.measurements.len() + self.extra.len());
        out.push(self.prior.to_factor()?);
        for k in 0..self.transitions.len() {
            out.push(self.motion_factor(k)?);
        }
        for m in &self.measurements {
            out.push(m.to_factor()?);
        }
        out.extend(self.extra.iter().cloned());
        Ok(out)
    }

    pub fn factor_count(&self) -> usize {
        1 + self.transitions.len() + self.measurements.len() + self.extra.len()
    }

    /// Sum of factor costs at the given knot means.
    pub fn cost(&self, means: &[DVector<f64>]) -> Result<f64> {
        let values = self.knots.iter().map(|k| k.key).zip(means.iter().cloned()).collect();
        self.factors()?.iter().map(|f| f.evaluate_at(&values)).sum()
    }

    pub fn assemble(&self) -> Result<BlockTridiagonal> {
        BlockTridiagonal::assemble(&self.knots, self.state_dim(), &self.factors()?)
    }
}

/// Symmetric block-tridiagonal system `L x = h`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockTridiagonal {
    pub diag: Vec<DMatrix<f64>>,
    /// `lower[k]` is the block in row `k+1`, column `k`.
    pub lower: Vec<DMatrix<f64>>,
    pub rhs: Vec<DVector<f64>>,
    pub keys: Vec<Key>,
}

impl BlockTridiagonal {
    /// Sums factors into tridiagonal blocks; factors must touch one knot or two consecutive knots.
    pub fn assemble(knots: &[Knot], n: usize, factors: &[QuadraticFactor]) -> Result<Self> {
        let kn = knots.len();
        let index: std::collections::HashMap<Key, usize> = knots.iter().enumerate().map(|(i, k)| (k.key, i)).collect();
        let mut diag = vec![DMatrix::zeros(n, n); kn];
        let mut lower = vec![DMatrix::zeros(n, n); kn.saturating_sub(1)];
        let mut rhs = vec![DVector::zeros(n); kn];
        let mut linked = vec![false; kn.saturating_sub(1)];
        for f in factors {
            let mut pos = Vec::with_capacity(f.scope.len());
            let mut off = 0;
            for &(k, d) in f.scope.entries() {
                let i = *index.get(&k).ok_or(Error::UnknownKey(k))?;
                if d != n {
                    return Err(Error::Dimension(format!("key {k} has dimension {d}, knots have {n}")));
                }
                pos.push((i, off));
                off += d;
            }
            let lo = pos.iter().map(|p| p.0).min().unwrap_or(0);
            let hi = pos.iter().map(|p| p.0).max().unwrap_or(0);
            if hi - lo > 1 {
                return Err(Error::NotAChain(format!("a factor links {} and {}", knots[lo].key, knots[hi].key)));
            }
            if hi > lo {
                linked[lo] = true;
            }
            for &(i, oi) in &pos {
                rhs[i] += f.vec.rows(oi, n);
                for &(j, oj) in &pos {
                    let blk = f.info.view((oi, oj), (n, n));
                    if i == j {
                        diag[i] += blk;
                    } else if i == j + 1 {
                        lower[j] += blk;
                    }
                }
            }
        }
        if let Some(k) = linked.iter().position(|l| !l) {
            return Err(Error::NotAChain(format!(
                "no factor links {} and {}; the chain is disconnected",
                knots[k].key,
                knots[k + 1].key
            )));
        }
        Ok(BlockTridiagonal { diag, lower, rhs, keys: knots.iter().map(|k| k.key).collect() })
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.diag.first().map_or(0, |d| d.nrows());
        let kn = self.diag.len();
        let mut m = DMatrix::zeros(n * kn, n * kn);
        for (k, d) in self.diag.iter().enumerate() {
            m.view_mut((k * n, k * n), (n, n)).copy_from(d);
        }
        for (k, l) in self.lower.iter().enumerate() {
            m.view_mut(((k + 1) * n, k * n), (n, n)).copy_from(l);
            m.view_mut((k * n, (k + 1) * n), (n, n)).copy_from(&l.transpose());
        }
        m
    }

    /// Means, marginal covariances and consecutive cross-covariances `P_{k+1,k}`.
    pub fn solve(&self) -> Result<(Vec<DVector<f64>>, Vec<DMatrix<f64>>, Vec<DMatrix<f64>>)> {
        let kn = self.diag.len();
        let mut chols: Vec<nalgebra::Cholesky<f64, nalgebra::Dyn>> = Vec::with_capacity(kn);
        let mut yv: Vec<DVector<f64>> = Vec::with_capacity(kn);
        let mut s = self.diag[0].clone();
        let mut y = self.rhs[0].clone();
        for k in 0..kn {
            let ch = nalgebra::Cholesky::new(symmetrized(s.clone()))
                .filter(|_| s.iter().all(|v| v.is_finite()))
                .ok_or(Error::Unconstrained { keys: vec![self.keys[k]] })?;
            if k + 1 < kn {
                let l = &self.lower[k];
                let sinv_lt = ch.solve(&l.transpose());
                let next_y = &self.rhs[k + 1] - sinv_lt.transpose() * &y;
                s = &self.diag[k + 1] - l * &sinv_lt;
                yv.push(std::mem::replace(&mut y, next_y));
            } else {
                yv.push(y.clone());
            }
            chols.push(ch);
        }
        let mut means = vec![DVector::zeros(0); kn];
        let mut covs = vec![DMatrix::zeros(0, 0); kn];
        let mut cross = vec![DMatrix::zeros(0, 0); kn.saturating_sub(1)];
        means[kn - 1] = chols[kn - 1].solve(&yv[kn - 1]);
        covs[kn - 1] = symmetrized(chols[kn - 1].inverse());
        for k in (0..kn - 1).rev() {
            let lt = self.lower[k].transpose();
            means[k] = chols[k].solve(&(&yv[k] - &lt * &means[k + 1]));
            let g = -chols[k].solve(&lt);
            let gp = &g * &covs[k + 1];
            covs[k] = symmetrized(chols[k].inverse() + &gp * g.transpose());
            cross[k] = gp.transpose();
        }
        Ok((means, covs, cross))
    }
}

/// Posterior over the knots of a chain.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainSolution {
    pub keys: Vec<Key>,
    pub times: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<DMatrix<f64>>,
    /// `cross[k] = Cov(x_{k+1}, x_k)`.
    pub cross: Vec<DMatrix<f64>>,
    pub cost: f64,
}

impl ChainSolution {
    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    /// Joint density of knots `k` and `k+1`.
    pub fn pair(&self, k: usize) -> Result<GaussianDensity> {
        if k + 1 >= self.len() {
            return Err(Error::Invalid(format!("no knot pair starting at {k}")));
        }
        let n = self.means[k].len();
        let mut cov = DMatrix::zeros(2 * n, 2 * n);
        cov.view_mut((0, 0), (n, n)).copy_from(&self.covs[k]);
        cov.view_mut((n, n), (n, n)).copy_from(&self.covs[k + 1]);
        cov.view_mut((n, 0), (n, n)).copy_from(&self.cross[k]);
        cov.view_mut((0, n), (n, n)).copy_from(&self.cross[k].transpose());
        let scope = Scope::new(vec![(self.keys[k], n), (self.keys[k + 1], n)])?;
        GaussianDensity::new(scope, vstack(&[&self.means[k], &self.means[k + 1]]), cov)
    }

    pub fn marginal(&self, k: usize) -> Result<GaussianDensity> {
        GaussianDensity::single(self.keys[k], self.means[k].clone(), self.covs[k].clone())
    }
}

/// Whitened rows `a x_k + next x_{k+1} ~ rhs`.
struct SqrtRows {
    a: DMatrix<f64>,
    next: Option<DMatrix<f64>>,
    rhs: DVector<f64>,
}

fn whiten(j: &DMatrix<f64>, b: &DVector<f64>, cov: &DMatrix<f64>, what: &str) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let l = cholesky(cov, what)?.l();
    let jw = l.solve_lower_triangular(j).ok_or_else(|| Error::Numerical(format!("whitening {what}")))?;
    let bw = l.solve_lower_triangular(b).ok_or_else(|| Error::Numerical(format!("whitening {what}")))?;
    Ok((jw, bw))
}

/// Rows `R`, `b` with `R^T R = info` and `R^T b = vec`, from the eigendecomposition.
fn info_sqrt(f: &QuadraticFactor) -> (DMatrix<f64>, DVector<f64>) {
    let eig = symmetrized(f.info.clone()).symmetric_eigen();
    let tol = eig.eigenvalues.amax() * f64::EPSILON * f.info.nrows() as f64;
    let keep: Vec<usize> = (0..eig.eigenvalues.len()).filter(|&i| eig.eigenvalues[i] > tol).collect();
    let mut r = DMatrix::zeros(keep.len(), f.info.ncols());
    let mut b = DVector::zeros(keep.len());
    for (row, &i) in keep.iter().enumerate() {
        let s = eig.eigenvalues[i].sqrt();
        let v = eig.eigenvectors.column(i);
        r.row_mut(row).copy_from(&(v.transpose() * s));
        b[row] = v.dot(&f.vec) / s;
    }
    (r, b)
}

impl ChainGraph {
    /// Whitened rows grouped by the earliest knot they touch.
    fn sqrt_rows(&self) -> Result<Vec<Vec<SqrtRows>>> {
        let kn = self.knots.len();
        let n = self.state_dim();
        let mut out: Vec<Vec<SqrtRows>> = (0..kn).map(|_| Vec::new()).collect();
        let (a, rhs) = whiten(&DMatrix::identity(n, n), &self.prior.mean, &self.prior.cov, "prior covariance")?;
        out[0].push(SqrtRows { a, next: None, rhs });
        for (k, tb) in self.transitions.iter().enumerate() {
            let mut j = DMatrix::zeros(n, 2 * n);
            j.view_mut((0, 0), (n, n)).copy_from(&(-&tb.a));
            j.view_mut((0, n), (n, n)).fill_with_identity();
            let (jw, rhs) = whiten(&j, &tb.v, &tb.q, "process noise")?;
            out[k].push(SqrtRows { a: jw.columns(0, n).into_owned(), next: Some(jw.columns(n, n).into_owned()), rhs });
        }
        for m in &self.measurements {
            let (a, rhs) = whiten(&m.c, &m.y, &m.r, "measurement covariance")?;
            out[m.knot].push(SqrtRows { a, next: None, rhs });
        }
        let index: std::collections::HashMap<Key, usize> =
            self.knots.iter().enumerate().map(|(i, k)| (k.key, i)).collect();
        for f in &self.extra {
            let (r, rhs) = info_sqrt(f);
            let mut pos = Vec::with_capacity(f.scope.len());
            let mut off = 0;
            for &(key, d) in f.scope.entries() {
                let i = *index.get(&key).ok_or(Error::UnknownKey(key))?;
                if d != n {
                    return Err(Error::Dimension(format!("key {key} has dimension {d}, knots have {n}")));
                }
                pos.push((i, off));
                off += d;
            }
            let lo = pos.iter().map(|p| p.0).min().unwrap_or(0);
            let hi = pos.iter().map(|p| p.0).max().unwrap_or(0);
            if hi - lo > 1 {
                return Err(Error::NotAChain(format!(
                    "a factor links {} and {}",
                    self.knots[lo].key, self.knots[hi].key
                )));
            }
            let mut a = DMatrix::zeros(r.nrows(), n);
            let mut next = (hi > lo).then(|| DMatrix::zeros(r.nrows(), n));
            for &(i, o) in &pos {
                let cols = r.columns(o, n);
                match (&mut next, i == lo) {
                    (_, true) => a += cols,
                    (Some(nx), false) => *nx += cols,
                    (None, false) => unreachable!("single-knot factor"),
                }
            }
            out[lo].push(SqrtRows { a, next, rhs });
        }
        Ok(out)
    }
}

/// Batch solve by square-root information smoothing: block QR of the whitened
/// system along the chain, then back substitution. Same posterior as
/// eliminating the block-tridiagonal information matrix, without forming it.
pub fn solve_chain(graph: &ChainGraph) -> Result<ChainSolution> {
    let kn = graph.knots.len();
    let n = graph.state_dim();
    let rows = graph.sqrt_rows()?;
    // an unlinked pair is reported the same way as by assembly
    graph.assemble()?;
    let mut conds: Vec<(DMatrix<f64>, DMatrix<f64>, DVector<f64>)> = Vec::with_capacity(kn);
    let mut carry: Option<(DMatrix<f64>, DVector<f64>)> = None;
    for (k, group) in rows.iter().enumerate() {
        let w = if k + 1 < kn { 2 * n } else { n };
        let total = group.iter().map(|r| r.rhs.len()).sum::<usize>() + carry.as_ref().map_or(0, |c| c.1.len());
        let mut m = DMatrix::zeros(total, w + 1);
        let mut at = 0;
        if let Some((a, b)) = carry.take() {
            m.view_mut((0, 0), (a.nrows(), n)).copy_from(&a);
            m.view_mut((0, w), (b.len(), 1)).copy_from(&b);
            at = b.len();
        }
        for r in group {
            let h = r.rhs.len();
            m.view_mut((at, 0), (h, n)).copy_from(&r.a);
            if let Some(nx) = &r.next {
                m.view_mut((at, n), (h, n)).copy_from(nx);
            }
            m.view_mut((at, w), (h, 1)).copy_from(&r.rhs);
            at += h;
        }
        let unconstrained = || Error::Unconstrained { keys: vec![graph.knots[k].key] };
        if total < n || m.iter().any(|v| !v.is_finite()) {
            return Err(unconstrained());
        }
        let r = m.qr().r();
        let rkk = r.view((0, 0), (n, n)).into_owned();
        let scale = rkk.amax();
        if (0..n).any(|i| rkk[(i, i)].abs() <= 1e-13 * scale) {
            return Err(unconstrained());
        }
        let rkn = if w > n { r.view((0, n), (n, n)).into_owned() } else { DMatrix::zeros(n, n) };
        conds.push((rkk, rkn, r.view((0, w), (n, 1)).column(0).into_owned()));
        if w > n {
            let p = r.nrows().min(w);
            if p > n {
                carry =
                    Some((r.view((n, n), (p - n, n)).into_owned(), r.view((n, w), (p - n, 1)).column(0).into_owned()));
            }
        }
    }
    let mut means = vec![DVector::zeros(0); kn];
    let mut covs = vec![DMatrix::zeros(0, 0); kn];
    let mut cross = vec![DMatrix::zeros(0, 0); kn.saturating_sub(1)];
    let tri_inv = |r: &DMatrix<f64>| {
        r.solve_upper_triangular(&DMatrix::identity(n, n))
            .ok_or_else(|| Error::Numerical("singular square-root factor".into()))
    };
    for k in (0..kn).rev() {
        let (rkk, rkn, d) = &conds[k];
        let rinv = tri_inv(rkk)?;
        let own = symmetrized(&rinv * rinv.transpose());
        if k + 1 == kn {
            means[k] = &rinv * d;
            covs[k] = own;
        } else {
            means[k] = &rinv * (d - rkn * &means[k + 1]);
            let g = -&rinv * rkn;
            let gp = &g * &covs[k + 1];
            covs[k] = symmetrized(own + &gp * g.transpose());
            cross[k] = gp.transpose();
        }
    }
    let cost = graph.cost(&means)?;
    Ok(ChainSolution {
        keys: graph.knots.iter().map(|k| k.key).collect(),
        times: graph.times(),
        means,
        covs,
        cross,
        cost,
    })
}

/// Forward filter followed by a backward smoothing pass.
pub fn rts_smooth(graph: &ChainGraph) -> Result<ChainSolution> {
    if !graph.extra.is_empty() {
        return Err(Error::Invalid("smoother accepts only prior, motion and knot measurements".into()));
    }
    let kn = graph.knots.len();
    let n = graph.state_dim();
    let mut grouped: Vec<Vec<&MeasurementFactor>> = vec![Vec::new(); kn];
    for m in &graph.measurements {
        grouped[m.knot].push(m);
    }
    let mut pred_mean = Vec::with_capacity(kn);
    let mut pred_cov = Vec::with_capacity(kn);
    let mut filt_mean: Vec<DVector<f64>> = Vec::with_capacity(kn);
    let mut filt_cov: Vec<DMatrix<f64>> = Vec::with_capacity(kn);
    for k in 0..kn {
        let (xp, pp) = if k == 0 {
            (graph.prior.mean.clone(), graph.prior.cov.clone())
        } else {
            let tb = &graph.transitions[k - 1];
            (&tb.a * &filt_mean[k - 1] + &tb.v, symmetrized(&tb.a * &filt_cov[k - 1] * tb.a.transpose() + &tb.q))
        };
        let (xf, pf) = if grouped[k].is_empty() {
            (xp.clone(), pp.clone())
        } else {
            let c = DMatrix::from_rows(
                &grouped[k]
                    .iter()
                    .flat_map(|m| m.c.row_iter().map(|r| r.into_owned()).collect::<Vec<_>>())
                    .collect::<Vec<_>>(),
            );
            let r = block_diag(&grouped[k].iter().map(|m| &m.r).collect::<Vec<_>>());
            let y = vstack(&grouped[k].iter().map(|m| &m.y).collect::<Vec<_>>());
            let s = &c * &pp * c.transpose() + r;
            let gain = (cholesky(&s, "innovation covariance")?.solve(&(&c * &pp))).transpose();
            let xf = &xp + &gain * (y - &c * &xp);
            let pf = symmetrized((DMatrix::identity(n, n) - &gain * &c) * &pp);
            (xf, pf)
        };
        pred_mean.push(xp);
        pred_cov.push(pp);
        filt_mean.push(xf);
        filt_cov.push(pf);
    }
    let mut means = filt_mean.clone();
    let mut covs = filt_cov.clone();
    let mut cross = vec![DMatrix::zeros(n, n); kn.saturating_sub(1)];
    for k in (1..kn).rev() {
        let a = &graph.transitions[k - 1].a;
        let pinv = spd_inverse(&pred_cov[k], "predicted covariance")?;
        let g = &filt_cov[k - 1] * a.transpose() * pinv;
        means[k - 1] = &filt_mean[k - 1] + &g * (&means[k] - &pred_mean[k]);
        covs[k - 1] = symmetrized(&filt_cov[k - 1] + &g * (&covs[k] - &pred_cov[k]) * g.transpose());
        cross[k - 1] = &covs[k] * g.transpose();
    }
    let cost = graph.cost(&means)?;
    Ok(ChainSolution {
        keys: graph.knots.iter().map(|k| k.key).collect(),
        times: graph.times(),
        means,
        covs,
        cross,
        cost,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::GaussianFactorGraph;
    use crate::linalg::rel_diff;

    fn wnoa1() -> LtiModel {
        LtiModel::wnoa(DMatrix::identity(1, 1)).unwrap()
    }

    fn pos_meas(t: f64, y: f64, r: f64) -> Measurement {
        Measurement::new(
            t,
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DMatrix::from_element(1, 1, r),
            DVector::from_element(1, y),
        )
    }

    fn small_graph() -> ChainGraph {
        let times = [0.0, 0.4, 1.0, 1.7, 2.0];
        let meas =
            vec![pos_meas(0.0, 0.1, 0.2), pos_meas(1.0, 0.8, 0.1), pos_meas(1.0, 0.9, 0.3), pos_meas(2.0, 1.1, 0.05)];
        build_chain(&wnoa1(), DVector::zeros(2), DMatrix::identity(2, 2), &times, &meas).unwrap()
    }

    #[test]
    fn factor_count_is_prior_motion_measurements() {
        let g = small_graph();
        assert_eq!(g.factor_count(), 1 + 4 + 4);
        assert_eq!(g.factors().unwrap().len(), 9);
    }

    #[test]
    fn single_knot_with_prior_only() {
        let g = build_chain(&wnoa1(), DVector::from_vec(vec![1.0, 2.0]), DMatrix::identity(2, 2) * 3.0, &[5.0], &[])
            .unwrap();
        let s = solve_chain(&g).unwrap();
        assert!((&s.means[0] - DVector::from_vec(vec![1.0, 2.0])).amax() < 1e-14);
        assert!((&s.covs[0] - DMatrix::identity(2, 2) * 3.0).amax() < 1e-14);
        assert!(s.cost.abs() < 1e-14);
    }

    #[test]
    fn batch_matches_smoother() {
        let g = small_graph();
        let a = solve_chain(&g).unwrap();
        let b = rts_smooth(&g).unwrap();
        for k in 0..5 {
            assert!((&a.means[k] - &b.means[k]).amax() < 1e-10);
            assert!(rel_diff(&a.covs[k], &b.covs[k]) < 1e-10);
        }
        for k in 0..4 {
            assert!(rel_diff(&a.cross[k], &b.cross[k]) < 1e-10);
        }
        assert!((a.cost - b.cost).abs() < 1e-10);
    }

    #[test]
    fn batch_matches_dense_elimination() {
        let g = small_graph();
        let a = solve_chain(&g).unwrap();
        let fg = GaussianFactorGraph::new(g.factors().unwrap());
        let order: Vec<Key> = g.knots.iter().rev().map(|k| k.key).collect();
        let bn = fg.eliminate_sequential(&order).unwrap();
        let sol = bn.solve();
        let cov = bn.covariances();
        for (k, knot) in g.knots.iter().enumerate() {
            assert!((&a.means[k] - &sol[&knot.key]).amax() < 1e-10);
            assert!(rel_diff(&a.covs[k], &cov.marginal(knot.key).unwrap()) < 1e-10);
        }
        assert!((a.cost - bn.constant).abs() < 1e-9);
    }

    #[test]
    fn square_root_solve_matches_information_elimination() {
        let mut g = small_graph();
        let extra = MeasurementFactor {
            knot: 2,
            key: g.knots[2].key,
            c: DMatrix::identity(2, 2),
            r: DMatrix::identity(2, 2),
            y: DVector::from_vec(vec![0.3, -0.2]),
        };
        g.extra.push(extra.to_factor().unwrap());
        let a = solve_chain(&g).unwrap();
        let (means, covs, cross) = g.assemble().unwrap().solve().unwrap();
        for k in 0..5 {
            assert!((&a.means[k] - &means[k]).amax() < 1e-12);
            assert!(rel_diff(&a.covs[k], &covs[k]) < 1e-12);
        }
        for k in 0..4 {
            assert!(rel_diff(&a.cross[k], &cross[k]) < 1e-12);
        }
    }

    #[test]
    fn nearly_coincident_knots_stay_accurate() {
        // a knot 1e-4 after another gives information entries near 1e13
        let times = [0.0, 0.5, 0.5001, 1.2];
        let meas = vec![pos_meas(0.0, 0.1, 0.2), pos_meas(1.2, 0.8, 0.1)];
        let g = build_chain(&wnoa1(), DVector::zeros(2), DMatrix::identity(2, 2), &times, &meas).unwrap();
        let coarse = build_chain(&wnoa1(), DVector::zeros(2), DMatrix::identity(2, 2), &[0.0, 1.2], &meas).unwrap();
        let fine = solve_chain(&g).unwrap();
        let sol = solve_chain(&coarse).unwrap();
        // the inserted knots carry no data, so the end knots must be unchanged
        for (f, c) in [(0, 0), (3, 1)] {
            assert!((&fine.means[f] - &sol.means[c]).amax() < 1e-9);
            assert!(rel_diff(&fine.covs[f], &sol.covs[c]) < 1e-9);
        }
    }

    #[test]
    fn unmatched_measurement_rejected() {
        let r =
            build_chain(&wnoa1(), DVector::zeros(2), DMatrix::identity(2, 2), &[0.0, 1.0], &[pos_meas(0.5, 0.0, 1.0)]);
        assert!(matches!(r, Err(Error::Invalid(_))));
    }

    #[test]
    fn repeated_time_rejected() {
        let r = build_chain(&wnoa1(), DVector::zeros(2), DMatrix::identity(2, 2), &[0.0, 1.0, 1.0], &[]);
        assert_eq!(r.unwrap_err(), Error::NonIncreasingTime { index: 2 });
    }

    #[test]
    fn non_adjacent_factor_is_not_a_chain() {
        let mut g = small_graph();
        let scope = Scope::new(vec![(g.knots[0].key, 2), (g.knots[2].key, 2)]).unwrap();
        g.extra.push(QuadraticFactor::new(scope, DMatrix::identity(4, 4), DVector::zeros(4), 0.0).unwrap());
        assert!(matches!(solve_chain(&g), Err(Error::NotAChain(_))));
        assert!(rts_smooth(&g).is_err());
    }

    #[test]
    fn missing_link_is_disconnected() {
        let g = small_graph();
        let mut factors = g.factors().unwrap();
        factors.remove(2);
        let r = BlockTridiagonal::assemble(&g.knots, 2, &factors);
        assert!(matches!(r, Err(Error::NotAChain(_))));
    }

    #[test]
    fn information_is_block_tridiagonal() {
        let g = small_graph();
        let fg = GaussianFactorGraph::new(g.factors().unwrap());
        let order: Vec<(Key, usize)> = g.knots.iter().map(|k| (k.key, 2)).collect();
        let (info, _) = fg.dense_information(&order).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let blk = info.view((2 * i, 2 * j), (2, 2));
                if (i as i64 - j as i64).abs() > 1 {
                    assert!(blk.iter().all(|&v| v == 0.0));
                }
            }
        }
        assert!(rel_diff(&g.assemble().unwrap().to_dense(), &info) < 1e-14);
    }

    #[test]
    fn cost_at_solution_is_not_above_cost_at_truth() {
        let g = small_graph();
        let s = solve_chain(&g).unwrap();
        let truth: Vec<DVector<f64>> = g.knots.iter().map(|k| DVector::from_vec(vec![k.time * 0.5, 0.5])).collect();
        assert!(s.cost <= g.cost(&truth).unwrap());
    }
}
