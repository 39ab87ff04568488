//! Gaussian building blocks: keyed densities in moment form, quadratic factors in
//! information form, elimination into conditionals, and sequential variable
//! elimination over a factor graph with covariance recovery.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{check_square, check_symmetric, cholesky, symmetrize_upper, symmetrized};

/// Opaque variable identifier. `Key::symbol('x', 3)` reads as `x3`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Key(pub u64);

const INDEX_BITS: u32 = 56;

impl Key {
    pub fn symbol(tag: char, index: u64) -> Key {
        debug_assert!(index < (1 << INDEX_BITS));
        Key(((tag as u64 & 0xff) << INDEX_BITS) | index)
    }

    pub fn tag(self) -> Option<char> {
        let c = (self.0 >> INDEX_BITS) as u8 as char;
        c.is_ascii_alphabetic().then_some(c)
    }

    pub fn index(self) -> u64 {
        self.0 & ((1 << INDEX_BITS) - 1)
    }
}

impl fmt::Display for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.tag() {
            Some(c) => write!(f, "{c}{}", self.index()),
            None => write!(f, "{}", self.0),
        }
    }
}

impl fmt::Debug for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

/// Ordered list of keys with their dimensions; defines the stacking of vectors.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Scope {
    entries: Vec<(Key, usize)>,
}

impl Scope {
    pub fn new(entries: Vec<(Key, usize)>) -> Result<Scope> {
        let mut seen = BTreeSet::new();
        for (k, d) in &entries {
            if !seen.insert(*k) {
                return Err(Error::Invalid(format!("key {k} repeated in scope")));
            }
            if *d == 0 {
                return Err(Error::Dimension(format!("key {k} has zero dimension")));
            }
        }
        Ok(Scope { entries })
    }

    pub fn single(key: Key, dim: usize) -> Scope {
        Scope { entries: vec![(key, dim)] }
    }

    pub fn entries(&self) -> &[(Key, usize)] {
        &self.entries
    }

    pub fn keys(&self) -> impl Iterator<Item = Key> + '_ {
        self.entries.iter().map(|e| e.0)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.entries.iter().map(|e| e.1).sum()
    }

    pub fn contains(&self, key: Key) -> bool {
        self.entries.iter().any(|e| e.0 == key)
    }

    /// Offset and dimension of `key` in the stacked vector.
    pub fn locate(&self, key: Key) -> Option<(usize, usize)> {
        let mut off = 0;
        for &(k, d) in &self.entries {
            if k == key {
                return Some((off, d));
            }
            off += d;
        }
        None
    }

    fn push_or_check(&mut self, key: Key, dim: usize) -> Result<()> {
        match self.locate(key) {
            Some((_, d)) if d != dim => {
                Err(Error::Dimension(format!("key {key} appears with dimensions {d} and {dim}")))
            }
            Some(_) => Ok(()),
            None => {
                self.entries.push((key, dim));
                Ok(())
            }
        }
    }

    /// Stacks per-key values in scope order.
    pub fn stack(&self, values: &HashMap<Key, DVector<f64>>) -> Result<DVector<f64>> {
        let mut out = DVector::zeros(self.dim());
        let mut off = 0;
        for &(k, d) in &self.entries {
            let v = values.get(&k).ok_or(Error::UnknownKey(k))?;
            if v.len() != d {
                return Err(Error::Dimension(format!("value for {k} has length {}", v.len())));
            }
            out.rows_mut(off, d).copy_from(v);
            off += d;
        }
        Ok(out)
    }

    /// Index list selecting `keys` (in the given order) from this scope.
    fn indices(&self, keys: &[Key]) -> Result<Vec<usize>> {
        let mut idx = Vec::new();
        for &k in keys {
            let (off, d) = self.locate(k).ok_or(Error::UnknownKey(k))?;
            idx.extend(off..off + d);
        }
        Ok(idx)
    }

    fn sub(&self, keys: &[Key]) -> Result<Scope> {
        let mut entries = Vec::with_capacity(keys.len());
        for &k in keys {
            let (_, d) = self.locate(k).ok_or(Error::UnknownKey(k))?;
            entries.push((k, d));
        }
        Scope::new(entries)
    }
}

fn select_rows(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_iterator(idx.len(), idx.iter().map(|&i| v[i]))
}

fn select(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

/// Multivariate Gaussian over a keyed scope, in moment form.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianDensity {
    pub scope: Scope,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianDensity {
    /// Validates dimensions, symmetry and positive definiteness.
    pub fn new(scope: Scope, mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let n = scope.dim();
        if mean.len() != n {
            return Err(Error::Dimension(format!("mean has length {}, scope has {n}", mean.len())));
        }
        check_square(&cov, n, "covariance")?;
        check_symmetric(&cov, "covariance")?;
        cholesky(&cov, "covariance")?;
        Ok(GaussianDensity { scope, mean, cov: symmetrized(cov) })
    }

    pub fn single(key: Key, mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        GaussianDensity::new(Scope::single(key, d), mean, cov)
    }

    /// Marginal over `keys`, in the order given.
    pub fn marginal(&self, keys: &[Key]) -> Result<GaussianDensity> {
        let idx = self.scope.indices(keys)?;
        Ok(GaussianDensity {
            scope: self.scope.sub(keys)?,
            mean: select_rows(&self.mean, &idx),
            cov: select(&self.cov, &idx, &idx),
        })
    }

    /// Covariance block between two keys of the scope.
    pub fn block(&self, a: Key, b: Key) -> Result<DMatrix<f64>> {
        let (oa, da) = self.scope.locate(a).ok_or(Error::UnknownKey(a))?;
        let (ob, db) = self.scope.locate(b).ok_or(Error::UnknownKey(b))?;
        Ok(self.cov.view((oa, ob), (da, db)).into_owned())
    }

    pub fn mean_of(&self, key: Key) -> Result<DVector<f64>> {
        let (o, d) = self.scope.locate(key).ok_or(Error::UnknownKey(key))?;
        Ok(self.mean.rows(o, d).into_owned())
    }

    /// Information form whose cost is `0.5 (x-mu)^T P^-1 (x-mu)`.
    pub fn to_factor(&self) -> Result<QuadraticFactor> {
        let info = symmetrized(cholesky(&self.cov, "covariance")?.inverse());
        let vec = &info * &self.mean;
        let constant = 0.5 * self.mean.dot(&vec);
        QuadraticFactor::new(self.scope.clone(), info, vec, constant)
    }
}

/// Quadratic cost `0.5 x^T L x - h^T x + c` over the stacked scope variables.
///
/// For factors built from residuals the constant is chosen so the value equals
/// half the squared Mahalanobis norm of the residual.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticFactor {
    pub scope: Scope,
    pub info: DMatrix<f64>,
    pub vec: DVector<f64>,
    pub constant: f64,
}

impl QuadraticFactor {
    pub fn new(scope: Scope, mut info: DMatrix<f64>, vec: DVector<f64>, constant: f64) -> Result<Self> {
        let n = scope.dim();
        check_square(&info, n, "information matrix")?;
        if vec.len() != n {
            return Err(Error::Dimension(format!("information vector has length {}", vec.len())));
        }
        symmetrize_upper(&mut info);
        Ok(QuadraticFactor { scope, info, vec, constant })
    }

    /// Factor for the residual `J x - b` with noise covariance `cov`.
    pub fn from_residual(scope: Scope, jacobian: &DMatrix<f64>, b: &DVector<f64>, cov: &DMatrix<f64>) -> Result<Self> {
        let rows = b.len();
        if jacobian.nrows() != rows || jacobian.ncols() != scope.dim() {
            return Err(Error::Dimension(format!(
                "jacobian is {}x{}, expected {rows}x{}",
                jacobian.nrows(),
                jacobian.ncols(),
                scope.dim()
            )));
        }
        check_square(cov, rows, "noise covariance")?;
        let chol = cholesky(cov, "noise covariance")?;
        let l = chol.l();
        let jw = l.solve_lower_triangular(jacobian).ok_or_else(|| Error::Numerical("whitening".into()))?;
        let bw = l.solve_lower_triangular(b).ok_or_else(|| Error::Numerical("whitening".into()))?;
        let info = jw.transpose() * &jw;
        let vec = jw.transpose() * &bw;
        QuadraticFactor::new(scope, info, vec, 0.5 * bw.norm_squared())
    }

    /// Factor for the linearized residual `e0 + J dx`.
    pub fn from_linearized(
        scope: Scope,
        jacobian: &DMatrix<f64>,
        e0: &DVector<f64>,
        cov: &DMatrix<f64>,
    ) -> Result<Self> {
        QuadraticFactor::from_residual(scope, jacobian, &(-e0), cov)
    }

    pub fn evaluate(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.info * x)) - self.vec.dot(x) + self.constant
    }

    pub fn evaluate_at(&self, values: &HashMap<Key, DVector<f64>>) -> Result<f64> {
        Ok(self.evaluate(&self.scope.stack(values)?))
    }

    /// Moment form; fails when the information matrix is not positive definite.
    pub fn to_density(&self) -> Result<GaussianDensity> {
        let chol = cholesky(&self.info, "information matrix")?;
        let mean = chol.solve(&self.vec);
        Ok(GaussianDensity { scope: self.scope.clone(), mean, cov: symmetrized(chol.inverse()) })
    }

    fn sorted_keys(&self) -> Vec<Key> {
        let mut k: Vec<Key> = self.scope.keys().collect();
        k.sort();
        k
    }
}

/// Product of factors: union scope in first-appearance order, blocks summed.
pub fn fuse(factors: &[&QuadraticFactor]) -> Result<QuadraticFactor> {
    let mut scope = Scope::default();
    for f in factors {
        for &(k, d) in f.scope.entries() {
            scope.push_or_check(k, d)?;
        }
    }
    let n = scope.dim();
    let mut info = DMatrix::zeros(n, n);
    let mut vec = DVector::zeros(n);
    let mut constant = 0.0;
    for f in factors {
        let offs: Vec<(usize, usize, usize)> = f
            .scope
            .entries()
            .iter()
            .scan(0, |local, &(k, d)| {
                let l = *local;
                *local += d;
                Some((l, scope.locate(k).unwrap().0, d))
            })
            .collect();
        for &(li, gi, di) in &offs {
            let mut v = vec.rows_mut(gi, di);
            v += f.vec.rows(li, di);
            for &(lj, gj, dj) in &offs {
                let mut b = info.view_mut((gi, gj), (di, dj));
                b += f.info.view((li, lj), (di, dj));
            }
        }
        constant += f.constant;
    }
    QuadraticFactor::new(scope, info, vec, constant)
}

/// `p(frontal | separator) = N(offset + gain * s, cov)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalGaussian {
    pub frontal: Scope,
    pub separator: Scope,
    pub gain: DMatrix<f64>,
    pub offset: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// Inverse of `cov`, kept so the conditional can be turned back into a factor.
    pub info: DMatrix<f64>,
}

impl ConditionalGaussian {
    pub fn mean_given(&self, separator: &DVector<f64>) -> DVector<f64> {
        &self.offset + &self.gain * separator
    }

    /// Quadratic factor over frontal and separator variables.
    pub fn to_factor(&self) -> Result<QuadraticFactor> {
        let nf = self.frontal.dim();
        let ns = self.separator.dim();
        let mut entries = self.frontal.entries().to_vec();
        entries.extend_from_slice(self.separator.entries());
        let scope = Scope::new(entries)?;
        // residual x - G s - o
        let mut j = DMatrix::zeros(nf, nf + ns);
        j.view_mut((0, 0), (nf, nf)).fill_with_identity();
        j.view_mut((0, nf), (nf, ns)).copy_from(&(-&self.gain));
        let lj = &self.info * &j;
        let info = j.transpose() * &lj;
        let vec = lj.transpose() * &self.offset;
        let constant = 0.5 * self.offset.dot(&(&self.info * &self.offset));
        QuadraticFactor::new(scope, info, vec, constant)
    }
}

/// Splits a factor into a conditional on `frontal` and a residual factor on the rest.
///
/// Multiplying the two back together reproduces the input factor.
pub fn eliminate(product: &QuadraticFactor, frontal: &[Key]) -> Result<(ConditionalGaussian, QuadraticFactor)> {
    let fscope = product.scope.sub(frontal)?;
    let skeys: Vec<Key> = product.scope.keys().filter(|k| !frontal.contains(k)).collect();
    let sscope = product.scope.sub(&skeys)?;
    let fi = product.scope.indices(frontal)?;
    let si = product.scope.indices(&skeys)?;

    let lxx = select(&product.info, &fi, &fi);
    let lxs = select(&product.info, &fi, &si);
    let lss = select(&product.info, &si, &si);
    let hx = select_rows(&product.vec, &fi);
    let hs = select_rows(&product.vec, &si);

    let chol = match nalgebra::Cholesky::new(lxx.clone()) {
        Some(c) if lxx.iter().all(|v| v.is_finite()) => c,
        _ => return Err(unconstrained(&fscope, &lxx)),
    };
    let cov = symmetrized(chol.inverse());
    let gain = -chol.solve(&lxs);
    let offset = chol.solve(&hx);
    let mut rinfo = &lss + lxs.transpose() * &gain;
    symmetrize_upper(&mut rinfo);
    let rvec = &hs + gain.transpose() * &hx;
    let rconst = product.constant - 0.5 * hx.dot(&offset);
    let residual = QuadraticFactor::new(sscope.clone(), rinfo, rvec, rconst)?;
    Ok((ConditionalGaussian { frontal: fscope, separator: sscope, gain, offset, cov, info: lxx }, residual))
}

fn unconstrained(fscope: &Scope, lxx: &DMatrix<f64>) -> Error {
    let mut keys = Vec::new();
    let mut off = 0;
    for &(k, d) in fscope.entries() {
        let b = lxx.view((off, off), (d, d)).into_owned();
        if nalgebra::Cholesky::new(b).is_none() {
            keys.push(k);
        }
        off += d;
    }
    if keys.is_empty() {
        keys = fscope.keys().collect();
    }
    Error::Unconstrained { keys }
}

/// Collection of quadratic factors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianFactorGraph {
    pub factors: Vec<QuadraticFactor>,
}

impl GaussianFactorGraph {
    pub fn new(factors: Vec<QuadraticFactor>) -> Self {
        GaussianFactorGraph { factors }
    }

    pub fn push(&mut self, f: QuadraticFactor) {
        self.factors.push(f);
    }

    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }

    /// Key dimensions over all factors.
    pub fn key_dims(&self) -> Result<HashMap<Key, usize>> {
        let mut dims = HashMap::new();
        for f in &self.factors {
            for &(k, d) in f.scope.entries() {
                if let Some(old) = dims.insert(k, d) {
                    if old != d {
                        return Err(Error::Dimension(format!("key {k} has dimensions {old} and {d}")));
                    }
                }
            }
        }
        Ok(dims)
    }

    pub fn cost(&self, values: &HashMap<Key, DVector<f64>>) -> Result<f64> {
        self.factors.iter().map(|f| f.evaluate_at(values)).sum()
    }

    /// Merges factors that share the same key set, keeping first-appearance order.
    pub fn fused_by_scope(&self) -> Result<GaussianFactorGraph> {
        let mut groups: Vec<Vec<&QuadraticFactor>> = Vec::new();
        let mut index: HashMap<Vec<Key>, usize> = HashMap::new();
        for f in &self.factors {
            let sk = f.sorted_keys();
            let slot = *index.entry(sk).or_insert_with(|| {
                groups.push(Vec::new());
                groups.len() - 1
            });
            groups[slot].push(f);
        }
        let factors =
            groups.iter().map(|g| if g.len() == 1 { Ok(g[0].clone()) } else { fuse(g) }).collect::<Result<Vec<_>>>()?;
        Ok(GaussianFactorGraph { factors })
    }

    /// Dense information matrix and vector with variables stacked in `ordering`.
    pub fn dense_information(&self, ordering: &[(Key, usize)]) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let scope = Scope::new(ordering.to_vec())?;
        let n = scope.dim();
        let mut info = DMatrix::zeros(n, n);
        let mut vec = DVector::zeros(n);
        for f in &self.factors {
            let mut local = 0;
            let mut offs = Vec::with_capacity(f.scope.len());
            for &(k, d) in f.scope.entries() {
                let (g, dg) = scope.locate(k).ok_or(Error::UnknownKey(k))?;
                if dg != d {
                    return Err(Error::Dimension(format!("key {k} has dimensions {dg} and {d}")));
                }
                offs.push((local, g, d));
                local += d;
            }
            for &(li, gi, di) in &offs {
                let mut v = vec.rows_mut(gi, di);
                v += f.vec.rows(li, di);
                for &(lj, gj, dj) in &offs {
                    let mut b = info.view_mut((gi, gj), (di, dj));
                    b += f.info.view((li, lj), (di, dj));
                }
            }
        }
        Ok((info, vec))
    }

    /// Eliminates variables one at a time in `ordering`.
    pub fn eliminate_sequential(&self, ordering: &[Key]) -> Result<BayesNet> {
        let dims = self.key_dims()?;
        let unique: BTreeSet<Key> = ordering.iter().copied().collect();
        if unique.len() != ordering.len() {
            return Err(Error::Invalid("ordering repeats a key".into()));
        }
        for k in dims.keys() {
            if !unique.contains(k) {
                return Err(Error::Invalid(format!("ordering misses key {k}")));
            }
        }
        let mut slots: Vec<Option<QuadraticFactor>> = self.factors.iter().cloned().map(Some).collect();
        let mut touching: HashMap<Key, Vec<usize>> = HashMap::new();
        for (i, f) in self.factors.iter().enumerate() {
            for k in f.scope.keys() {
                touching.entry(k).or_default().push(i);
            }
        }
        let mut conditionals = Vec::with_capacity(ordering.len());
        let mut constant = 0.0;
        for &key in ordering {
            if !dims.contains_key(&key) {
                return Err(Error::UnknownKey(key));
            }
            let ids = touching.remove(&key).unwrap_or_default();
            let gathered: Vec<QuadraticFactor> = ids.into_iter().filter_map(|i| slots[i].take()).collect();
            if gathered.is_empty() {
                return Err(Error::Unconstrained { keys: vec![key] });
            }
            let refs: Vec<&QuadraticFactor> = gathered.iter().collect();
            let product = fuse(&refs)?;
            let (cond, residual) = eliminate(&product, &[key])?;
            conditionals.push(cond);
            if residual.scope.is_empty() {
                constant += residual.constant;
            } else {
                let id = slots.len();
                for k in residual.scope.keys() {
                    touching.entry(k).or_default().push(id);
                }
                slots.push(Some(residual));
            }
        }
        Ok(BayesNet { conditionals, constant })
    }
}

/// Chain of conditionals in elimination order.
#[derive(Clone, Debug, PartialEq)]
pub struct BayesNet {
    pub conditionals: Vec<ConditionalGaussian>,
    /// Minimum value of the eliminated cost.
    pub constant: f64,
}

impl BayesNet {
    /// Back-substitution for the joint mode.
    pub fn solve(&self) -> HashMap<Key, DVector<f64>> {
        let mut values: HashMap<Key, DVector<f64>> = HashMap::new();
        for c in self.conditionals.iter().rev() {
            let s = c.separator.stack(&values).expect("separator solved before frontal");
            let x = c.mean_given(&s);
            let mut off = 0;
            for &(k, d) in c.frontal.entries() {
                values.insert(k, x.rows(off, d).into_owned());
                off += d;
            }
        }
        values
    }

    /// Marginal covariances and the cross-covariances between each variable and its separator.
    pub fn covariances(&self) -> CovarianceTable {
        let mut table = CovarianceTable::default();
        for c in self.conditionals.iter().rev() {
            let skeys: Vec<(Key, usize)> = c.separator.entries().to_vec();
            let ns = c.separator.dim();
            let mut css = DMatrix::zeros(ns, ns);
            let mut oi = 0;
            for &(a, da) in &skeys {
                let mut oj = 0;
                for &(b, db) in &skeys {
                    let blk = table.get(a, b).expect("separator pair recovered earlier");
                    css.view_mut((oi, oj), (da, db)).copy_from(&blk);
                    oj += db;
                }
                oi += da;
            }
            let cfs = &c.gain * &css;
            let mut cff = &c.cov + &cfs * c.gain.transpose();
            symmetrize_upper(&mut cff);
            let mut fo = 0;
            for &(f, df) in c.frontal.entries() {
                let mut fo2 = 0;
                for &(g, dg) in c.frontal.entries() {
                    table.insert(f, g, cff.view((fo, fo2), (df, dg)).into_owned());
                    fo2 += dg;
                }
                let mut so = 0;
                for &(s, ds) in &skeys {
                    table.insert(f, s, cfs.view((fo, so), (df, ds)).into_owned());
                    so += ds;
                }
                fo += df;
            }
        }
        table
    }
}

/// Covariance blocks indexed by key pairs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CovarianceTable {
    blocks: HashMap<(Key, Key), DMatrix<f64>>,
}

impl CovarianceTable {
    pub fn insert(&mut self, a: Key, b: Key, block: DMatrix<f64>) {
        if a <= b {
            self.blocks.insert((a, b), block);
        } else {
            self.blocks.insert((b, a), block.transpose());
        }
    }

    /// `Cov(a, b)`; `None` when the pair was never recovered.
    pub fn get(&self, a: Key, b: Key) -> Option<DMatrix<f64>> {
        if a <= b {
            self.blocks.get(&(a, b)).cloned()
        } else {
            self.blocks.get(&(b, a)).map(|m| m.transpose())
        }
    }

    pub fn marginal(&self, a: Key) -> Option<DMatrix<f64>> {
        self.get(a, a)
    }

    /// Joint covariance over `keys`.
    pub fn joint(&self, keys: &[Key]) -> Result<DMatrix<f64>> {
        let dims: Vec<usize> = keys
            .iter()
            .map(|&k| self.marginal(k).map(|m| m.nrows()).ok_or(Error::UnknownKey(k)))
            .collect::<Result<_>>()?;
        let n = dims.iter().sum();
        let mut out = DMatrix::zeros(n, n);
        let mut oi = 0;
        for (i, &a) in keys.iter().enumerate() {
            let mut oj = 0;
            for (j, &b) in keys.iter().enumerate() {
                let blk = self
                    .get(a, b)
                    .ok_or_else(|| Error::Invalid(format!("cross-covariance between {a} and {b} was not recovered")))?;
                out.view_mut((oi, oj), (dims[i], dims[j])).copy_from(&blk);
                oj += dims[j];
            }
            oi += dims[i];
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn k(i: u64) -> Key {
        Key::symbol('x', i)
    }

    fn m(r: usize, c: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(r, c, v)
    }

    #[test]
    fn key_display() {
        assert_eq!(Key::symbol('x', 12).to_string(), "x12");
        assert_eq!(Key::symbol('v', 0).index(), 0);
        assert_eq!(Key(5).to_string(), "5");
    }

    #[test]
    fn marginal_of_joint_picks_blocks() {
        let scope = Scope::new(vec![(k(0), 1), (k(1), 1)]).unwrap();
        let d = GaussianDensity::new(scope, DVector::from_vec(vec![0.0, 0.0]), m(2, 2, &[2.0, 1.0, 1.0, 2.0])).unwrap();
        let mg = d.marginal(&[k(0)]).unwrap();
        assert_eq!(mg.mean[0], 0.0);
        assert_eq!(mg.cov[(0, 0)], 2.0);
    }

    #[test]
    fn eliminate_small_joint() {
        let scope = Scope::new(vec![(k(0), 1), (k(1), 1)]).unwrap();
        let d = GaussianDensity::new(scope, DVector::zeros(2), m(2, 2, &[2.0, 1.0, 1.0, 2.0])).unwrap();
        let (c, r) = eliminate(&d.to_factor().unwrap(), &[k(0)]).unwrap();
        assert!((c.gain[(0, 0)] - 0.5).abs() < 1e-14);
        assert!((c.cov[(0, 0)] - 1.5).abs() < 1e-14);
        assert!(c.offset[0].abs() < 1e-14);
        let rd = r.to_density().unwrap();
        assert!((rd.cov[(0, 0)] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn eliminate_everything_leaves_constant() {
        let d = GaussianDensity::single(k(0), DVector::from_vec(vec![1.0, -2.0]), DMatrix::identity(2, 2)).unwrap();
        let (c, r) = eliminate(&d.to_factor().unwrap(), &[k(0)]).unwrap();
        assert!(r.scope.is_empty());
        assert!(r.constant.abs() < 1e-14);
        assert!((c.offset[1] + 2.0).abs() < 1e-14);
    }

    #[test]
    fn singular_frontal_names_key() {
        let scope = Scope::new(vec![(k(0), 1), (k(1), 1)]).unwrap();
        let f = QuadraticFactor::new(scope, m(2, 2, &[0.0, 0.0, 0.0, 1.0]), DVector::zeros(2), 0.0).unwrap();
        match eliminate(&f, &[k(0)]) {
            Err(Error::Unconstrained { keys }) => assert_eq!(keys, vec![k(0)]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn asymmetric_covariance_rejected() {
        let r = GaussianDensity::single(k(0), DVector::zeros(2), m(2, 2, &[1.0, 0.5, 0.0, 1.0]));
        assert!(matches!(r, Err(Error::NotPositiveDefinite(_))));
        let r = GaussianDensity::single(k(0), DVector::zeros(2), m(2, 2, &[1.0, 2.0, 2.0, 1.0]));
        assert!(matches!(r, Err(Error::NotPositiveDefinite(_))));
    }

    #[test]
    fn fuse_rejects_dimension_clash() {
        let a = QuadraticFactor::new(Scope::single(k(0), 1), DMatrix::identity(1, 1), DVector::zeros(1), 0.0).unwrap();
        let b = QuadraticFactor::new(Scope::single(k(0), 2), DMatrix::identity(2, 2), DVector::zeros(2), 0.0).unwrap();
        assert!(matches!(fuse(&[&a, &b]), Err(Error::Dimension(_))));
    }

    #[test]
    fn eliminating_unknown_key_fails() {
        let a = QuadraticFactor::new(Scope::single(k(0), 1), DMatrix::identity(1, 1), DVector::zeros(1), 0.0).unwrap();
        assert_eq!(eliminate(&a, &[k(9)]).unwrap_err(), Error::UnknownKey(k(9)));
    }

    #[test]
    fn graph_without_factor_on_key_is_unconstrained() {
        let a = QuadraticFactor::new(Scope::single(k(0), 1), DMatrix::identity(1, 1), DVector::zeros(1), 0.0).unwrap();
        let g = GaussianFactorGraph::new(vec![a]);
        assert!(g.eliminate_sequential(&[k(0), k(1)]).is_err());
    }

    fn random_spd(n: usize, seed: &[f64]) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |i, j| seed[(i * n + j) % seed.len()] + if i == j { 0.1 } else { 0.0 });
        &a * a.transpose() + DMatrix::identity(n, n) * 0.5
    }

    fn chain_graph(vals: &[f64], n: usize) -> GaussianFactorGraph {
        let mut g = GaussianFactorGraph::default();
        for i in 0..n as u64 {
            let info = random_spd(2, &vals[(i as usize) % 3..]);
            let vec = DVector::from_vec(vec![vals[i as usize % vals.len()], 1.0]);
            g.push(QuadraticFactor::new(Scope::single(k(i), 2), info, vec, 0.0).unwrap());
            if i > 0 {
                let info = random_spd(4, &vals[(i as usize) % 5..]) * 0.3;
                let scope = Scope::new(vec![(k(i - 1), 2), (k(i), 2)]).unwrap();
                g.push(QuadraticFactor::new(scope, info, DVector::zeros(4), 0.0).unwrap());
            }
        }
        g
    }

    proptest! {
        #[test]
        fn fusion_is_commutative_and_associative(vals in proptest::collection::vec(-2.0f64..2.0, 16)) {
            let a = QuadraticFactor::new(Scope::new(vec![(k(0), 2)]).unwrap(), random_spd(2, &vals), DVector::from_vec(vals[..2].to_vec()), 0.3).unwrap();
            let b = QuadraticFactor::new(Scope::new(vec![(k(0), 2), (k(1), 1)]).unwrap(), random_spd(3, &vals[3..]), DVector::from_vec(vals[4..7].to_vec()), 0.1).unwrap();
            let c = QuadraticFactor::new(Scope::new(vec![(k(1), 1)]).unwrap(), random_spd(1, &vals[7..]), DVector::from_vec(vals[9..10].to_vec()), 0.0).unwrap();
            let ab_c = fuse(&[&fuse(&[&a, &b]).unwrap(), &c]).unwrap();
            let a_bc = fuse(&[&a, &fuse(&[&b, &c]).unwrap()]).unwrap();
            let cba = fuse(&[&c, &b, &a]).unwrap();
            let x = DVector::from_vec(vec![0.3, -0.7, 1.1]);
            let mut xv = HashMap::new();
            xv.insert(k(0), x.rows(0, 2).into_owned());
            xv.insert(k(1), x.rows(2, 1).into_owned());
            let v1 = ab_c.evaluate_at(&xv).unwrap();
            prop_assert!((v1 - a_bc.evaluate_at(&xv).unwrap()).abs() < 1e-10 * (1.0 + v1.abs()));
            prop_assert!((v1 - cba.evaluate_at(&xv).unwrap()).abs() < 1e-10 * (1.0 + v1.abs()));
        }

        #[test]
        fn conditional_times_residual_reproduces_product(vals in proptest::collection::vec(-2.0f64..2.0, 20)) {
            let scope = Scope::new(vec![(k(0), 2), (k(1), 1), (k(2), 2)]).unwrap();
            let f = QuadraticFactor::new(scope, random_spd(5, &vals), DVector::from_vec(vals[..5].to_vec()), 0.7).unwrap();
            let (c, r) = eliminate(&f, &[k(1), k(0)]).unwrap();
            let back = fuse(&[&c.to_factor().unwrap(), &r]).unwrap();
            let idx = back.scope.indices(&[k(0), k(1), k(2)]).unwrap();
            let info = select(&back.info, &idx, &idx);
            let vec = select_rows(&back.vec, &idx);
            prop_assert!((info - &f.info).amax() < 1e-9 * (1.0 + f.info.amax()));
            prop_assert!((vec - &f.vec).amax() < 1e-9 * (1.0 + f.vec.amax()));
            prop_assert!((back.constant - f.constant).abs() < 1e-9 * (1.0 + f.constant.abs()));
            prop_assert!(c.cov.clone() == c.cov.transpose());
        }

        #[test]
        fn elimination_order_does_not_change_the_answer(vals in proptest::collection::vec(-2.0f64..2.0, 12)) {
            let g = chain_graph(&vals, 5);
            let fwd: Vec<Key> = (0..5).map(k).collect();
            let rev: Vec<Key> = (0..5).rev().map(k).collect();
            let mixed = vec![k(2), k(0), k(4), k(1), k(3)];
            let b1 = g.eliminate_sequential(&fwd).unwrap();
            let s1 = b1.solve();
            let c1 = b1.covariances();
            for order in [rev, mixed] {
                let b2 = g.eliminate_sequential(&order).unwrap();
                let s2 = b2.solve();
                let c2 = b2.covariances();
                prop_assert!((b1.constant - b2.constant).abs() < 1e-9 * (1.0 + b1.constant.abs()));
                for i in 0..5 {
                    prop_assert!((&s1[&k(i)] - &s2[&k(i)]).amax() < 1e-9);
                    prop_assert!((c1.marginal(k(i)).unwrap() - c2.marginal(k(i)).unwrap()).amax() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn covariances_match_dense_inverse() {
        let vals = [0.3, -1.2, 0.8, 1.5, -0.4, 0.9, 0.1, -0.6, 1.1, 0.2, -0.3, 0.7];
        let g = chain_graph(&vals, 6);
        let order: Vec<(Key, usize)> = (0..6).map(|i| (k(i), 2)).collect();
        let (info, vec) = g.dense_information(&order).unwrap();
        let cov = info.clone().try_inverse().unwrap();
        let mean = &cov * vec;
        let bn = g.eliminate_sequential(&order.iter().map(|e| e.0).collect::<Vec<_>>()).unwrap();
        let sol = bn.solve();
        let table = bn.covariances();
        for i in 0..6 {
            let mi = mean.rows(2 * i, 2).into_owned();
            assert!((&sol[&k(i as u64)] - mi).amax() < 1e-10);
            let ci = cov.view((2 * i, 2 * i), (2, 2)).into_owned();
            assert!((table.marginal(k(i as u64)).unwrap() - ci).amax() < 1e-10);
            if i > 0 {
                let cx = cov.view((2 * i, 2 * i - 2), (2, 2)).into_owned();
                assert!((table.get(k(i as u64), k(i as u64 - 1)).unwrap() - cx).amax() < 1e-10);
            }
        }
        // minimum of the cost equals the eliminated constant
        let cost = g.cost(&sol).unwrap();
        assert!((cost - bn.constant).abs() < 1e-9);
    }

    #[test]
    fn fused_by_scope_merges_same_key_sets() {
        let vals = [0.5, -0.2, 0.1, 0.9, 0.4, 0.3];
        let mut g = chain_graph(&vals, 3);
        let dup = g.factors[1].clone();
        g.push(dup);
        let fused = g.fused_by_scope().unwrap();
        assert_eq!(fused.len(), g.len() - 1);
        let order: Vec<Key> = (0..3).map(k).collect();
        let a = g.eliminate_sequential(&order).unwrap().solve();
        let b = fused.eliminate_sequential(&order).unwrap().solve();
        for i in 0..3 {
            assert!((&a[&k(i)] - &b[&k(i)]).amax() < 1e-12);
        }
    }
}
