//! Small dense helpers shared by the estimation modules.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Mirror the upper triangle into the lower one.
pub fn symmetrize_upper(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for j in 0..n {
        for i in 0..j {
            m[(j, i)] = m[(i, j)];
        }
    }
}

pub fn symmetrized(mut m: DMatrix<f64>) -> DMatrix<f64> {
    symmetrize_upper(&mut m);
    m
}

/// Average with the transpose; used after products that should be symmetric.
pub fn sym_avg(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn check_square(m: &DMatrix<f64>, n: usize, what: &str) -> Result<()> {
    if m.nrows() != n || m.ncols() != n {
        return Err(Error::Dimension(format!("{what} is {}x{}, expected {n}x{n}", m.nrows(), m.ncols())));
    }
    Ok(())
}

pub fn check_symmetric(m: &DMatrix<f64>, what: &str) -> Result<()> {
    let scale = 1.0 + m.amax();
    if (m - m.transpose()).amax() > 1e-9 * scale {
        return Err(Error::NotPositiveDefinite(format!("{what} is not symmetric")));
    }
    Ok(())
}

pub fn cholesky(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("{what} has non-finite entries")));
    }
    Cholesky::new(symmetrized(m.clone())).ok_or_else(|| Error::NotPositiveDefinite(what.to_string()))
}

/// Inverse of a symmetric positive-definite matrix, symmetric to the last bit.
pub fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    Ok(symmetrized(cholesky(m, what)?.inverse()))
}

pub fn is_spd(m: &DMatrix<f64>) -> bool {
    check_symmetric(m, "").is_ok() && Cholesky::new(symmetrized(m.clone())).is_some()
}

/// Row-major upper triangle (including the diagonal).
pub fn upper_triangle(m: &DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows();
    let mut out = Vec::with_capacity(n * (n + 1) / 2);
    for i in 0..n {
        for j in i..n {
            out.push(m[(i, j)]);
        }
    }
    out
}

/// Inverse of [`upper_triangle`].
pub fn from_upper_triangle(n: usize, values: &[f64]) -> Result<DMatrix<f64>> {
    if values.len() != n * (n + 1) / 2 {
        return Err(Error::Dimension(format!("{} upper-triangle entries for a {n}x{n} matrix", values.len())));
    }
    let mut m = DMatrix::zeros(n, n);
    let mut it = values.iter();
    for i in 0..n {
        for j in i..n {
            let v = *it.next().unwrap();
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    Ok(m)
}

pub fn block_diag(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let n: usize = blocks.iter().map(|b| b.nrows()).sum();
    let m: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(n, m);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

pub fn vstack(parts: &[&DVector<f64>]) -> DVector<f64> {
    let n = parts.iter().map(|p| p.len()).sum();
    let mut out = DVector::zeros(n);
    let mut r = 0;
    for p in parts {
        out.rows_mut(r, p.len()).copy_from(p);
        r += p.len();
    }
    out
}

/// Relative difference `|a-b| / max(1, |b|)` in the max norm.
pub fn rel_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax() / b.amax().max(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upper_triangle_round_trip() {
        let m = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 2.0, 1.0, 5.0, 3.0, 2.0, 3.0, 6.0]);
        let u = upper_triangle(&m);
        assert_eq!(u, vec![4.0, 1.0, 2.0, 5.0, 3.0, 6.0]);
        assert_eq!(from_upper_triangle(3, &u).unwrap(), m);
        assert!(from_upper_triangle(3, &u[..5]).is_err());
    }

    #[test]
    fn spd_inverse_rejects_indefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(spd_inverse(&m, "m"), Err(Error::NotPositiveDefinite(_))));
        let nan = DMatrix::from_element(1, 1, f64::NAN);
        assert!(matches!(spd_inverse(&nan, "m"), Err(Error::Numerical(_))));
    }

    #[test]
    fn symmetrize_mirrors_upper() {
        let mut m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 7.0, 3.0]);
        symmetrize_upper(&mut m);
        assert_eq!(m[(1, 0)], 2.0);
    }
}
