//! Small dense helpers shared by the estimators.

use nalgebra::{convert, DMatrix, DVector, RealField};

use crate::error::{Error, Result};

/// Condition number above which a scatter/covariance matrix is ridged.
pub const MAX_CONDITION: f64 = 1e10;
/// Ridge size relative to the mean eigenvalue.
pub const RIDGE_FRACTION: f64 = 1e-6;

pub fn symmetrize<T: RealField + Copy>(m: &mut DMatrix<T>) {
    let half: T = convert(0.5);
    let n = m.nrows();
    for i in 0..n {
        for j in i + 1..n {
            let v = (m[(i, j)] + m[(j, i)]) * half;
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn max_asymmetry<T: RealField + Copy>(m: &DMatrix<T>) -> T {
    let mut worst = T::zero();
    for i in 0..m.nrows() {
        for j in i + 1..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn sym_eigenvalues<T: RealField + Copy>(m: &DMatrix<T>) -> Vec<T> {
    let mut ev: Vec<T> = m.clone().symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ev
}

/// Condition number of a symmetric matrix; infinite when the smallest
/// eigenvalue is not positive.
pub fn condition_number<T: RealField + Copy>(m: &DMatrix<T>) -> f64 {
    let ev = sym_eigenvalues(m);
    let (lo, hi) = (
        nalgebra::try_convert::<T, f64>(ev[0]).unwrap_or(f64::NAN),
        nalgebra::try_convert::<T, f64>(ev[ev.len() - 1]).unwrap_or(f64::NAN),
    );
    if lo <= 0.0 || !lo.is_finite() {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Adds `1e-6 * trace/d * I` when the condition number exceeds 1e10. When
/// the trace itself vanishes, `fallback_scale` stands in for `trace/d`.
/// Returns whether a ridge was added.
pub fn ridge_if_ill_conditioned<T: RealField + Copy>(
    m: &mut DMatrix<T>,
    fallback_scale: T,
) -> bool {
    if condition_number(m) <= MAX_CONDITION {
        return false;
    }
    let d: T = convert(m.nrows() as f64);
    let mut scale = m.trace() / d;
    if scale <= T::zero() {
        scale = fallback_scale;
    }
    let ridge = scale * convert(RIDGE_FRACTION);
    for i in 0..m.nrows() {
        m[(i, i)] += ridge;
    }
    true
}

/// Raises every eigenvalue of a symmetric matrix to at least `floor`.
/// Returns whether anything changed.
pub fn floor_eigenvalues<T: RealField + Copy>(m: &mut DMatrix<T>, floor: T) -> bool {
    let eig = m.clone().symmetric_eigen();
    if eig.eigenvalues.iter().all(|&v| v >= floor) {
        return false;
    }
    let clipped = eig.eigenvalues.map(|v| v.max(floor));
    let mut rebuilt =
        &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    symmetrize(&mut rebuilt);
    *m = rebuilt;
    true
}

/// Inverse of a symmetric positive definite matrix via Cholesky.
pub fn spd_inverse<T: RealField + Copy>(m: &DMatrix<T>, what: &str) -> Result<DMatrix<T>> {
    let chol = m
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numeric(format!("{what} is not positive definite")))?;
    let mut inv = chol.inverse();
    symmetrize(&mut inv);
    Ok(inv)
}

/// log det of a symmetric positive definite matrix.
pub fn spd_log_det<T: RealField + Copy>(m: &DMatrix<T>, what: &str) -> Result<T> {
    let chol = m
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numeric(format!("{what} is not positive definite")))?;
    let l = chol.l_dirty();
    let two: T = convert(2.0);
    Ok((0..m.nrows()).fold(T::zero(), |acc, i| acc + two * l[(i, i)].ln()))
}

pub fn quad_form<T: RealField + Copy>(x: &DVector<T>, m: &DMatrix<T>, y: &DVector<T>) -> T {
    x.dot(&(m * y))
}

pub fn all_finite<T: RealField + Copy>(m: &DMatrix<T>) -> bool {
    m.iter().all(|v| v.is_finite())
}
