//! Small dense helpers shared by the solvers.

use crate::problem::{Matrix, Vector};

/// Relative singular-value cutoff for rank decisions and pseudo-inverses.
pub const PINV_CUTOFF: f64 = 1e-10;

/// Inverse of a square matrix, falling back to the pseudo-inverse when the
/// smallest singular value is below `PINV_CUTOFF · σ_max`.
///
/// The flag is `true` when the true inverse was used.
pub fn robust_inverse(m: &Matrix) -> (Matrix, bool) {
    let n = m.nrows();
    debug_assert_eq!(n, m.ncols());
    if n == 0 {
        return (Matrix::zeros(0, 0), true);
    }
    if n == 1 {
        let a = m[(0, 0)];
        return if a != 0.0 && a.is_finite() {
            (Matrix::from_element(1, 1, 1.0 / a), true)
        } else {
            (Matrix::zeros(1, 1), false)
        };
    }
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smax > 0.0 && smin > PINV_CUTOFF * smax {
        if let Some(inv) = m.clone().try_inverse() {
            return (inv, true);
        }
    }
    if smax == 0.0 {
        return (Matrix::zeros(n, n), false);
    }
    let pinv = svd
        .pseudo_inverse(PINV_CUTOFF * smax)
        .unwrap_or_else(|_| Matrix::zeros(n, n));
    (pinv, false)
}

/// Least-squares / minimum-norm solve of `m z = rhs` via the pseudo-inverse.
pub fn pinv_solve(m: &Matrix, rhs: &Vector) -> Vector {
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.max();
    if smax == 0.0 {
        return Vector::zeros(m.ncols());
    }
    svd.solve(rhs, PINV_CUTOFF * smax)
        .unwrap_or_else(|_| Vector::zeros(m.ncols()))
}

/// Smallest singular value (0 for an empty or rank-deficient wide matrix).
pub fn smallest_singular_value(m: &Matrix) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    if m.nrows() > m.ncols() {
        return 0.0;
    }
    m.clone().svd(false, false).singular_values.min()
}

/// Solve a symmetric positive definite system, regularizing if Cholesky fails.
pub fn solve_spd(h: &Matrix, rhs: &Vector) -> Vector {
    if let Some(chol) = h.clone().cholesky() {
        return chol.solve(rhs);
    }
    let scale = h.diagonal().amax().max(1.0);
    let mut reg = 1e-12 * scale;
    for _ in 0..12 {
        let shifted = h + Matrix::identity(h.nrows(), h.ncols()) * reg;
        if let Some(chol) = shifted.cholesky() {
            return chol.solve(rhs);
        }
        reg *= 100.0;
    }
    pinv_solve(h, rhs)
}
