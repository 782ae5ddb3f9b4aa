//! Dense linear algebra glue over nalgebra.

use nalgebra::{DMatrix, DVector};

/// Lower Cholesky factor of `a + jitter·I`.
pub fn cholesky_jitter(a: &DMatrix<f64>, jitter: f64) -> Option<DMatrix<f64>> {
    let mut m = a.clone();
    for i in 0..m.nrows() {
        m[(i, i)] += jitter;
    }
    m.cholesky().map(|c| c.l())
}

/// 2-norm condition number.
pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    let sv = a.singular_values();
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Solves the symmetric positive semi-definite system `g x = b` for several
/// right-hand sides (columns of `b`), via Cholesky with an SVD minimum-norm
/// fallback.
pub fn solve_spd(g: &DMatrix<f64>, b: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if let Some(ch) = g.clone().cholesky() {
        let x = ch.solve(b);
        if x.iter().all(|v| v.is_finite()) {
            return Some(x);
        }
    }
    let svd = g.clone().svd(true, true);
    let x = svd.solve(b, 1e-13 * svd.singular_values.max()).ok()?;
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Solves a tridiagonal system in place (Thomas algorithm).
/// `lower[0]` and `upper[n-1]` are ignored.
pub fn solve_tridiagonal(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &mut [f64]) -> bool {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut beta = diag[0];
    if beta == 0.0 {
        return false;
    }
    rhs[0] /= beta;
    for i in 1..n {
        c[i - 1] = upper[i - 1] / beta;
        beta = diag[i] - lower[i] * c[i - 1];
        if beta == 0.0 || !beta.is_finite() {
            return false;
        }
        rhs[i] = (rhs[i] - lower[i] * rhs[i - 1]) / beta;
    }
    for i in (0..n - 1).rev() {
        rhs[i] -= c[i] * rhs[i + 1];
    }
    true
}

pub fn dvec(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tridiagonal_matches_dense() {
        let n = 6;
        let lower: Vec<f64> = (0..n).map(|i| -0.3 - 0.01 * i as f64).collect();
        let upper: Vec<f64> = (0..n).map(|i| -0.2 + 0.02 * i as f64).collect();
        let diag: Vec<f64> = (0..n).map(|i| 2.0 + 0.1 * i as f64).collect();
        let rhs: Vec<f64> = (0..n).map(|i| (i as f64).cos()).collect();
        let mut a = DMatrix::zeros(n, n);
        for i in 0..n {
            a[(i, i)] = diag[i];
            if i > 0 {
                a[(i, i - 1)] = lower[i];
            }
            if i + 1 < n {
                a[(i, i + 1)] = upper[i];
            }
        }
        let mut x = rhs.clone();
        assert!(solve_tridiagonal(&lower, &diag, &upper, &mut x));
        let r = &a * dvec(&x) - dvec(&rhs);
        assert!(r.amax() < 1e-14);
    }

    #[test]
    fn spd_solve_falls_back_on_singular() {
        let g = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let b = DMatrix::from_row_slice(2, 1, &[2.0, 2.0]);
        let x = solve_spd(&g, &b).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-12 && (x[1] - 1.0).abs() < 1e-12);
    }
}
