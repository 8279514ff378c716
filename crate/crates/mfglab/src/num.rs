//! Small numeric utilities shared across the flow, value and master modules.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Composite quadrature of uniformly sampled values with spacing `h`.
///
/// Uses Simpson's rule on an even number of intervals; when the count is odd
/// the final interval is handled by the three-point Newton-Cotes closed rule,
/// keeping the whole estimate at fourth order.
pub fn integrate_uniform(values: &[f64], h: f64) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    if n == 2 {
        return 0.5 * h * (values[0] + values[1]);
    }
    let intervals = n - 1;
    let even_part = if intervals % 2 == 0 { intervals } else { intervals - 1 };
    let mut s = 0.0;
    let mut k = 0;
    while k < even_part {
        s += h / 3.0 * (values[k] + 4.0 * values[k + 1] + values[k + 2]);
        k += 2;
    }
    if intervals % 2 == 1 {
        // Last interval via the backward three-point rule, still O(h^4).
        let (a, b, c) = (values[n - 3], values[n - 2], values[n - 1]);
        s += h / 12.0 * (-a + 8.0 * b + 5.0 * c);
    }
    s
}

/// Minimum eigenvalue of a symmetric matrix; symmetrizes first to absorb
/// floating-point asymmetry.
pub fn min_eigenvalue(mat: &DMatrix<f64>) -> f64 {
    let sym = (mat + mat.transpose()) * 0.5;
    sym.symmetric_eigen()
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |a, &b| a.min(b))
}

/// Solves `A x = b` by LU with partial pivoting.
pub fn lu_solve(a: &DMatrix<f64>, b: &[f64], what: &str) -> Result<Vec<f64>> {
    let n = b.len();
    let lu = a.clone().lu();
    let rhs = nalgebra::DVector::from_column_slice(b);
    match lu.solve(&rhs) {
        Some(x) if x.iter().all(|v| v.is_finite()) => Ok(x.iter().copied().collect()),
        _ => Err(Error::SingularMatrix(format!("{what} ({n} x {n})"))),
    }
}

/// Infinity norm of a slice.
pub fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, &b| a.max(b.abs()))
}

/// Euclidean norm of a slice.
pub fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
