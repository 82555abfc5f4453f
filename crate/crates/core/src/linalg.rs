//! Small dense helpers shared by the normal-form and frame code.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

/// The standard skew form `J = [[0, -1], [1, 0]]` of size `2L`.
pub fn symplectic_form(width: usize) -> DMatrix<f64> {
    let mut j = DMatrix::zeros(2 * width, 2 * width);
    for l in 0..width {
        j[(l, l + width)] = -1.0;
        j[(l + width, l)] = 1.0;
    }
    j
}

/// `J x` for a real vector `x = (top, bottom)`: returns `(-bottom, top)`.
pub fn apply_j(x: &[f64], out: &mut [f64]) {
    let width = x.len() / 2;
    for l in 0..width {
        out[l] = -x[l + width];
        out[l + width] = x[l];
    }
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

pub fn max_abs_c(m: &DMatrix<Complex64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, x| acc.max(x.norm()))
}

/// `max |T^t J T - J|`.
pub fn symplectic_residual(t: &DMatrix<f64>) -> f64 {
    let j = symplectic_form(t.nrows() / 2);
    max_abs(&(t.transpose() * &j * t - j))
}

pub fn identity_residual(m: &DMatrix<f64>) -> f64 {
    max_abs(&(m - DMatrix::identity(m.nrows(), m.ncols())))
}

pub fn identity_residual_c(m: &DMatrix<Complex64>) -> f64 {
    max_abs_c(&(m - DMatrix::identity(m.nrows(), m.ncols())))
}

pub fn to_complex(m: &DMatrix<f64>) -> DMatrix<Complex64> {
    m.map(|x| Complex64::new(x, 0.0))
}

/// Hermitian inner product `<a|b>` (conjugate-linear in `a`).
pub fn inner(a: &DVector<Complex64>, b: &DVector<Complex64>) -> Complex64 {
    a.iter().zip(b.iter()).map(|(x, y)| x.conj() * y).sum()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
