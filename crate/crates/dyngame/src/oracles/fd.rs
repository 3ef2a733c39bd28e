//! Central finite-difference helpers.
//!
//! These are the independent reference for every analytic derivative in the
//! kit: they only ever call value-level functions, never the analytic
//! derivative code they are used to check.

use nalgebra::{DMatrix, DVector};

/// Step size for central differences around `x`, scaled to the magnitude of
/// the coordinate. `eps^(1/3)` balances truncation against rounding for f64.
pub fn fd_step(x: f64) -> f64 {
    6.0e-6 * (1.0 + x.abs())
}

/// Central-difference gradient of a scalar function.
pub fn grad<F: Fn(&DVector<f64>) -> f64>(f: F, x: &DVector<f64>) -> DVector<f64> {
    let mut g = DVector::zeros(x.len());
    for k in 0..x.len() {
        let h = fd_step(x[k]);
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[k] += h;
        xm[k] -= h;
        g[k] = (f(&xp) - f(&xm)) / (2.0 * h);
    }
    g
}

/// Central-difference Jacobian of a vector function (rows = outputs).
pub fn jacobian<F: Fn(&DVector<f64>) -> DVector<f64>>(
    f: F,
    x: &DVector<f64>,
    out_dim: usize,
) -> DMatrix<f64> {
    let mut jac = DMatrix::zeros(out_dim, x.len());
    for k in 0..x.len() {
        let h = fd_step(x[k]);
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[k] += h;
        xm[k] -= h;
        let col = (f(&xp) - f(&xm)) / (2.0 * h);
        jac.set_column(k, &col);
    }
    jac
}

/// Relative error between two scalars with a unit floor, so near-zero values
/// are compared absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1.0_f64.max(a.abs()).max(b.abs())
}

/// Worst-entry relative error between two matrices of identical shape.
pub fn rel_err_mat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "shape mismatch in comparison");
    let scale = 1.0_f64
        .max(a.iter().fold(0.0_f64, |m, v| m.max(v.abs())))
        .max(b.iter().fold(0.0_f64, |m, v| m.max(v.abs())));
    a.iter()
        .zip(b.iter())
        .fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()))
        / scale
}

/// Worst-entry relative error between two vectors.
pub fn rel_err_vec(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch in comparison");
    let scale = 1.0_f64
        .max(a.iter().fold(0.0_f64, |m, v| m.max(v.abs())))
        .max(b.iter().fold(0.0_f64, |m, v| m.max(v.abs())));
    a.iter()
        .zip(b.iter())
        .fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()))
        / scale
}
