//! Small dense linear-algebra helpers shared by several modules.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Iteration cap for the power method.
pub const POWER_ITERATIONS: usize = 100;
/// Relative change below which the power method is considered converged.
pub const POWER_TOLERANCE: f64 = 1e-8;

/// Largest singular value of `m`, estimated by power iteration on `mᵀm`.
///
/// Deterministic: starts from a fixed, slightly tilted vector so repeated
/// calls (and therefore repeated projections) agree bit for bit.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    let n = m.ncols();
    if n == 0 || m.nrows() == 0 {
        return 0.0;
    }
    // Tilted start vector avoids being exactly orthogonal to the top
    // singular direction for the structured matrices we meet in practice.
    let mut v = DVector::from_fn(n, |i, _| 1.0 + 0.01 * (i as f64 + 1.0));
    v /= v.norm();
    let mut sigma = 0.0_f64;
    for _ in 0..POWER_ITERATIONS {
        let w = m * &v;
        let next = m.transpose() * w;
        let norm = next.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let new_sigma = norm.sqrt();
        let done = (new_sigma - sigma).abs() <= POWER_TOLERANCE * new_sigma.max(1.0);
        sigma = new_sigma;
        v = next / norm;
        if done {
            break;
        }
    }
    sigma
}

/// log |det A| of a square matrix via LU, failing on exact singularity.
pub fn log_abs_det(a: &DMatrix<f64>) -> Result<f64> {
    let lu = a.clone().lu();
    let mut acc = 0.0;
    for i in 0..a.nrows() {
        let u_ii = lu.u()[(i, i)];
        if u_ii == 0.0 {
            return Err(Error::Density("matrix is exactly singular".into()));
        }
        acc += u_ii.abs().ln();
    }
    if !acc.is_finite() {
        return Err(Error::NonFinite("log-determinant".into()));
    }
    Ok(acc)
}
