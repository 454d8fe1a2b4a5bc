//! Thin wrappers over nalgebra factorizations with crate errors.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Solves `a x = b` for symmetric positive-definite `a` via Cholesky.
pub fn spd_solve(op: &'static str, a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let chol = a.clone().cholesky().ok_or(Error::Singular { op })?;
    let x = chol.solve(b);
    if x.iter().all(|v| v.is_finite()) {
        Ok(x)
    } else {
        Err(Error::Singular { op })
    }
}

/// Eigenvalues of a symmetric matrix in ascending order.
pub fn sym_eigenvalues(a: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = SymmetricEigen::new(a.clone()).eigenvalues.iter().copied().collect();
    ev.sort_by(|x, y| x.total_cmp(y));
    ev
}

/// `(lambda_min, lambda_max)` of a symmetric matrix.
pub fn sym_extreme_eigenvalues(a: &DMatrix<f64>) -> (f64, f64) {
    let ev = sym_eigenvalues(a);
    (ev[0], ev[ev.len() - 1])
}

pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    let (lo, hi) = sym_extreme_eigenvalues(a);
    hi / lo
}

pub fn check_square(op: &'static str, a: &DMatrix<f64>, d: usize) -> Result<()> {
    if a.nrows() != d {
        return Err(Error::DimensionMismatch {
            op,
            expected: d,
            got: a.nrows(),
        });
    }
    if a.ncols() != d {
        return Err(Error::DimensionMismatch {
            op,
            expected: d,
            got: a.ncols(),
        });
    }
    Ok(())
}
