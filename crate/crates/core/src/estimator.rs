//! Minimum-norm least squares, ridge, and the null-space projector.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::linalg::{default_rtol, sym_eigenvalues_desc, Pinv};

#[derive(Debug, Clone)]
pub struct MnlsFit {
    pub beta: DVector<f64>,
    pub rank: usize,
    pub singular_values: Vec<f64>,
    /// absolute singular-value threshold that was applied
    pub cutoff: f64,
    /// the fit does not reproduce the labels
    pub residual_nonzero: bool,
}

fn check_labels(z: &DMatrix<f64>, y: &DVector<f64>) -> Result<()> {
    if z.nrows() != y.len() {
        return Err(Error::DimensionMismatch { context: "labels", expected: z.nrows(), got: y.len() });
    }
    Ok(())
}

/// `Z^+ Y` through a truncated SVD. `rtol = None` uses [`default_rtol`].
pub fn mnls_fit(z: &DMatrix<f64>, y: &DVector<f64>, rtol: Option<f64>) -> Result<MnlsFit> {
    check_labels(z, y)?;
    let rtol = rtol.unwrap_or_else(|| default_rtol(z.nrows(), z.ncols()));
    let pinv = Pinv::new(z, rtol)?;
    Ok(mnls_from_svd(&pinv, z, y))
}

/// [`mnls_fit`] reusing a factorization of `z`.
pub fn mnls_from_svd(pinv: &Pinv, z: &DMatrix<f64>, y: &DVector<f64>) -> MnlsFit {
    let beta = pinv.solve(y);
    let resid = (z * &beta - y).norm();
    MnlsFit {
        residual_nonzero: resid > 1e-8 * y.norm(),
        beta,
        rank: pinv.rank(),
        singular_values: pinv.singular_values.clone(),
        cutoff: pinv.cutoff,
    }
}

/// Minimizer of `(1/n)|Y - Z b|^2 + lambda s |b|^2`.
///
/// The normal-equation shift is `n * lambda * s`. For `s > n` the equivalent
/// dual form `Z^T (Z Z^T + n lambda s I)^{-1} Y` is solved instead.
pub fn ridge_fit(z: &DMatrix<f64>, y: &DVector<f64>, lambda: f64) -> Result<DVector<f64>> {
    check_labels(z, y)?;
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(invalid("lambda", format!("must be finite and non-negative, got {lambda}")));
    }
    let (n, s) = z.shape();
    if lambda == 0.0 {
        let pinv = Pinv::new(z, default_rtol(n, s))?;
        if pinv.rank() < s {
            return Err(Error::Singular(format!(
                "Z^T Z has rank {} < {s} at lambda = 0; use mnls_fit for the minimum-norm solution",
                pinv.rank()
            )));
        }
        return Ok(pinv.solve(y));
    }
    let shift = n as f64 * lambda * s as f64;
    let singular = || Error::Singular("regularized system is not positive definite".into());
    if s > n {
        let mut g = z * z.transpose();
        for i in 0..n {
            g[(i, i)] += shift;
        }
        let alpha = g.cholesky().ok_or_else(singular)?.solve(y);
        Ok(z.transpose() * alpha)
    } else {
        let mut g = z.transpose() * z;
        for i in 0..s {
            g[(i, i)] += shift;
        }
        let rhs = z.transpose() * y;
        Ok(g.cholesky().ok_or_else(singular)?.solve(&rhs))
    }
}

/// Diagnostics of `Pi = Z^+ Z - I`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProjectorDiag {
    /// spectral norm of `Pi`
    pub pi_norm: f64,
    /// spectral norm of `Pi^2 + Pi`
    pub idempotency_defect: f64,
    pub null_dim: usize,
}

pub fn projector_diag(z: &DMatrix<f64>, rtol: Option<f64>) -> Result<ProjectorDiag> {
    let rtol = rtol.unwrap_or_else(|| default_rtol(z.nrows(), z.ncols()));
    Ok(projector_diag_from_svd(&Pinv::new(z, rtol)?))
}

/// With `P = V V^T` the kept right singular basis, `Pi = P - I`. The nonzero
/// spectrum of `P` is that of the Gram `G = V^T V`, so both norms follow from
/// its eigenvalues `g`: `Pi` has eigenvalues `g - 1` (and `-1` on the null
/// space), `Pi^2 + Pi = P^2 - P` has eigenvalues `g(g - 1)`.
pub fn projector_diag_from_svd(pinv: &Pinv) -> ProjectorDiag {
    let s = pinv.cols();
    let rank = pinv.rank();
    let g = sym_eigenvalues_desc(&pinv.v.tr_mul(&pinv.v));
    let mut pi_norm = g.iter().map(|v| (v - 1.0).abs()).fold(0.0, f64::max);
    if s > rank {
        pi_norm = pi_norm.max(1.0);
    }
    let idempotency_defect = g.iter().map(|v| (v * (v - 1.0)).abs()).fold(0.0, f64::max);
    ProjectorDiag { pi_norm, idempotency_defect, null_dim: s - rank }
}

/// `rows * beta`.
pub fn predict(beta: &DVector<f64>, rows: &DMatrix<f64>) -> Result<DVector<f64>> {
    if rows.ncols() != beta.len() {
        return Err(Error::DimensionMismatch { context: "prediction features", expected: beta.len(), got: rows.ncols() });
    }
    Ok(rows * beta)
}
