//! Dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen, SVD};

use crate::error::{Error, Result};

const LANES: usize = 4;

/// Inner product with a fixed summation order.
///
/// Four interleaved partial sums, combined as `(s0 + s1) + (s2 + s3)`, then the
/// remainder in index order. Every caller that needs reproducible feature
/// values goes through this function or [`dot4`], which performs the same
/// arithmetic per output.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; LANES];
    let body = a.len() / LANES * LANES;
    for (ca, cb) in a[..body].chunks_exact(LANES).zip(b[..body].chunks_exact(LANES)) {
        for l in 0..LANES {
            acc[l] += ca[l] * cb[l];
        }
    }
    let mut total = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for k in body..a.len() {
        total += a[k] * b[k];
    }
    total
}

/// Four simultaneous [`dot`] products against a shared right-hand side.
/// Each output is bit-identical to the corresponding single `dot`.
#[inline]
pub fn dot4(rows: [&[f64]; 4], b: &[f64]) -> [f64; 4] {
    let len = b.len();
    let body = len / LANES * LANES;
    let mut acc = [[0.0f64; LANES]; 4];
    let mut k = 0;
    while k < body {
        for (r, row) in rows.iter().enumerate() {
            for l in 0..LANES {
                acc[r][l] += row[k + l] * b[k + l];
            }
        }
        k += LANES;
    }
    let mut out = [0.0; 4];
    for r in 0..4 {
        let mut total = (acc[r][0] + acc[r][1]) + (acc[r][2] + acc[r][3]);
        for k in body..len {
            total += rows[r][k] * b[k];
        }
        out[r] = total;
    }
    out
}

/// Default relative cutoff for rank decisions on an `n x s` design.
pub fn default_rtol(n: usize, s: usize) -> f64 {
    1e-10 * n.max(s) as f64
}

/// Thin SVD truncated at a relative cutoff: `A ~= U diag(sigma) V^T` with only
/// the singular values at or above `rtol * sigma_max` kept.
#[derive(Debug, Clone)]
pub struct Pinv {
    /// rows x rank
    pub u: DMatrix<f64>,
    /// kept singular values, non-increasing
    pub sigma: Vec<f64>,
    /// cols x rank
    pub v: DMatrix<f64>,
    /// absolute threshold that was applied
    pub cutoff: f64,
    /// all singular values, non-increasing
    pub singular_values: Vec<f64>,
}

impl Pinv {
    pub fn new(a: &DMatrix<f64>, rtol: f64) -> Result<Self> {
        if !(rtol > 0.0 && rtol < 1.0) {
            return Err(crate::error::invalid("rtol", format!("must lie in (0, 1), got {rtol}")));
        }
        let (rows, cols) = a.shape();
        if rows == 0 || cols == 0 {
            return Err(crate::error::invalid("design", "matrix has an empty dimension"));
        }
        if a.iter().any(|x| !x.is_finite()) {
            return Err(Error::Singular("design contains non-finite entries".into()));
        }
        let svd = SVD::try_new(a.clone(), true, true, f64::EPSILON, 0)
            .ok_or_else(|| Error::Singular("SVD did not converge".into()))?;
        let u_full = svd.u.expect("requested U");
        let vt_full = svd.v_t.expect("requested V^T");
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
        let singular_values: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
        let smax = singular_values.first().copied().unwrap_or(0.0);
        let cutoff = rtol * smax;
        let keep: Vec<usize> = order
            .iter()
            .copied()
            .filter(|&i| smax > 0.0 && svd.singular_values[i] >= cutoff)
            .collect();
        let r = keep.len();
        let mut u = DMatrix::zeros(rows, r);
        let mut v = DMatrix::zeros(cols, r);
        let mut sigma = Vec::with_capacity(r);
        for (c, &i) in keep.iter().enumerate() {
            u.set_column(c, &u_full.column(i));
            v.set_column(c, &vt_full.row(i).transpose());
            sigma.push(svd.singular_values[i]);
        }
        Ok(Self { u, sigma, v, cutoff, singular_values })
    }

    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    pub fn rows(&self) -> usize {
        self.u.nrows()
    }

    pub fn cols(&self) -> usize {
        self.v.nrows()
    }

    /// `A^+ y`
    pub fn solve(&self, y: &DVector<f64>) -> DVector<f64> {
        let mut c = self.u.transpose() * y;
        for (ci, si) in c.iter_mut().zip(&self.sigma) {
            *ci /= si;
        }
        &self.v * c
    }

    /// `A^+` as a dense cols x rows matrix.
    pub fn pinv(&self) -> DMatrix<f64> {
        let mut vs = self.v.clone();
        for (j, sj) in self.sigma.iter().enumerate() {
            vs.column_mut(j).scale_mut(1.0 / sj);
        }
        vs * self.u.transpose()
    }

    /// Orthogonal projection onto the row space, `V V^T b`.
    pub fn project_row_space(&self, b: &DVector<f64>) -> DVector<f64> {
        &self.v * (self.v.transpose() * b)
    }

    /// `(A^+ A - I) b`, minus the projection onto the null space.
    pub fn pi_apply(&self, b: &DVector<f64>) -> DVector<f64> {
        self.project_row_space(b) - b
    }
}

/// Eigenvalues of a symmetric matrix, sorted non-increasing.
pub fn sym_eigenvalues_desc(m: &DMatrix<f64>) -> Vec<f64> {
    if m.nrows() == 0 {
        return Vec::new();
    }
    let mut ev: Vec<f64> = SymmetricEigen::new(m.clone()).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev
}

/// Largest eigenvalue of `W^T W` (equivalently `|W|^2`) by Lanczos with full
/// reorthogonalization. The iteration stops once the top Ritz value is stable
/// to `1e-10` relative or after `min(rows, cols, 64)` steps.
pub fn top_gram_eigenvalue(w: &DMatrix<f64>) -> f64 {
    let (rows, cols) = w.shape();
    if rows == 0 || cols == 0 {
        return 0.0;
    }
    // iterate in the smaller of the two Gram spaces; nonzero spectra agree
    let wide = rows < cols;
    let dim = rows.min(cols);
    let max_steps = dim.min(64);
    let mut q = DVector::from_fn(dim, |i, _| 1.0 + ((i * 7 + 3) % 11) as f64 / 11.0);
    q /= q.norm();
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(max_steps);
    let mut alpha = Vec::with_capacity(max_steps);
    let mut beta: Vec<f64> = Vec::with_capacity(max_steps);
    let mut last = f64::NAN;
    for step in 0..max_steps {
        let mut r = if wide { w * w.tr_mul(&q) } else { w.tr_mul(&(w * &q)) };
        let a = q.dot(&r);
        alpha.push(a);
        basis.push(q.clone());
        for _ in 0..2 {
            for b in &basis {
                let c = b.dot(&r);
                r.axpy(-c, b, 1.0);
            }
        }
        let top = tridiagonal_top(&alpha, &beta);
        let bnext = r.norm();
        if step + 1 == max_steps || bnext <= 1e-14 * top.abs().max(1e-300) {
            return top;
        }
        if (top - last).abs() <= 1e-10 * top.abs() {
            return top;
        }
        last = top;
        beta.push(bnext);
        q = r / bnext;
    }
    last
}

fn tridiagonal_top(alpha: &[f64], beta: &[f64]) -> f64 {
    let k = alpha.len();
    let mut t = DMatrix::zeros(k, k);
    for i in 0..k {
        t[(i, i)] = alpha[i];
        if i + 1 < k {
            t[(i, i + 1)] = beta[i];
            t[(i + 1, i)] = beta[i];
        }
    }
    sym_eigenvalues_desc(&t)[0]
}
