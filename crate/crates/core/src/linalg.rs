//! Small dense linear-algebra helpers shared by the estimators.

use nalgebra::{DMatrix, DVector};

use crate::error::{PepsiError, Result};

/// Largest condition number accepted before a matrix is declared singular.
pub const MAX_CONDITION: f64 = 1e12;

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// 2-norm condition number from singular values. Infinite for rank-deficient input.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 1.0;
    }
    let sv = m.clone().singular_values();
    let max = sv.iter().cloned().fold(0.0_f64, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 0.0 || !min.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Inverse with a condition-number guard; `name` identifies the matrix in errors.
pub fn guarded_inverse(m: &DMatrix<f64>, name: &str) -> Result<DMatrix<f64>> {
    if m.nrows() != m.ncols() {
        return Err(PepsiError::Dimension(format!(
            "{name} is {}x{}, expected square",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.is_empty() {
        return Ok(DMatrix::zeros(0, 0));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(PepsiError::NonFinite(format!(
            "{name} has non-finite entries"
        )));
    }
    let cond = condition_number(m);
    if cond > MAX_CONDITION {
        return Err(PepsiError::Singular {
            name: name.to_string(),
            detail: format!("condition number {cond:.3e} exceeds {MAX_CONDITION:.0e}"),
        });
    }
    m.clone().try_inverse().ok_or_else(|| PepsiError::Singular {
        name: name.to_string(),
        detail: "LU factorization failed".to_string(),
    })
}

/// Inverse of a symmetric positive semidefinite matrix via Cholesky. When the
/// factorization fails a ridge of `1e-10 * trace / dim` is added and the
/// second return value is `true`.
pub fn spd_inverse_ridged(a: &DMatrix<f64>, name: &str) -> Result<(DMatrix<f64>, bool)> {
    let dim = a.nrows();
    if dim == 0 {
        return Ok((DMatrix::zeros(0, 0), false));
    }
    let sym = symmetrize(a);
    if let Some(chol) = sym.clone().cholesky() {
        let inv = chol.inverse();
        if inv.iter().all(|v| v.is_finite()) && condition_number(&sym) <= MAX_CONDITION {
            return Ok((inv, false));
        }
    }
    let ridge = 1e-10 * sym.trace().abs().max(f64::MIN_POSITIVE) / dim as f64;
    log::warn!("{name} is numerically singular; adding ridge {ridge:.3e}");
    let ridged = &sym + DMatrix::identity(dim, dim) * ridge;
    match ridged.cholesky() {
        Some(chol) => Ok((chol.inverse(), true)),
        None => Err(PepsiError::Singular {
            name: name.to_string(),
            detail: "not positive semidefinite even after ridge".to_string(),
        }),
    }
}

/// Eigen-decomposition of a symmetric matrix with eigenvalues sorted in
/// descending order (eigenvectors as matching columns).
pub fn symmetric_eigen_desc(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let dim = m.nrows();
    if dim == 0 {
        return (Vec::new(), DMatrix::zeros(0, 0));
    }
    let eig = symmetrize(m).symmetric_eigen();
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DMatrix::zeros(dim, dim);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

/// Solve a symmetric positive definite system, falling back to LU.
pub fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    if let Some(chol) = a.clone().cholesky() {
        return Some(chol.solve(b));
    }
    a.clone().lu().solve(b)
}

pub fn max_abs(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

/// Copy the listed columns of `m` into a new matrix.
pub fn select_columns(m: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), cols.len(), |i, j| m[(i, cols[j])])
}

/// Block-diagonal assembly.
pub fn block_diagonal(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let (mut r0, mut c0) = (0, 0);
    for b in blocks {
        out.view_mut((r0, c0), (b.nrows(), b.ncols())).copy_from(b);
        r0 += b.nrows();
        c0 += b.ncols();
    }
    out
}
