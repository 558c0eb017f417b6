//! Structured-matrix utilities shared by the estimators.
//!
//! Vectorization is column-major everywhere: `vec(M)` stacks the columns of
//! `M`, which is also nalgebra's storage order, so `M.as_slice()` is `vec(M)`.
//! Signals are stored as `d × T` matrices, one column per time step.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative tolerance below which singular values are treated as zero.
pub const PINV_RTOL: f64 = 1e-10;

/// Default relative tolerance of [`pseudo_det`].
pub const PSEUDO_DET_TOL: f64 = 1e-10;

/// Block Hankel matrix whose block `(k, l)` is `signal[start + k + l]`.
pub fn build_hankel(
    signal: &DMatrix<f64>,
    block_rows: usize,
    cols: usize,
    start: usize,
) -> Result<DMatrix<f64>> {
    let d = signal.nrows();
    let needed = start + block_rows + cols.saturating_sub(1);
    if block_rows == 0 || cols == 0 || signal.ncols() < needed {
        return Err(Error::InsufficientSamples {
            needed,
            available: signal.ncols(),
        });
    }
    Ok(DMatrix::from_fn(block_rows * d, cols, |row, col| {
        let (k, r) = (row / d, row % d);
        signal[(r, start + k + col)]
    }))
}

/// Dense 0/1 maps from low-dimensional parameters to vectorized structured
/// matrices.
///
/// `b_t` sends the last row of an `i × i` lower-triangular Toeplitz matrix to
/// its vectorization; `b_w` sends a scalar sequence of length `i + n - 1` to
/// the vectorization of its `i × n` Hankel matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectorPair {
    pub b_t: DMatrix<f64>,
    pub b_w: DMatrix<f64>,
    pub i: usize,
    pub n: usize,
}

impl SelectorPair {
    /// Diagonal of `b_wᵀ b_w`: how many Hankel entries share each sample.
    pub fn hankel_multiplicity(&self) -> DVector<f64> {
        hankel_multiplicity(self.i, self.n)
    }
}

pub fn build_selectors(i: usize, n: usize) -> SelectorPair {
    let mut b_t = DMatrix::zeros(i * i, i);
    for c in 0..i {
        for r in c..i {
            b_t[(c * i + r, i - 1 - (r - c))] = 1.0;
        }
    }
    let mut b_w = DMatrix::zeros(i * n, i + n - 1);
    for c in 0..n {
        for r in 0..i {
            b_w[(c * i + r, r + c)] = 1.0;
        }
    }
    SelectorPair { b_t, b_w, i, n }
}

/// Number of entries on each anti-diagonal of an `i × n` matrix.
pub fn hankel_multiplicity(i: usize, n: usize) -> DVector<f64> {
    DVector::from_fn(i + n - 1, |m, _| {
        let lo = m.saturating_sub(n - 1);
        let hi = m.min(i - 1);
        (hi + 1 - lo) as f64
    })
}

/// Lower-triangular Toeplitz matrix parameterized by its last row, so that
/// `row[i - 1]` is the diagonal and `row[0]` the bottom-left corner.
pub fn lower_toeplitz_from_last_row(row: &[f64]) -> DMatrix<f64> {
    let i = row.len();
    DMatrix::from_fn(i, i, |r, c| if r >= c { row[i - 1 - (r - c)] } else { 0.0 })
}

/// Lower-triangular Toeplitz matrix parameterized by its first column.
pub fn lower_toeplitz_from_first_col(col: &[f64]) -> DMatrix<f64> {
    let i = col.len();
    DMatrix::from_fn(i, i, |r, c| if r >= c { col[r - c] } else { 0.0 })
}

/// Symmetric square root (or inverse square root) of a symmetric PSD matrix.
///
/// Negative eigenvalues from round-off are clipped to zero in the forward
/// case. The inverse requires a positive definite input.
pub fn psd_sqrt(m: &DMatrix<f64>, inverse: bool) -> Result<DMatrix<f64>> {
    let (w, q) = sym_eigen(m)?;
    let scale = w
        .iter()
        .fold(0.0f64, |a, v| a.max(v.abs()))
        .max(f64::MIN_POSITIVE);
    let tol = scale * f64::EPSILON * m.nrows() as f64;
    let min = w.min();
    let mapped = if inverse {
        if min <= tol {
            return Err(Error::NotPositiveDefinite {
                min_eigenvalue: min,
            });
        }
        w.map(|v| 1.0 / v.sqrt())
    } else {
        w.map(|v| v.max(0.0).sqrt())
    };
    Ok(symmetrize(
        &(&q * DMatrix::from_diagonal(&mapped) * q.transpose()),
    ))
}

/// Eigen-decomposition of a symmetric matrix, after checking symmetry.
pub fn sym_eigen(m: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if !m.is_square() {
        return Err(Error::ShapeMismatch(format!(
            "expected a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let norm = m.norm();
    if (m - m.transpose()).norm() > 1e-8 * norm.max(f64::MIN_POSITIVE) {
        return Err(Error::ShapeMismatch("matrix is not symmetric".into()));
    }
    let eig = symmetrize(m).symmetric_eigen();
    Ok((eig.eigenvalues, eig.eigenvectors))
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Product of the singular values above `tol` times the largest one.
///
/// The all-zero matrix yields 1, the empty product.
pub fn pseudo_det(m: &DMatrix<f64>, tol: f64) -> f64 {
    let s = m.singular_values();
    let smax = s.max();
    if smax <= 0.0 {
        return 1.0;
    }
    s.iter().filter(|&&v| v > tol * smax).product()
}

/// Nearest lower-triangular Toeplitz matrix: each subdiagonal is replaced by
/// its mean and the strict upper triangle is dropped.
pub fn toeplitz_project(m: &DMatrix<f64>) -> DMatrix<f64> {
    block_toeplitz_project(m, 1)
}

/// Block version of [`toeplitz_project`] for `b × b` blocks; the blocks on
/// each block subdiagonal are averaged.
pub fn block_toeplitz_project(m: &DMatrix<f64>, b: usize) -> DMatrix<f64> {
    assert!(m.is_square() && b > 0 && m.nrows() % b == 0);
    let f = m.nrows() / b;
    let mut out = DMatrix::zeros(m.nrows(), m.ncols());
    for k in 0..f {
        let mut mean = DMatrix::<f64>::zeros(b, b);
        for c in 0..f - k {
            mean += m.view(((c + k) * b, c * b), (b, b));
        }
        mean /= (f - k) as f64;
        for c in 0..f - k {
            out.view_mut(((c + k) * b, c * b), (b, b)).copy_from(&mean);
        }
    }
    out
}

/// Thin SVD with singular values sorted in descending order.
pub fn svd_desc(m: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("u requested");
    let vt = svd.v_t.expect("v_t requested");
    let s = svd.singular_values;
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    let u = DMatrix::from_fn(u.nrows(), order.len(), |r, c| u[(r, order[c])]);
    let vt = DMatrix::from_fn(order.len(), vt.ncols(), |r, c| vt[(order[r], c)]);
    let s = DVector::from_fn(order.len(), |k, _| s[order[k]]);
    (u, s, vt)
}

/// Singular values in descending order.
pub fn singular_values_desc(m: &DMatrix<f64>) -> Vec<f64> {
    let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Moore–Penrose pseudo-inverse with relative cutoff [`PINV_RTOL`].
pub fn pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (u, s, vt) = svd_desc(m);
    let cutoff = PINV_RTOL * s.max().max(0.0);
    let inv = s.map(|v| if v > cutoff { 1.0 / v } else { 0.0 });
    vt.transpose() * DMatrix::from_diagonal(&inv) * u.transpose()
}

/// Eigenvalue of largest modulus.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Lower Cholesky factor, `None` when the matrix is not numerically PD.
pub fn cholesky_lower(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    symmetrize(m).cholesky().map(|c| c.l())
}

/// Orthonormal basis of the column space of a full-column-rank matrix.
pub fn orthonormal_columns(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.clone().qr().q()
}

/// Block-diagonal concatenation.
pub fn block_diag(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows() + b.nrows(), a.ncols() + b.ncols());
    out.view_mut((0, 0), a.shape()).copy_from(a);
    out.view_mut(a.shape(), b.shape()).copy_from(b);
    out
}

/// Vertical concatenation of two matrices with equal column counts.
pub fn vstack(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(a.ncols(), b.ncols());
    let mut out = DMatrix::zeros(a.nrows() + b.nrows(), a.ncols());
    out.rows_mut(0, a.nrows()).copy_from(a);
    out.rows_mut(a.nrows(), b.nrows()).copy_from(b);
    out
}

pub fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}
