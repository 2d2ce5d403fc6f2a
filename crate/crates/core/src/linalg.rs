//! Dense linear-algebra helpers on top of nalgebra, with factorizations from faer.
//!
//! Everything here tolerates zero-sized matrices, which show up naturally
//! when a block has `d_h - r = 0` rows or columns.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;

// nalgebra's SVD returns wrong factors on some exactly rank-deficient wide
// matrices, so factorizations go through faer.
fn to_faer(m: &Mat) -> faer::Mat<f64> {
    faer::Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

/// Eigenvalues (increasing) and orthonormal eigenvectors of a symmetric matrix.
pub fn symmetric_eigen(h: &Mat) -> Result<(Vec<f64>, Mat)> {
    let n = h.nrows();
    if n == 0 {
        return Ok((Vec::new(), Mat::zeros(0, 0)));
    }
    let dec = to_faer(h)
        .self_adjoint_eigen(faer::Side::Lower)
        .map_err(|e| Error::InternalInconsistency(format!("symmetric eigensolver failed: {e:?}")))?;
    let (u, sd) = (dec.U(), dec.S().column_vector());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| sd[a].total_cmp(&sd[b]));
    let vals = order.iter().map(|&j| sd[j]).collect();
    let vecs = Mat::from_fn(n, n, |i, j| u[(i, order[j])]);
    Ok((vals, vecs))
}

/// Threshold for counting singular values as nonzero.
///
/// A singular value counts iff it exceeds `absolute + relative * sigma_max`.
/// With `relative = None` the relative part defaults to `max(rows, cols) * eps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankTolerance {
    pub relative: Option<f64>,
    pub absolute: f64,
}

impl RankTolerance {
    pub const fn machine() -> Self {
        RankTolerance { relative: None, absolute: 0.0 }
    }

    pub const fn relative(rel: f64) -> Self {
        RankTolerance { relative: Some(rel), absolute: 0.0 }
    }

    pub fn threshold(&self, rows: usize, cols: usize, sigma_max: f64) -> f64 {
        let rel = self
            .relative
            .unwrap_or(rows.max(cols) as f64 * f64::EPSILON);
        self.absolute + rel * sigma_max
    }
}

impl Default for RankTolerance {
    fn default() -> Self {
        Self::machine()
    }
}

/// Thin SVD with singular values sorted in decreasing order.
///
/// `u` is `rows x k`, `v` is `cols x k` with `k = min(rows, cols)`.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Mat,
    pub s: Vec<f64>,
    pub v: Mat,
}

pub fn svd(m: &Mat) -> Svd {
    let (rows, cols) = m.shape();
    let k = rows.min(cols);
    if k == 0 {
        return Svd { u: Mat::zeros(rows, 0), s: Vec::new(), v: Mat::zeros(cols, 0) };
    }
    let dec = to_faer(m).thin_svd().expect("svd converges");
    let (u, sd, v) = (dec.U(), dec.S().column_vector(), dec.V());
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| sd[b].total_cmp(&sd[a]));
    let su = Mat::from_fn(rows, k, |i, j| u[(i, order[j])]);
    let sv = Mat::from_fn(cols, k, |i, j| v[(i, order[j])]);
    let s = order.iter().map(|&j| sd[j]).collect();
    Svd { u: su, s, v: sv }
}

pub fn singular_values(m: &Mat) -> Vec<f64> {
    let (rows, cols) = m.shape();
    if rows.min(cols) == 0 {
        return Vec::new();
    }
    let mut s = to_faer(m).singular_values().expect("svd converges");
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

pub fn numeric_rank(m: &Mat, tol: RankTolerance) -> usize {
    let s = singular_values(m);
    let Some(&smax) = s.first() else { return 0 };
    if smax == 0.0 {
        return 0;
    }
    let thr = tol.threshold(m.nrows(), m.ncols(), smax);
    s.iter().filter(|&&x| x > thr).count()
}

/// Pseudo-inverse truncated to the leading `rank` singular triplets.
pub fn pinv_rank(m: &Mat, rank: usize) -> Mat {
    let d = svd(m);
    let mut out = Mat::zeros(m.ncols(), m.nrows());
    for k in 0..rank.min(d.s.len()) {
        if d.s[k] > 0.0 {
            out += (d.v.column(k) * d.u.column(k).transpose()) / d.s[k];
        }
    }
    out
}

/// Orthonormal basis of the kernel of `m`, assuming `m` has rank `rank`.
pub fn null_space(m: &Mat, rank: usize) -> Mat {
    let n = m.ncols();
    if rank >= n {
        return Mat::zeros(n, 0);
    }
    let d = svd(m);
    let row_space = d.v.columns(0, rank.min(d.s.len())).into_owned();
    orthogonal_complement(&row_space)
}

/// Orthonormal basis of the orthogonal complement of the column span of `q`.
///
/// `q` must have orthonormal columns. The complement is read off a
/// column-pivoted QR of the projector `I - q q^T`.
pub fn orthogonal_complement(q: &Mat) -> Mat {
    let n = q.nrows();
    let k = q.ncols();
    if k >= n {
        return Mat::zeros(n, 0);
    }
    let p = Mat::identity(n, n) - q * q.transpose();
    let qr = p.col_piv_qr();
    let qf = qr.q();
    let mut c = qf.columns(0, n - k).into_owned();
    // One refinement pass removes the residual component along q.
    c -= q * (q.transpose() * &c);
    orthonormalize(&c)
}

/// Gram-Schmidt (two passes) on the columns of `m`.
pub fn orthonormalize(m: &Mat) -> Mat {
    let mut out = m.clone();
    for j in 0..out.ncols() {
        for _ in 0..2 {
            for i in 0..j {
                let proj = out.column(i).dot(&out.column(j));
                let ci = out.column(i).into_owned();
                out.column_mut(j).axpy(-proj, &ci, 1.0);
            }
        }
        let nrm = out.column(j).norm();
        if nrm > 0.0 {
            out.column_mut(j).scale_mut(1.0 / nrm);
        }
    }
    out
}

/// Orthonormal basis of the column span of `m`, assumed to have rank `m.ncols()`.
pub fn column_basis(m: &Mat) -> Mat {
    let mut q = orthonormalize(m);
    q = orthonormalize(&q);
    q
}

/// Extends the linearly independent columns of `b` to a basis of `R^n`.
///
/// Returns `[b, c]` with `c` an orthonormal basis of the complement of span(b).
pub fn complete_basis(b: &Mat) -> Result<Mat> {
    let n = b.nrows();
    let k = b.ncols();
    if k > n {
        return Err(Error::DegenerateBasis(format!("{k} vectors in dimension {n}")));
    }
    if k > 0 && numeric_rank(b, RankTolerance::relative(1e-10)) < k {
        return Err(Error::DegenerateBasis(format!(
            "{k} leading columns are not linearly independent"
        )));
    }
    let q = column_basis(b);
    let c = orthogonal_complement(&q);
    Ok(hcat(b, &c))
}

pub fn hcat(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.nrows(), b.nrows(), "hcat row mismatch");
    let mut out = Mat::zeros(a.nrows(), a.ncols() + b.ncols());
    out.view_mut((0, 0), a.shape()).copy_from(a);
    out.view_mut((0, a.ncols()), b.shape()).copy_from(b);
    out
}

pub fn vcat(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.ncols(), b.ncols(), "vcat column mismatch");
    let mut out = Mat::zeros(a.nrows() + b.nrows(), a.ncols());
    out.view_mut((0, 0), a.shape()).copy_from(a);
    out.view_mut((a.nrows(), 0), b.shape()).copy_from(b);
    out
}

/// `[[I_r, 0], [0, z]]`.
pub fn identity_block(r: usize, z: &Mat) -> Mat {
    let mut out = Mat::zeros(r + z.nrows(), r + z.ncols());
    for i in 0..r {
        out[(i, i)] = 1.0;
    }
    out.view_mut((r, r), z.shape()).copy_from(z);
    out
}

pub fn sub(m: &Mat, r0: usize, c0: usize, nr: usize, nc: usize) -> Mat {
    m.view((r0, c0), (nr, nc)).into_owned()
}

/// Inverse of a square matrix, failing when it is numerically singular.
pub fn inverse(m: &Mat) -> Result<Mat> {
    if m.nrows() != m.ncols() {
        return Err(Error::InvalidShape(format!("cannot invert {}x{}", m.nrows(), m.ncols())));
    }
    if m.nrows() == 0 {
        return Ok(Mat::zeros(0, 0));
    }
    m.clone()
        .lu()
        .try_inverse()
        .ok_or_else(|| Error::IllConditioned("matrix is singular".into()))
}

/// 2-norm condition number; infinite for singular input.
pub fn condition_number(m: &Mat) -> f64 {
    let s = singular_values(m);
    match (s.first(), s.last()) {
        (Some(&hi), Some(&lo)) if lo > 0.0 => hi / lo,
        (None, None) => 1.0,
        _ => f64::INFINITY,
    }
}

pub fn frob2(m: &Mat) -> f64 {
    m.iter().map(|x| x * x).sum()
}

/// `<a, b> = tr(a b^T)`.
pub fn inner(a: &Mat, b: &Mat) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Flips column signs so the first entry above `1e-12 * ||col||` is nonnegative.
/// Returns the applied signs.
pub fn fix_column_signs(m: &mut Mat) -> Vec<f64> {
    let mut signs = Vec::with_capacity(m.ncols());
    for j in 0..m.ncols() {
        let nrm = m.column(j).norm();
        let lead = m.column(j).iter().copied().find(|x| x.abs() > 1e-12 * nrm);
        let s = match lead {
            Some(x) if x < 0.0 => -1.0,
            _ => 1.0,
        };
        if s < 0.0 {
            m.column_mut(j).neg_mut();
        }
        signs.push(s);
    }
    signs
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, v: &[f64]) -> Mat {
        Mat::from_row_slice(rows, cols, v)
    }

    #[test]
    fn rank_of_outer_product() {
        let a = m(3, 1, &[1.0, 2.0, 3.0]);
        let b = m(1, 4, &[1.0, -1.0, 0.5, 2.0]);
        assert_eq!(numeric_rank(&(a * b), RankTolerance::machine()), 1);
        assert_eq!(numeric_rank(&Mat::zeros(3, 3), RankTolerance::machine()), 0);
        assert_eq!(numeric_rank(&Mat::zeros(0, 3), RankTolerance::machine()), 0);
    }

    #[test]
    fn absolute_tolerance_cuts_small_values() {
        let d = Mat::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 1e-3]));
        assert_eq!(numeric_rank(&d, RankTolerance::machine()), 2);
        let tol = RankTolerance { relative: Some(0.0), absolute: 1e-2 };
        assert_eq!(numeric_rank(&d, tol), 1);
    }

    #[test]
    fn svd_sorted_and_reconstructs() {
        let a = m(3, 2, &[1.0, 2.0, 0.0, 5.0, 3.0, -1.0]);
        let d = svd(&a);
        assert!(d.s[0] >= d.s[1]);
        let rec = &d.u * Mat::from_diagonal(&nalgebra::DVector::from_vec(d.s.clone())) * d.v.transpose();
        assert!((rec - a).norm() < 1e-12);
    }

    #[test]
    fn null_space_is_kernel() {
        let a = m(2, 4, &[1.0, 0.0, 2.0, 1.0, 0.0, 1.0, 1.0, -1.0]);
        let n = null_space(&a, 2);
        assert_eq!(n.shape(), (4, 2));
        assert!((&a * &n).norm() < 1e-12);
        assert!((n.transpose() * &n - Mat::identity(2, 2)).norm() < 1e-12);
    }

    #[test]
    fn completion_has_full_rank() {
        let b = m(4, 2, &[1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 2.0, 0.0]);
        let e = complete_basis(&b).unwrap();
        assert_eq!(e.shape(), (4, 4));
        assert_eq!(numeric_rank(&e, RankTolerance::machine()), 4);
        assert_eq!(sub(&e, 0, 0, 4, 2), b);
    }

    #[test]
    fn completion_rejects_dependent_columns() {
        let b = m(3, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        assert!(matches!(complete_basis(&b), Err(Error::DegenerateBasis(_))));
    }

    #[test]
    fn pinv_truncated() {
        let a = m(2, 2, &[2.0, 0.0, 0.0, 1e-20]);
        let p = pinv_rank(&a, 1);
        assert!((p[(0, 0)] - 0.5).abs() < 1e-15);
        assert_eq!(p[(1, 1)], 0.0);
    }

    #[test]
    fn sign_convention() {
        let mut a = m(2, 2, &[0.0, -1.0, -2.0, 3.0]);
        let s = fix_column_signs(&mut a);
        assert_eq!(s, vec![-1.0, -1.0]);
        assert_eq!(a[(1, 0)], 2.0);
        assert_eq!(a[(0, 1)], 1.0);
    }

    #[test]
    fn identity_block_allows_empty() {
        let z = Mat::zeros(0, 2);
        let b = identity_block(1, &z);
        assert_eq!(b.shape(), (1, 3));
        assert_eq!(b[(0, 0)], 1.0);
    }
}
