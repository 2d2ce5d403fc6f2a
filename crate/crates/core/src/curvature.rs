//! Exact expansions of the loss along a line, Hessian spectra, explicit
//! negative-curvature directions and the structure of tightened saddles.
//!
//! `L(W + tW')` is a polynomial of degree `2H` in `t`. Its `t²` coefficient
//! `c2(W, W')` equals `½ W'ᵀ ∇²L(W) W'`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::classifier::{is_tightened, pivot_report};
use crate::critical_points::Support;
use crate::data::SigmaBundle;
use crate::error::{Error, Result};
use crate::linalg::{frob2, inner, null_space, numeric_rank, pinv_rank, sub, svd, symmetric_eigen, Mat, RankTolerance};
use crate::network::{Direction, Weights};

/// Deepest network accepted by [`taylor_coefficients`].
pub const MAX_TAYLOR_DEPTH: usize = 12;

/// Largest parameter count for the dense Hessian.
pub const MAX_DENSE_PARAMS: usize = 2000;

fn check_pair(w: &Weights, dir: &Direction, bundle: &SigmaBundle) -> Result<()> {
    if w.shape() != dir.shape() {
        return Err(Error::InvalidShape("direction and weights differ in shape".into()));
    }
    w.shape().check_data(bundle)
}

/// Coefficients `c_0..c_{2H}` of `t ↦ L(W + tW')`.
pub fn taylor_coefficients(w: &Weights, dir: &Direction, bundle: &SigmaBundle) -> Result<Vec<f64>> {
    check_pair(w, dir, bundle)?;
    let hh = w.depth();
    if hh > MAX_TAYLOR_DEPTH {
        return Err(Error::TooDeep(format!("H = {hh} exceeds {MAX_TAYLOR_DEPTH}")));
    }
    // poly[k] is the t^k coefficient of (W_h + tW'_h)⋯(W_1 + tW'_1).
    let d0 = w.shape().d(0);
    let mut poly = vec![Mat::identity(d0, d0)];
    for h in 1..=hh {
        let (a, b) = (w.layer(h), dir.layer(h));
        let mut next = Vec::with_capacity(poly.len() + 1);
        for k in 0..=poly.len() {
            let mut m = Mat::zeros(a.nrows(), d0);
            if k < poly.len() {
                m += a * &poly[k];
            }
            if k >= 1 {
                m += b * &poly[k - 1];
            }
            next.push(m);
        }
        poly = next;
    }
    let q: Vec<Mat> = poly.iter().map(|p| p * &bundle.sxx).collect();
    let mut c = vec![0.0; 2 * hh + 1];
    for (k, ck) in c.iter_mut().enumerate() {
        let mut s = 0.0;
        for a in 0..=hh.min(k) {
            let b = k - a;
            if b <= hh {
                s += inner(&q[a], &poly[b]);
            }
        }
        if k <= hh {
            s -= 2.0 * inner(&poly[k], &bundle.syx);
        }
        *ck = s;
    }
    c[0] += bundle.syy.trace();
    Ok(c)
}

/// Evaluates the polynomial with coefficients `c` at `t`.
pub fn eval_poly(c: &[f64], t: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &x| acc * t + x)
}

/// Cached products `W_a ⋯ W_b` used by the second-order formulas.
struct Products {
    /// `pre[h] = W_h ⋯ W_1`, `pre[0] = I`.
    pre: Vec<Mat>,
    /// `suf[h] = W_H ⋯ W_{h+1}`, `suf[H] = I`.
    suf: Vec<Mat>,
    /// `mid[i][j] = W_{i-1} ⋯ W_{j+1}` for `j < i`.
    mid: Vec<Vec<Mat>>,
    /// `W_H⋯W_1 Σ_XX − Σ_YX`.
    g: Mat,
}

impl Products {
    fn new(w: &Weights, bundle: &SigmaBundle) -> Self {
        let hh = w.depth();
        let pre = w.prefix_products();
        let suf = w.suffix_products();
        let mut mid = vec![Vec::new(); hh + 1];
        for i in 1..=hh {
            mid[i] = (0..i).map(|j| if j >= 1 { w.prod(i - 1, j + 1) } else { Mat::zeros(0, 0) }).collect();
        }
        let g = &pre[hh] * &bundle.sxx - &bundle.syx;
        Products { pre, suf, mid, g }
    }

    /// `Σ_i W_H⋯W_{i+1} W'_i W_{i-1}⋯W_1`.
    fn first_order(&self, dir: &Direction) -> Mat {
        let hh = dir.depth();
        let mut p1 = Mat::zeros(self.g.nrows(), self.g.ncols());
        for i in 1..=hh {
            p1 += &self.suf[i] * dir.layer(i) * &self.pre[i - 1];
        }
        p1
    }
}

/// `c2 = ‖Σ_i T_i‖² + 2 Σ_{i>j} ⟨W_H⋯W'_i⋯W'_j⋯W_1 X, W_H⋯W_1 X − Y⟩`,
/// with `T_i = W_H⋯W_{i+1} W'_i W_{i-1}⋯W_1 X`.
///
/// Computed directly from the pairwise terms, independently of
/// [`taylor_coefficients`].
pub fn second_order_coefficient(w: &Weights, dir: &Direction, bundle: &SigmaBundle) -> Result<f64> {
    check_pair(w, dir, bundle)?;
    let pr = Products::new(w, bundle);
    let hh = w.depth();
    let p1 = pr.first_order(dir);
    let ft = inner(&(&p1 * &bundle.sxx), &p1);
    let mut p2 = Mat::zeros(pr.g.nrows(), pr.g.ncols());
    for i in 2..=hh {
        for j in 1..i {
            p2 += &pr.suf[i] * dir.layer(i) * &pr.mid[i][j] * dir.layer(j) * &pr.pre[j - 1];
        }
    }
    Ok(ft + 2.0 * inner(&p2, &pr.g))
}

/// Exact Hessian-vector product `∇²L(W) v`.
pub fn hessian_vector_product(w: &Weights, bundle: &SigmaBundle, v: &Direction) -> Result<Direction> {
    check_pair(w, v, bundle)?;
    let pr = Products::new(w, bundle);
    Ok(hvp_with(&pr, w, bundle, v))
}

fn hvp_with(pr: &Products, w: &Weights, bundle: &SigmaBundle, v: &Direction) -> Direction {
    let hh = w.depth();
    let p1s = pr.first_order(v) * &bundle.sxx;
    let mut out = Weights::zeros(w.shape());
    for h in 1..=hh {
        let lt = pr.suf[h].transpose();
        let mut acc = &lt * &p1s * pr.pre[h - 1].transpose();
        let ltg = &lt * &pr.g;
        for j in 1..h {
            acc += &ltg * pr.pre[j - 1].transpose() * v.layer(j).transpose() * pr.mid[h][j].transpose();
        }
        let grt = &pr.g * pr.pre[h - 1].transpose();
        for i in h + 1..=hh {
            acc += pr.mid[i][h].transpose() * v.layer(i).transpose() * pr.suf[i].transpose() * &grt;
        }
        *out.layer_mut(h) = acc * 2.0;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HessianMode {
    /// Assemble the full matrix and diagonalize it.
    #[default]
    Dense,
    /// Lanczos iteration driven by Hessian-vector products.
    Probe,
}

#[derive(Debug, Clone)]
pub struct MinEigen {
    pub lambda_min: f64,
    /// Unit-norm eigenvector (or Ritz vector) for `lambda_min`.
    pub vector: Direction,
    pub n_params: usize,
}

/// Dense Hessian, assembled column by column from exact Hessian-vector products.
pub fn dense_hessian(w: &Weights, bundle: &SigmaBundle) -> Result<Mat> {
    w.shape().check_data(bundle)?;
    let n = w.shape().num_params();
    if n > MAX_DENSE_PARAMS {
        return Err(Error::TooLarge(format!("{n} parameters exceeds {MAX_DENSE_PARAMS}")));
    }
    let pr = Products::new(w, bundle);
    let mut hmat = Mat::zeros(n, n);
    let mut e = vec![0.0; n];
    for a in 0..n {
        e[a] = 1.0;
        let col = hvp_with(&pr, w, bundle, &Weights::unflatten(w.shape(), &e)?).flatten();
        e[a] = 0.0;
        hmat.column_mut(a).copy_from_slice(&col);
    }
    let sym = (&hmat + hmat.transpose()) * 0.5;
    Ok(sym)
}

/// Smallest Hessian eigenvalue. Results are deterministic.
pub fn hessian_min_eig(w: &Weights, bundle: &SigmaBundle, mode: HessianMode) -> Result<MinEigen> {
    match mode {
        HessianMode::Dense => {
            let h = dense_hessian(w, bundle)?;
            let n = h.nrows();
            if n == 0 {
                return Err(Error::InvalidShape("no parameters".into()));
            }
            let (vals, vecs) = symmetric_eigen(&h)?;
            let lambda_min = vals[0];
            let v: Vec<f64> = vecs.column(0).iter().copied().collect();
            Ok(MinEigen { lambda_min, vector: Weights::unflatten(w.shape(), &v)?, n_params: n })
        }
        HessianMode::Probe => lanczos_min(w, bundle),
    }
}

fn lanczos_min(w: &Weights, bundle: &SigmaBundle) -> Result<MinEigen> {
    w.shape().check_data(bundle)?;
    let shape = w.shape();
    let n = shape.num_params();
    let pr = Products::new(w, bundle);
    let matvec = |x: &[f64]| -> Result<Vec<f64>> {
        Ok(hvp_with(&pr, w, bundle, &Weights::unflatten(shape, x)?).flatten())
    };
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();

    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut q0: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let nrm = dot(&q0, &q0).sqrt();
    q0.iter_mut().for_each(|x| *x /= nrm);

    let kmax = n.min(400);
    let mut basis: Vec<Vec<f64>> = vec![q0];
    let mut alpha = Vec::new();
    let mut beta: Vec<f64> = Vec::new();
    let mut best = (f64::INFINITY, Vec::new());
    for k in 0..kmax {
        let mut z = matvec(&basis[k])?;
        let a = dot(&z, &basis[k]);
        alpha.push(a);
        // Full reorthogonalization, twice.
        for _ in 0..2 {
            for q in &basis {
                let c = dot(&z, q);
                z.iter_mut().zip(q).for_each(|(x, y)| *x -= c * y);
            }
        }
        let b = dot(&z, &z).sqrt();
        let m = alpha.len();
        let done = k + 1 == kmax || b <= 1e-14 * alpha.iter().map(|x| x.abs()).fold(1.0, f64::max);
        if done || m % 10 == 0 {
            let t = Mat::from_fn(m, m, |i, j| {
                if i == j {
                    alpha[i]
                } else if i + 1 == j {
                    beta[i]
                } else if j + 1 == i {
                    beta[j]
                } else {
                    0.0
                }
            });
            let (vals, vecs) = symmetric_eigen(&t)?;
            let theta = vals[0];
            let s = vecs.column(0);
            let resid = (b * s[m - 1]).abs();
            let mut y = vec![0.0; n];
            for (c, q) in s.iter().zip(&basis) {
                y.iter_mut().zip(q).for_each(|(acc, v)| *acc += c * v);
            }
            best = (theta, y);
            let tnorm = vals.iter().map(|x| x.abs()).fold(1.0, f64::max);
            if done || resid <= 1e-10 * tnorm {
                break;
            }
        }
        beta.push(b);
        basis.push(z.iter().map(|x| x / b).collect());
    }
    let (lambda_min, y) = best;
    let nrm = dot(&y, &y).sqrt();
    let y: Vec<f64> = y.iter().map(|x| x / nrm).collect();
    Ok(MinEigen { lambda_min, vector: Weights::unflatten(shape, &y)?, n_params: n })
}

/// How a negative-curvature direction was built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WitnessKind {
    /// Rotates `u_j` (in the support) toward `u_i` (outside it, `λ_i > λ_j`).
    EigenSwap { i: usize, j: usize },
    /// Exploits a pivot `(i, j)` that is not tightened.
    Untightened { pivot_i: usize, pivot_j: usize, case: u8 },
}

#[derive(Debug, Clone)]
pub struct Witness {
    pub direction: Direction,
    pub kind: WitnessKind,
    /// Closed-form value of `c2` along `direction`.
    pub predicted_c2: f64,
    /// `c2` recomputed from the exact expansion.
    pub c2: f64,
}

impl Witness {
    /// Rescales the direction to `‖W'‖_F² = 1 + ‖W‖_F²`, the normalization the
    /// pivot witnesses use. `c2` scales with the squared norm.
    pub fn normalized(mut self, w: &Weights) -> Witness {
        let n2 = self.direction.frob2();
        if n2 > 0.0 {
            let f = (1.0 + w.frob2()) / n2;
            self.direction = self.direction.scaled(f.sqrt());
            self.predicted_c2 *= f;
            self.c2 *= f;
        }
        self
    }
}

fn measured_c2(w: &Weights, dir: &Direction, bundle: &SigmaBundle) -> Result<f64> {
    Ok(taylor_coefficients(w, dir, bundle)?[2])
}

/// Negative-curvature direction at a critical point whose support is not `{1..r}`.
///
/// With `j ∈ S`, `i ∉ S`, `λ_i > λ_j`, the direction has `c2 = λ_j − λ_i`.
pub fn witness_eigen_swap(w: &Weights, bundle: &SigmaBundle, support: &Support) -> Result<Witness> {
    w.shape().check_data(bundle)?;
    if support.is_leading() {
        return Err(Error::NotApplicable(format!("support {support} is already leading")));
    }
    let hh = w.depth();
    let d_y = w.shape().d_y();
    let r = support.len();
    let i = support.complement(d_y)[0];
    let j = *support.indices().last().expect("nonempty support");
    let ui = bundle.u.column(i - 1).into_owned();
    let uj = bundle.u.column(j - 1).into_owned();
    let k = w.prod(hh, 2);
    let kp = pinv_rank(&k, r);

    let mut dir = Weights::zeros(w.shape());
    *dir.layer_mut(hh) = &ui * (uj.transpose() * w.layer(hh));
    *dir.layer_mut(1) = &kp * &uj * (ui.transpose() * &bundle.regression);
    let predicted_c2 = bundle.lambdas[j - 1] - bundle.lambdas[i - 1];
    let c2 = measured_c2(w, &dir, bundle)?;
    Ok(Witness { direction: dir, kind: WitnessKind::EigenSwap { i, j }, predicted_c2, c2 })
}

/// Unit `b ∈ Ker A` maximizing `‖M b‖`, with `a = M b / ‖M b‖²` so that `aᵀ M b = 1`.
fn kernel_pair(a: &Mat, rank_a: usize, m: &Mat) -> Result<(Mat, Mat)> {
    let n = null_space(a, rank_a);
    if n.ncols() == 0 {
        return Err(Error::InternalInconsistency("kernel is trivial".into()));
    }
    let mn = m * &n;
    let d = svd(&mn);
    let top = d.s.first().copied().unwrap_or(0.0);
    let scale = m.norm().max(1.0);
    if top <= 1e-10 * scale {
        return Err(Error::InternalInconsistency("kernel vector is annihilated".into()));
    }
    let b: Mat = &n * d.v.columns(0, 1);
    let mb = m * &b;
    let a_vec = &mb / mb.norm_squared();
    Ok((b, a_vec))
}

fn argmax_abs(m: &Mat) -> Option<(usize, usize, f64)> {
    let mut best: Option<(usize, usize, f64)> = None;
    for c in 0..m.ncols() {
        for r in 0..m.nrows() {
            let v = m[(r, c)];
            if best.is_none_or(|b| v.abs() > b.2.abs()) {
                best = Some((r, c, v));
            }
        }
    }
    best
}

fn unit(n: usize, k: usize) -> Mat {
    let mut e = Mat::zeros(n, 1);
    e[(k, 0)] = 1.0;
    e
}

/// Finishes a witness `β A + γ B` with `A`, `B` supported on different layers.
///
/// Along this family `c2 = β² a + β γ c` with `a = c2(A)` and `c` the cross term.
/// `(β, γ)` minimizes `c2` under `‖β A + γ B‖_F² = 1 + ‖W‖_F²`, which makes the
/// witness independent of how the layers happen to be scaled.
fn combine(
    w: &Weights,
    bundle: &SigmaBundle,
    a_dir: Direction,
    b_dir: Direction,
    c: f64,
    pivot: (usize, usize),
    case: u8,
) -> Result<Witness> {
    let a = {
        let pr = Products::new(w, bundle);
        let p1 = pr.first_order(&a_dir);
        inner(&(&p1 * &bundle.sxx), &p1)
    };
    let (na, nb) = (a_dir.frob2(), b_dir.frob2());
    if c == 0.0 || na == 0.0 || nb == 0.0 {
        return Err(Error::InternalInconsistency(format!("degenerate witness at pivot {pivot:?}")));
    }
    // Smallest eigenpair of [[p, s], [s, 0]] in coordinates normalized by ‖A‖, ‖B‖.
    let p = a / na;
    let s = c / (2.0 * (na * nb).sqrt());
    let mu = (p - (p * p + 4.0 * s * s).sqrt()) / 2.0;
    let (x, y) = (mu, s);
    let len = (x * x + y * y).sqrt();
    let n2 = 1.0 + w.frob2();
    let beta = n2.sqrt() * x / len / na.sqrt();
    let gamma = n2.sqrt() * y / len / nb.sqrt();
    let dir = a_dir.scaled(beta).add_scaled(&b_dir, gamma);
    let predicted_c2 = n2 * mu;
    let c2 = measured_c2(w, &dir, bundle)?;
    Ok(Witness {
        direction: dir,
        kind: WitnessKind::Untightened { pivot_i: pivot.0, pivot_j: pivot.1, case },
        predicted_c2,
        c2,
    })
}

/// Negative-curvature direction at a critical point with `S = {1..r}`, `r < r_max`,
/// from a pivot `(i, j)` that is not tightened.
pub fn witness_untightened(
    w: &Weights,
    bundle: &SigmaBundle,
    pivot: (usize, usize),
    tol: RankTolerance,
) -> Result<Witness> {
    w.shape().check_data(bundle)?;
    let hh = w.depth();
    let (i, j) = pivot;
    if !(1 <= j && j < i && i <= hh) {
        return Err(Error::InvalidPivot(format!("({i}, {j}) with H = {hh}")));
    }
    let r = numeric_rank(&w.global_map(), tol);
    if r >= w.shape().r_max() {
        return Err(Error::NotApplicable("rank already maximal".into()));
    }
    let rep = pivot_report(w, bundle, i, j, tol)?;
    if rep.tightened {
        return Err(Error::NotApplicable(format!("pivot ({i}, {j}) is tightened")));
    }
    if j >= 2 && numeric_rank(&w.prod(hh, j + 1), tol) > r {
        // The pivot (j, 1) is then not tightened either.
        return witness_pivot_first_layer(w, bundle, j, r);
    }
    match (i, j) {
        (_, 1) => witness_pivot_first_layer(w, bundle, i, r),
        _ => witness_pivot_interior(w, bundle, i, j, r),
    }
}

/// Pivots `(i, 1)`.
fn witness_pivot_first_layer(w: &Weights, bundle: &SigmaBundle, i: usize, r: usize) -> Result<Witness> {
    let hh = w.depth();
    let d_y = w.shape().d_y();
    let q: Vec<usize> = (r + 1..=d_y).collect();
    let k = w.prod(hh, 2);
    let (b, a_vec) = kernel_pair(&k, r, &w.prod(i - 1, 2))?;
    let mut a_dir = Weights::zeros(w.shape());
    let mut b_dir = Weights::zeros(w.shape());
    let (uk, lam, c_pair, case) = if i == hh {
        let uk = bundle.u.column(r).into_owned();
        *a_dir.layer_mut(hh) = &uk * a_vec.transpose();
        (uk, bundle.lambdas[r], 1.0, 2)
    } else {
        let li = w.prod(hh, i + 1);
        let uq = bundle.u_cols(&q);
        let (kq, l, v) = argmax_abs(&(uq.transpose() * &li))
            .ok_or_else(|| Error::InternalInconsistency("empty complement".into()))?;
        *a_dir.layer_mut(i) = unit(w.shape().d(i), l) * a_vec.transpose();
        (bundle.u.column(r + kq).into_owned(), bundle.lambdas[r + kq], v, 1)
    };
    *b_dir.layer_mut(1) = &b * (uk.transpose() * &bundle.regression);
    let c = -2.0 * lam * c_pair;
    combine(w, bundle, a_dir, b_dir, c, (i, 1), case)
}

/// Pivots `(i, j)` with `j >= 2` and `rank(W_H⋯W_{j+1}) = r`.
fn witness_pivot_interior(w: &Weights, bundle: &SigmaBundle, i: usize, j: usize, r: usize) -> Result<Witness> {
    let hh = w.depth();
    let d_y = w.shape().d_y();
    let q: Vec<usize> = (r + 1..=d_y).collect();
    let uq = bundle.u_cols(&q);
    let rj = w.prod(j - 1, 1);
    let li = w.prod(hh, i + 1);
    let pairing = &rj * &bundle.sxy * &uq * uq.transpose() * &li;
    let (l, kk, v) = argmax_abs(&pairing).ok_or_else(|| Error::InternalInconsistency("empty pairing".into()))?;
    let (b, a_vec) = kernel_pair(&w.prod(hh, j + 1), r, &w.prod(i - 1, j + 1))?;
    let mut a_dir = Weights::zeros(w.shape());
    let mut b_dir = Weights::zeros(w.shape());
    *a_dir.layer_mut(i) = unit(w.shape().d(i), kk) * a_vec.transpose();
    *b_dir.layer_mut(j) = &b * unit(w.shape().d(j - 1), l).transpose();
    let case = if i == hh { 3 } else { 4 };
    combine(w, bundle, a_dir, b_dir, -2.0 * v, (i, j), case)
}

/// Inclusive index range, empty when `lo > hi`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexRange {
    pub lo: usize,
    pub hi: usize,
}

impl IndexRange {
    pub fn iter(&self) -> std::ops::RangeInclusive<usize> {
        self.lo..=self.hi
    }

    pub fn is_empty(&self) -> bool {
        self.lo > self.hi
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TightenedStructure {
    pub r: usize,
    pub p: usize,
    pub q: usize,
    /// `[p, H-1]`
    pub j1: IndexRange,
    /// `[q+1, p-1]`
    pub j2: IndexRange,
    /// `[2, q]`
    pub j3: IndexRange,
}

/// Relative tolerance for the block-structure checks on canonical points.
pub const STRUCTURE_TOL: f64 = 1e-8;

fn structure_scale(w: &Weights) -> f64 {
    1.0 + w.layers().iter().map(|l| l.norm()).fold(0.0, f64::max)
}

fn close(a: &Mat, b: &Mat, tol: f64) -> bool {
    a.shape() == b.shape() && (a - b).norm() <= tol
}

fn diag_identity(rows: usize, cols: usize, r: usize) -> Mat {
    let mut m = Mat::zeros(rows, cols);
    for k in 0..r.min(rows).min(cols) {
        m[(k, k)] = 1.0;
    }
    m
}

/// Checks that `w` has identity basis changes and support `{1..r}`; returns `r`.
fn require_canonical(w: &Weights, bundle: &SigmaBundle, tol: RankTolerance) -> Result<usize> {
    w.shape().check_data(bundle)?;
    let hh = w.depth();
    let shape = w.shape();
    let r = numeric_rank(&w.global_map(), tol);
    let eps = STRUCTURE_TOL * structure_scale(w);
    let us = bundle.u_cols(&(1..=r).collect::<Vec<_>>());
    let fail = |what: &str| Err(Error::NeedsCanonicalization(what.to_string()));

    let w1 = w.layer(1);
    if !close(&sub(w1, 0, 0, r, shape.d(0)), &(us.transpose() * &bundle.regression), eps) {
        return fail("top block of W_1");
    }
    for h in 2..hh {
        let wh = w.layer(h);
        let (rows, cols) = wh.shape();
        let ok = close(&sub(wh, 0, 0, r, r), &Mat::identity(r, r), eps)
            && sub(wh, 0, r, r, cols - r).norm() <= eps
            && sub(wh, r, 0, rows - r, r).norm() <= eps;
        if !ok {
            return fail(&format!("W_{h} is not block diagonal"));
        }
    }
    let wh = w.layer(hh);
    let cols = wh.ncols();
    if !close(&sub(wh, 0, 0, shape.d_y(), r), &us, eps) {
        return fail("leading columns of W_H");
    }
    if (us.transpose() * sub(wh, 0, r, shape.d_y(), cols - r)).norm() > eps {
        return fail("W_H mixes the support into trailing columns");
    }
    Ok(r)
}

/// Indices `p`, `q` and the index sets `J1, J2, J3` of a tightened point in canonical form.
pub fn tightened_structure(w: &Weights, bundle: &SigmaBundle, tol: RankTolerance) -> Result<TightenedStructure> {
    let hh = w.depth();
    if hh < 3 {
        return Err(Error::NotApplicable("needs at least three layers".into()));
    }
    let r = require_canonical(w, bundle, tol)?;
    if r >= w.shape().r_max() {
        return Err(Error::NotApplicable("rank is maximal".into()));
    }
    if !is_tightened(w, bundle, tol, false)? {
        return Err(Error::NotTightened("some pivot is not tightened".into()));
    }
    let p = (3..=hh)
        .rev()
        .find(|&p| numeric_rank(&w.prod(hh, p), tol) == r)
        .ok_or_else(|| Error::InternalInconsistency("no index p".into()))?;
    let q = (1..=(p - 1).min(hh - 2))
        .find(|&q| numeric_rank(&(w.prod(q, 1) * &bundle.sxy), tol) == r)
        .ok_or_else(|| Error::InternalInconsistency("no index q".into()))?;

    let shape = w.shape();
    let eps = STRUCTURE_TOL * structure_scale(w).powi(hh as i32) * (1.0 + bundle.sxy.norm());
    let us = bundle.u_cols(&(1..=r).collect::<Vec<_>>());
    let uq = bundle.u_cols(&(r + 1..=shape.d_y()).collect::<Vec<_>>());
    let bad = |what: String| Err(Error::InternalInconsistency(format!("tightened structure: {what}")));
    for i in 1..p {
        let want = crate::linalg::hcat(&us, &Mat::zeros(shape.d_y(), shape.d(i) - r));
        if !close(&w.prod(hh, i + 1), &want, eps) {
            return bad(format!("W_H⋯W_{} is not [U_S, 0]", i + 1));
        }
    }
    for i in p..=hh {
        let m = w.prod(i - 1, 2);
        if !close(&m, &diag_identity(m.nrows(), m.ncols(), r), eps) {
            return bad(format!("W_{}⋯W_2 is not diag(I, 0)", i - 1));
        }
    }
    let z = z_blocks(w, bundle, r);
    for i in q + 1..=hh {
        let zp = z_prod(&z, i - 1, shape.d(0));
        if (zp * &bundle.sxy * &uq).norm() > eps {
            return bad(format!("Z_{}⋯Z_1 Σ_XY U_Q is nonzero", i - 1));
        }
    }
    for i in 1..=q {
        let m = w.prod(hh - 1, i + 1);
        if !close(&m, &diag_identity(m.nrows(), m.ncols(), r), eps) {
            return bad(format!("W_{}⋯W_{} is not diag(I, 0)", hh - 1, i + 1));
        }
    }
    Ok(TightenedStructure {
        r,
        p,
        q,
        j1: IndexRange { lo: p, hi: hh - 1 },
        j2: IndexRange { lo: q + 1, hi: p - 1 },
        j3: IndexRange { lo: 2, hi: q },
    })
}

/// `Z_1..Z_H` read from a canonical point (`Z_H = U_Qᵀ (W_H)_{·, r+1:}`).
fn z_blocks(w: &Weights, bundle: &SigmaBundle, r: usize) -> Vec<Mat> {
    let hh = w.depth();
    let shape = w.shape();
    let mut z = Vec::with_capacity(hh);
    let w1 = w.layer(1);
    z.push(sub(w1, r, 0, shape.d(1) - r, shape.d(0)));
    for h in 2..hh {
        let wh = w.layer(h);
        z.push(sub(wh, r, r, wh.nrows() - r, wh.ncols() - r));
    }
    let uq = bundle.u_cols(&(r + 1..=shape.d_y()).collect::<Vec<_>>());
    let wh = w.layer(hh);
    z.push(uq.transpose() * sub(wh, 0, r, shape.d_y(), wh.ncols() - r));
    z
}

/// `Z_k ⋯ Z_1`, or `I_{d_x}` for `k = 0`.
fn z_prod(z: &[Mat], k: usize, d_x: usize) -> Mat {
    let mut acc = Mat::identity(d_x, d_x);
    for b in z.iter().take(k) {
        acc = b * acc;
    }
    acc
}

/// `Z_H Z_{H-1} ⋯ Z_{k}`.
fn z_prod_top(z: &[Mat], k: usize) -> Mat {
    let hh = z.len();
    let mut acc = z[hh - 1].clone();
    for h in (k..hh).rev() {
        acc = acc * &z[h - 1];
    }
    acc
}

/// Terms of the nonnegative decomposition of `c2` at a tightened point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FtStTerms {
    /// `Σ_{a≤r<b} (λ_a − λ_b) A_{b,a}²`.
    pub a1: f64,
    /// `‖A_2‖_F²`.
    pub a2: f64,
    /// `‖A_3 − A_4‖_F²`.
    pub a34: f64,
    /// `a1 + a2 + a34`.
    pub total: f64,
    /// `c2` from the exact expansion, for comparison.
    pub c2: f64,
}

/// Writes `c2(W, W')` at a tightened point in canonical form as a sum of
/// three nonnegative terms.
pub fn ftst_decomposition(w: &Weights, dir: &Direction, bundle: &SigmaBundle, tol: RankTolerance) -> Result<FtStTerms> {
    check_pair(w, dir, bundle)?;
    let ts = tightened_structure(w, bundle, tol)?;
    let hh = w.depth();
    let shape = w.shape();
    let r = ts.r;
    let d_y = shape.d_y();
    let dh = |h: usize| shape.d(h);
    let x = &bundle.x;
    let us = bundle.u_cols(&(1..=r).collect::<Vec<_>>());
    let uq = bundle.u_cols(&(r + 1..=d_y).collect::<Vec<_>>());
    let vq = bundle.v_cols(&(r + 1..=d_y).collect::<Vec<_>>());
    let z = z_blocks(w, bundle, r);
    let sy = us.transpose() * &bundle.sigma_half;
    let proj_s = |a: &Mat| a - (a * &vq) * vq.transpose();

    let top_left = |h: usize| sub(dir.layer(h), 0, 0, r, r);
    let top_right = |h: usize| sub(dir.layer(h), 0, r, r, dh(h - 1) - r);
    let low_left = |h: usize| sub(dir.layer(h), r, 0, dh(h) - r, r);
    let wh_lead = sub(dir.layer(hh), 0, 0, d_y, r);
    let w1_top = sub(dir.layer(1), 0, 0, r, dh(0));

    let mut a2 = us.transpose() * &wh_lead * &sy;
    for i in ts.j1.iter() {
        a2 += top_left(i) * &sy;
    }
    for i in ts.j2.iter() {
        a2 += top_left(i) * &sy + top_right(i) * z_prod(&z, i - 1, dh(0)) * x;
    }
    let mut a4t = Mat::zeros(r, d_y - r);
    for i in ts.j3.iter() {
        let zx = top_right(i) * z_prod(&z, i - 1, dh(0)) * x;
        a2 += top_left(i) * &sy + proj_s(&zx);
        a4t += &zx * &vq;
    }
    let w1x = &w1_top * x;
    a2 += proj_s(&w1x);
    a4t += &w1x * &vq;
    let a4 = a4t.transpose();

    let mut amat = uq.transpose() * &wh_lead;
    for i in ts.j1.iter() {
        amat += z_prod_top(&z, i + 1) * low_left(i);
    }
    let mut a1 = 0.0;
    for a in 0..r {
        for b in 0..d_y - r {
            a1 += (bundle.lambdas[a] - bundle.lambdas[r + b]) * amat[(b, a)].powi(2);
        }
    }
    let delta_q = Mat::from_diagonal(&nalgebra::DVector::from_iterator(
        d_y - r,
        bundle.lambdas[r..].iter().map(|l| l.sqrt()),
    ));
    let a3 = delta_q * &amat;
    let a2n = frob2(&a2);
    let a34 = frob2(&(&a3 - &a4));
    Ok(FtStTerms { a1, a2: a2n, a34, total: a1 + a2n + a34, c2: measured_c2(w, dir, bundle)? })
}
