//! Construction, enumeration and canonicalization of critical points.
//!
//! A critical point is described by a support `S ⊆ {1..d_y}` of size `r`,
//! blocks `Z_1..Z_H` and optional invertible `D_1..D_{H-1}`:
//!
//! ```text
//! W_H = [U_S, U_Q Z_H] D_{H-1}⁻¹
//! W_h = D_h diag(I_r, Z_h) D_{h-1}⁻¹        1 < h < H
//! W_1 = D_1 [U_Sᵀ Σ_YX Σ_XX⁻¹ ; Z_1]
//! ```
//!
//! with `Q` the complement of `S`. The point is certified critical when
//! `r = r_max` or at least two of the `Z` blocks vanish.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::SigmaBundle;
use crate::error::{Error, Result};
use crate::linalg::{
    condition_number, hcat, identity_block, inverse, null_space, numeric_rank, pinv_rank, sub,
    svd, vcat, Mat, RankTolerance,
};
use crate::network::{gradient_scale, NetworkShape, Weights};

/// Condition number above which a supplied basis change is refused.
pub const MAX_BASIS_COND: f64 = 1e8;

/// Subset of eigenvector indices, stored 1-based and sorted.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Support(Vec<usize>);

impl Support {
    pub fn new(mut idx: Vec<usize>, d_y: usize) -> Result<Self> {
        idx.sort_unstable();
        let before = idx.len();
        idx.dedup();
        if idx.len() != before {
            return Err(Error::InvalidShape("support has repeated indices".into()));
        }
        if idx.iter().any(|&i| i == 0 || i > d_y) {
            return Err(Error::InvalidShape(format!("support {idx:?} is not inside 1..={d_y}")));
        }
        Ok(Support(idx))
    }

    /// `{1, ..., r}`.
    pub fn leading(r: usize) -> Self {
        Support((1..=r).collect())
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// True iff the support is `{1, ..., |S|}`.
    pub fn is_leading(&self) -> bool {
        self.0.iter().enumerate().all(|(k, &i)| i == k + 1)
    }

    pub fn complement(&self, d_y: usize) -> Vec<usize> {
        (1..=d_y).filter(|i| !self.0.contains(i)).collect()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.0.binary_search(&i).is_ok()
    }
}

impl std::fmt::Display for Support {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|i| i.to_string()).collect();
        write!(f, "{{{}}}", parts.join(","))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriticalPointSpec {
    pub support: Support,
    /// `Z_1, ..., Z_H`.
    pub z_blocks: Vec<Mat>,
    /// `D_1, ..., D_{H-1}`; `None` means identity.
    pub d_blocks: Option<Vec<Mat>>,
}

impl CriticalPointSpec {
    pub fn rank(&self) -> usize {
        self.support.len()
    }

    /// Expected shape of `Z_h` for a given network and rank.
    pub fn z_shape(shape: &NetworkShape, r: usize, h: usize) -> (usize, usize) {
        let hh = shape.depth();
        let rows = shape.d(h).saturating_sub(r);
        let cols = if h == 1 { shape.d(0) } else { shape.d(h - 1).saturating_sub(r) };
        if h == hh {
            (shape.d_y().saturating_sub(r), cols)
        } else {
            (rows, cols)
        }
    }

    /// Indices `h` of the blocks `Z_h` that are exactly zero.
    pub fn zero_blocks(&self) -> Vec<usize> {
        self.z_blocks
            .iter()
            .enumerate()
            .filter(|(_, z)| z.iter().all(|&x| x == 0.0))
            .map(|(k, _)| k + 1)
            .collect()
    }

    pub fn is_certified(&self, shape: &NetworkShape) -> bool {
        self.rank() == shape.r_max() || self.zero_blocks().len() >= 2
    }
}

fn validate_spec(shape: &NetworkShape, bundle: &SigmaBundle, spec: &CriticalPointSpec) -> Result<()> {
    shape.check_data(bundle)?;
    let hh = shape.depth();
    let r = spec.rank();
    if r > shape.r_max() {
        return Err(Error::InvalidRank(format!("|S| = {r} exceeds r_max = {}", shape.r_max())));
    }
    if spec.support.indices().iter().any(|&i| i > shape.d_y()) {
        return Err(Error::InvalidShape(format!("support {} exceeds d_y", spec.support)));
    }
    if spec.z_blocks.len() != hh {
        return Err(Error::InvalidShape(format!("need {hh} Z blocks, got {}", spec.z_blocks.len())));
    }
    for (k, z) in spec.z_blocks.iter().enumerate() {
        let want = CriticalPointSpec::z_shape(shape, r, k + 1);
        if z.shape() != want {
            return Err(Error::InvalidShape(format!("Z_{} is {:?}, expected {:?}", k + 1, z.shape(), want)));
        }
    }
    if let Some(ds) = &spec.d_blocks {
        if ds.len() != hh - 1 {
            return Err(Error::InvalidShape(format!("need {} D blocks, got {}", hh - 1, ds.len())));
        }
        for (k, d) in ds.iter().enumerate() {
            let n = shape.d(k + 1);
            if d.shape() != (n, n) {
                return Err(Error::InvalidShape(format!("D_{} must be {n}x{n}", k + 1)));
            }
            let c = condition_number(d);
            if !(c <= MAX_BASIS_COND) {
                return Err(Error::IllConditioned(format!("cond(D_{}) = {c:.3e}", k + 1)));
            }
        }
    }
    if !spec.is_certified(shape) {
        return Err(Error::NotCertifiedCritical(format!(
            "r = {r} < r_max = {} and only {} zero Z blocks",
            shape.r_max(),
            spec.zero_blocks().len()
        )));
    }
    Ok(())
}

/// Builds the weights described by `spec`.
pub fn build_critical_point(shape: &NetworkShape, bundle: &SigmaBundle, spec: &CriticalPointSpec) -> Result<Weights> {
    validate_spec(shape, bundle, spec)?;
    let hh = shape.depth();
    let r = spec.rank();
    let us = bundle.u_cols(spec.support.indices());
    let uq = bundle.u_cols(&spec.support.complement(shape.d_y()));
    let top = us.transpose() * &bundle.regression;

    let mut layers = Vec::with_capacity(hh);
    layers.push(vcat(&top, &spec.z_blocks[0]));
    for h in 2..hh {
        layers.push(identity_block(r, &spec.z_blocks[h - 1]));
    }
    layers.push(hcat(&us, &(&uq * &spec.z_blocks[hh - 1])));

    if let Some(ds) = &spec.d_blocks {
        let invs = ds.iter().map(inverse).collect::<Result<Vec<_>>>()?;
        for h in 1..=hh {
            let mut w = layers[h - 1].clone();
            if h >= 2 {
                w *= &invs[h - 2];
            }
            if h < hh {
                w = &ds[h - 1] * w;
            }
            layers[h - 1] = w;
        }
    }
    Weights::new(shape.clone(), layers)
}

/// `tr Σ_YY − Σ_{i∈S} λ_i`.
pub fn critical_value(bundle: &SigmaBundle, support: &Support) -> f64 {
    let s: f64 = support.indices().iter().map(|&i| bundle.lambdas[i - 1]).sum();
    bundle.syy.trace() - s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KindHint {
    /// `S = {1..r}`: can host non-strict saddles (or the global minimum for `r = r_max`).
    PlateauCandidate,
    /// Every point with this support is a strict saddle.
    StrictSaddle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticalValueEntry {
    pub support: Support,
    pub value: f64,
    pub kind_hint: KindHint,
}

/// Largest `d_y` accepted by [`enumerate_critical_values`].
pub const MAX_ENUMERATE_DY: usize = 20;

/// All critical values, one per support of size at most `r_max`, sorted increasing.
pub fn enumerate_critical_values(shape: &NetworkShape, bundle: &SigmaBundle) -> Result<Vec<CriticalValueEntry>> {
    shape.check_data(bundle)?;
    let d_y = shape.d_y();
    if d_y > MAX_ENUMERATE_DY {
        return Err(Error::TooLarge(format!("d_y = {d_y} exceeds {MAX_ENUMERATE_DY}")));
    }
    let r_max = shape.r_max();
    let mut out = Vec::new();
    for mask in 0u32..(1u32 << d_y) {
        if mask.count_ones() as usize > r_max {
            continue;
        }
        let idx: Vec<usize> = (0..d_y).filter(|b| mask >> b & 1 == 1).map(|b| b + 1).collect();
        let support = Support(idx);
        let kind_hint = if support.is_leading() { KindHint::PlateauCandidate } else { KindHint::StrictSaddle };
        out.push(CriticalValueEntry { value: critical_value(bundle, &support), support, kind_hint });
    }
    out.sort_by(|a, b| a.value.total_cmp(&b.value).then_with(|| a.support.cmp(&b.support)));
    Ok(out)
}

/// Diagonal entries of `Uᵀ P_K U` inside this band are ambiguous.
pub const AMBIGUOUS_BAND: (f64, f64) = (0.25, 0.75);

/// Projector onto the range of `K = W_H⋯W_2`, truncated to rank `r`.
fn range_projector(k: &Mat, r: usize) -> Mat {
    let d = svd(k);
    let ur = d.u.columns(0, r.min(d.s.len())).into_owned();
    &ur * ur.transpose()
}

/// Recovers `S` from a critical point as `{i : (Uᵀ P_K U)_ii > 1/2}`.
///
/// `r` is the numeric rank of the global map; the projector onto the range of
/// `W_H⋯W_2` is truncated to that rank, which is its exact rank at critical points.
pub fn associated_support(w: &Weights, bundle: &SigmaBundle, tol: RankTolerance) -> Result<Support> {
    w.shape().check_data(bundle)?;
    let r = numeric_rank(&w.global_map(), tol);
    let k = w.prod(w.depth(), 2);
    let pk = range_projector(&k, r);
    let diag = (bundle.u.transpose() * pk * &bundle.u).diagonal();
    let mut idx = Vec::new();
    for (i, &v) in diag.iter().enumerate() {
        if v > AMBIGUOUS_BAND.0 && v < AMBIGUOUS_BAND.1 {
            return Err(Error::AmbiguousProjector(format!("diagonal entry {} = {v:.4}", i + 1)));
        }
        if v > 0.5 {
            idx.push(i + 1);
        }
    }
    if idx.len() != r {
        return Err(Error::InternalInconsistency(format!(
            "recovered |S| = {} but rank of global map is {r}",
            idx.len()
        )));
    }
    Support::new(idx, w.shape().d_y())
}

#[derive(Debug, Clone)]
pub struct CanonicalForm {
    pub spec: CriticalPointSpec,
    /// `W̃_h = D_h⁻¹ W_h D_{h-1}`, of the form with `D = I`.
    pub weights: Weights,
    /// Whether the recovered `Z` blocks certify criticality.
    pub certified: bool,
}

/// Relative size below which recovered `Z` blocks are set to exactly zero.
pub const ZERO_BLOCK_TOL: f64 = 1e-8;

/// Gradient bound, relative to [`gradient_scale`], for accepting a point as critical.
pub const CANONICAL_GRAD_TOL: f64 = 1e-4;

/// Finds `D_1..D_{H-1}` bringing a critical point to the form with identity basis changes.
pub fn canonical_form(w: &Weights, bundle: &SigmaBundle, tol: RankTolerance) -> Result<CanonicalForm> {
    let shape = w.shape().clone();
    shape.check_data(bundle)?;
    let g = w.gradient(bundle).norm();
    let gs = gradient_scale(w, bundle);
    if g > CANONICAL_GRAD_TOL * gs {
        return Err(Error::NotCritical(format!("gradient norm {g:.3e} vs scale {gs:.3e}")));
    }
    let hh = shape.depth();
    let support = associated_support(w, bundle, tol)?;
    let r = support.len();
    let us = bundle.u_cols(support.indices());
    let uq = bundle.u_cols(&support.complement(shape.d_y()));

    // D_1 = [C, B] with B spanning Ker K and K C = U_S. Taking C = W_1 R_S⁺ with
    // R_S = U_Sᵀ Σ_YX Σ_XX⁻¹ keeps Z_1 = 0 whenever the rows of W_1 allow it.
    let k = w.prod(hh, 2);
    let rs = us.transpose() * &bundle.regression;
    let c1 = w.layer(1) * pinv_rank(&rs, r);
    let d1 = hcat(&c1, &null_space(&k, r));
    let mut ds: Vec<Mat> = vec![Mat::zeros(0, 0); hh - 1];
    ds[0] = d1.clone();

    if hh >= 3 {
        let d_prev = |w: &Weights, h: usize| w.prod(h - 1, 2) * &d1;
        // Top layer.
        let a = w.layer(hh);
        let b = d_prev(w, hh);
        let e = complete_leading(&b, r)?;
        let n = e.ncols();
        let rest = sub(&e, 0, r, n, n - r);
        let l = us.transpose() * a * &rest;
        let er = sub(&e, 0, 0, n, r);
        ds[hh - 2] = hcat(&er, &(&rest - &er * &l));
        // Remaining layers, top down.
        for h in (3..hh).rev() {
            let bh = inverse(&ds[h - 1])? * w.layer(h);
            let c = d_prev(w, h);
            let e = complete_leading(&c, r)?;
            let bp = &bh * &e;
            let n = e.ncols();
            let bur = sub(&bp, 0, r, r, n - r);
            let er = sub(&e, 0, 0, n, r);
            let rest = sub(&e, 0, r, n, n - r);
            ds[h - 2] = hcat(&er, &(&rest - &er * &bur));
        }
    }

    for (k, d) in ds.iter().enumerate() {
        let c = condition_number(d);
        if !(c <= MAX_BASIS_COND) {
            return Err(Error::IllConditioned(format!("recovered D_{} has cond {c:.3e}", k + 1)));
        }
    }
    let wt = w.basis_change(&ds)?;

    // Read off the Z blocks and check the block structure.
    let scale = 1.0 + wt.layers().iter().map(|l| l.norm()).fold(0.0, f64::max);
    let checker = StructureCheck { scale };
    let mut z = Vec::with_capacity(hh);
    {
        let w1 = wt.layer(1);
        let top = us.transpose() * &bundle.regression;
        checker.near(&sub(w1, 0, 0, r, shape.d(0)), &top, "top block of W_1")?;
        z.push(sub(w1, r, 0, shape.d(1) - r, shape.d(0)));
    }
    for h in 2..hh {
        let wh = wt.layer(h);
        let (rows, cols) = wh.shape();
        checker.near(&sub(wh, 0, 0, r, r), &Mat::identity(r, r), "identity block")?;
        checker.near(&sub(wh, 0, r, r, cols - r), &Mat::zeros(r, cols - r), "upper-right block")?;
        checker.near(&sub(wh, r, 0, rows - r, r), &Mat::zeros(rows - r, r), "lower-left block")?;
        z.push(sub(wh, r, r, rows - r, cols - r));
    }
    {
        let wh = wt.layer(hh);
        let cols = wh.ncols();
        let left = sub(wh, 0, 0, shape.d_y(), r);
        checker.near(&left, &us, "leading columns of W_H")?;
        let right = sub(wh, 0, r, shape.d_y(), cols - r);
        checker.near(&(us.transpose() * &right), &Mat::zeros(r, cols - r), "support part of W_H")?;
        z.push(uq.transpose() * right);
    }

    let zero_tol = ZERO_BLOCK_TOL * scale;
    for block in &mut z {
        if block.norm() <= zero_tol {
            block.fill(0.0);
        }
    }
    let spec = CriticalPointSpec { support, z_blocks: z, d_blocks: Some(ds) };
    let certified = spec.is_certified(&shape);
    Ok(CanonicalForm { spec, weights: wt, certified })
}

/// `[b_1..b_r, complement]` from the first `r` columns of `b`.
fn complete_leading(b: &Mat, r: usize) -> Result<Mat> {
    let lead = b.columns(0, r).into_owned();
    crate::linalg::complete_basis(&lead)
}

struct StructureCheck {
    scale: f64,
}

impl StructureCheck {
    fn near(&self, a: &Mat, b: &Mat, what: &str) -> Result<()> {
        let err = (a - b).norm();
        if err > 1e-6 * self.scale {
            return Err(Error::InternalInconsistency(format!(
                "canonical form: {what} off by {err:.3e}"
            )));
        }
        Ok(())
    }
}

/// How the interior `Z_h` of the example family are filled in the non-tightened case.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZFill {
    /// Only the top-left entry is 1.
    #[default]
    TopLeft,
    /// Rectangular identity.
    Identity,
}

/// Critical points with `S = {1..r}`, `W_H = [U_S, 0]`, `W_1 = [U_Sᵀ Σ_YX Σ_XX⁻¹ ; 0]`
/// and interior layers `diag(I_r, Z_h)`.
///
/// `tightened = true` sets every `Z_h` to zero, which needs `H >= 3`.
pub fn build_example_family(
    shape: &NetworkShape,
    bundle: &SigmaBundle,
    r: usize,
    tightened: bool,
    fill: ZFill,
) -> Result<(CriticalPointSpec, Weights)> {
    let hh = shape.depth();
    if tightened && hh == 2 {
        return Err(Error::NoTightenedPointExists("two-layer networks have no tightened points".into()));
    }
    if r > shape.r_max() {
        return Err(Error::InvalidRank(format!("r = {r} exceeds r_max = {}", shape.r_max())));
    }
    let mut z = Vec::with_capacity(hh);
    for h in 1..=hh {
        let (rows, cols) = CriticalPointSpec::z_shape(shape, r, h);
        let mut b = Mat::zeros(rows, cols);
        if !tightened && h > 1 && h < hh {
            match fill {
                ZFill::TopLeft => {
                    if rows > 0 && cols > 0 {
                        b[(0, 0)] = 1.0;
                    }
                }
                ZFill::Identity => b.fill_with_identity(),
            }
        }
        z.push(b);
    }
    let spec = CriticalPointSpec { support: Support::leading(r), z_blocks: z, d_blocks: None };
    let w = build_critical_point(shape, bundle, &spec)?;
    Ok((spec, w))
}

/// Options for [`sample_spec`].
#[derive(Debug, Clone, Copy)]
pub struct SampleOptions {
    /// Draw random basis changes with this condition-number cap.
    pub basis_change_cond: Option<f64>,
    /// Standard deviation of the nonzero `Z` entries.
    pub z_std: f64,
    /// Use `S = {1..r}` instead of a uniformly random support.
    pub leading_support: bool,
    /// How many `Z` blocks to zero out when `r < r_max` (at least two).
    pub zero_blocks: usize,
}

impl Default for SampleOptions {
    fn default() -> Self {
        SampleOptions { basis_change_cond: None, z_std: 1.0, leading_support: false, zero_blocks: 2 }
    }
}

/// Random certified spec of rank `r`: random support, Gaussian `Z` blocks with
/// two of them (chosen at random) set to zero when `r < r_max`.
pub fn sample_spec<R: Rng + ?Sized>(
    shape: &NetworkShape,
    r: usize,
    opts: &SampleOptions,
    rng: &mut R,
) -> Result<CriticalPointSpec> {
    let hh = shape.depth();
    let d_y = shape.d_y();
    if r > shape.r_max() {
        return Err(Error::InvalidRank(format!("r = {r} exceeds r_max = {}", shape.r_max())));
    }
    let support = if opts.leading_support {
        Support::leading(r)
    } else {
        Support::new(sample(rng, d_y, r).into_iter().map(|i| i + 1).collect(), d_y)?
    };
    let zeros: Vec<usize> = if r < shape.r_max() {
        let k = opts.zero_blocks.clamp(2, hh);
        sample(rng, hh, k).into_iter().map(|i| i + 1).collect()
    } else {
        Vec::new()
    };
    let z_blocks = (1..=hh)
        .map(|h| {
            let (rows, cols) = CriticalPointSpec::z_shape(shape, r, h);
            if zeros.contains(&h) {
                Mat::zeros(rows, cols)
            } else {
                Mat::from_fn(rows, cols, |_, _| {
                    let z: f64 = StandardNormal.sample(rng);
                    opts.z_std * z
                })
            }
        })
        .collect();
    let d_blocks = opts
        .basis_change_cond
        .map(|c| crate::network::random_basis_change(shape, c, rng));
    Ok(CriticalPointSpec { support, z_blocks, d_blocks })
}
