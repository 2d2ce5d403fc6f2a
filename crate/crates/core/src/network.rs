//! Network shapes, weights, products of layers, loss and gradient.
//!
//! Layers are numbered from 1 as in `W_H ⋯ W_1`. `layers[0]` holds `W_1`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{DataMatrices, SigmaBundle};
use crate::error::{Error, Result};
use crate::linalg::{condition_number, frob2, inner, inverse, Mat};

/// `dims = [d_0, ..., d_H]` with `d_0 = d_x` and `d_H = d_y`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkShape {
    dims: Vec<usize>,
}

impl NetworkShape {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.len() < 3 {
            return Err(Error::InvalidShape(format!(
                "need at least two layers, got dims {dims:?}"
            )));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidShape(format!("zero width in {dims:?}")));
        }
        Ok(NetworkShape { dims })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// Width `d_h`.
    pub fn d(&self, h: usize) -> usize {
        self.dims[h]
    }

    pub fn depth(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn d_x(&self) -> usize {
        self.dims[0]
    }

    pub fn d_y(&self) -> usize {
        self.dims[self.depth()]
    }

    pub fn r_max(&self) -> usize {
        *self.dims.iter().min().expect("nonempty dims")
    }

    pub fn num_params(&self) -> usize {
        self.dims.windows(2).map(|w| w[0] * w[1]).sum()
    }

    pub fn check_data(&self, bundle: &SigmaBundle) -> Result<()> {
        if self.d_x() != bundle.d_x() || self.d_y() != bundle.d_y() {
            return Err(Error::InvalidShape(format!(
                "network maps {} -> {} but data is {} -> {}",
                self.d_x(),
                self.d_y(),
                bundle.d_x(),
                bundle.d_y()
            )));
        }
        Ok(())
    }
}

/// Weights `(W_1, ..., W_H)` with `W_h` of size `d_h x d_{h-1}`.
///
/// Directions `W'` live in the same space and use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    shape: NetworkShape,
    layers: Vec<Mat>,
}

pub type Direction = Weights;

impl Weights {
    pub fn new(shape: NetworkShape, layers: Vec<Mat>) -> Result<Self> {
        if layers.len() != shape.depth() {
            return Err(Error::InvalidShape(format!(
                "{} layers for depth {}",
                layers.len(),
                shape.depth()
            )));
        }
        for (k, w) in layers.iter().enumerate() {
            let want = (shape.d(k + 1), shape.d(k));
            if w.shape() != want {
                return Err(Error::InvalidShape(format!(
                    "W_{} is {:?}, expected {:?}",
                    k + 1,
                    w.shape(),
                    want
                )));
            }
            if w.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidShape(format!("W_{} has non-finite entries", k + 1)));
            }
        }
        Ok(Weights { shape, layers })
    }

    pub fn from_dims(dims: Vec<usize>, layers: Vec<Mat>) -> Result<Self> {
        Weights::new(NetworkShape::new(dims)?, layers)
    }

    pub fn zeros(shape: &NetworkShape) -> Self {
        let layers = (1..=shape.depth())
            .map(|h| Mat::zeros(shape.d(h), shape.d(h - 1)))
            .collect();
        Weights { shape: shape.clone(), layers }
    }

    /// Entries i.i.d. `N(0, std²)`.
    pub fn gaussian<R: Rng + ?Sized>(shape: &NetworkShape, std: f64, rng: &mut R) -> Self {
        let mut w = Weights::zeros(shape);
        for l in &mut w.layers {
            for x in l.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *x = std * z;
            }
        }
        w
    }

    pub fn shape(&self) -> &NetworkShape {
        &self.shape
    }

    pub fn depth(&self) -> usize {
        self.shape.depth()
    }

    pub fn layers(&self) -> &[Mat] {
        &self.layers
    }

    pub fn into_layers(self) -> Vec<Mat> {
        self.layers
    }

    /// `W_h`, 1-based.
    pub fn layer(&self, h: usize) -> &Mat {
        &self.layers[h - 1]
    }

    pub fn layer_mut(&mut self, h: usize) -> &mut Mat {
        &mut self.layers[h - 1]
    }

    /// `W_hi ⋯ W_lo`; the empty product `lo = hi + 1` is `I_{d_hi}`.
    pub fn prod(&self, hi: usize, lo: usize) -> Mat {
        assert!(lo >= 1 && hi <= self.depth() && lo <= hi + 1, "bad product range {hi}..{lo}");
        let mut acc = Mat::identity(self.shape.d(lo - 1), self.shape.d(lo - 1));
        for h in lo..=hi {
            acc = self.layer(h) * acc;
        }
        acc
    }

    /// `W_H ⋯ W_1`.
    pub fn global_map(&self) -> Mat {
        self.prod(self.depth(), 1)
    }

    /// Prefix products `R_h = W_{h-1} ⋯ W_1` for `h = 1..=H+1` (index `h-1`).
    pub fn prefix_products(&self) -> Vec<Mat> {
        let mut out = Vec::with_capacity(self.depth() + 1);
        let d0 = self.shape.d(0);
        out.push(Mat::identity(d0, d0));
        for h in 1..=self.depth() {
            let next = self.layer(h) * out.last().unwrap();
            out.push(next);
        }
        out
    }

    /// Suffix products `L_h = W_H ⋯ W_{h+1}` for `h = 0..=H` (index `h`).
    pub fn suffix_products(&self) -> Vec<Mat> {
        let hh = self.depth();
        let dy = self.shape.d(hh);
        let mut out = vec![Mat::zeros(0, 0); hh + 1];
        out[hh] = Mat::identity(dy, dy);
        for h in (0..hh).rev() {
            out[h] = &out[h + 1] * self.layer(h + 1);
        }
        out
    }

    /// `‖W_H⋯W_1 X − Y‖_F²` computed from the raw data.
    pub fn loss(&self, data: &DataMatrices) -> f64 {
        let r = self.global_map() * data.x() - data.y();
        frob2(&r)
    }

    /// The same loss written with second moments:
    /// `tr(P Σ_XX Pᵀ) − 2 tr(P Σ_XY) + tr Σ_YY` with `P = W_H⋯W_1`.
    pub fn loss_from_moments(&self, bundle: &SigmaBundle) -> f64 {
        let p = self.global_map();
        inner(&(&p * &bundle.sxx), &p) - 2.0 * inner(&p, &bundle.syx) + bundle.syy.trace()
    }

    /// `∇_{W_h} L = 2 (W_H⋯W_{h+1})ᵀ (W_H⋯W_1 Σ_XX − Σ_YX) (W_{h-1}⋯W_1)ᵀ`.
    pub fn gradient(&self, bundle: &SigmaBundle) -> Direction {
        let pre = self.prefix_products();
        let suf = self.suffix_products();
        let hh = self.depth();
        let g = &pre[hh] * &bundle.sxx - &bundle.syx;
        let layers = (1..=hh)
            .map(|h| (suf[h].transpose() * &g * pre[h - 1].transpose()) * 2.0)
            .collect();
        Weights { shape: self.shape.clone(), layers }
    }

    pub fn frob2(&self) -> f64 {
        self.layers.iter().map(frob2).sum()
    }

    pub fn norm(&self) -> f64 {
        self.frob2().sqrt()
    }

    pub fn dot(&self, other: &Weights) -> f64 {
        self.layers.iter().zip(&other.layers).map(|(a, b)| inner(a, b)).sum()
    }

    /// `self + t * dir`.
    pub fn add_scaled(&self, dir: &Direction, t: f64) -> Weights {
        assert_eq!(self.shape, dir.shape, "shape mismatch");
        let layers = self.layers.iter().zip(&dir.layers).map(|(a, b)| a + b * t).collect();
        Weights { shape: self.shape.clone(), layers }
    }

    pub fn scaled(&self, t: f64) -> Weights {
        let layers = self.layers.iter().map(|a| a * t).collect();
        Weights { shape: self.shape.clone(), layers }
    }

    /// Parameters stacked layer by layer, each layer column-major.
    pub fn flatten(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.iter().copied()).collect()
    }

    pub fn unflatten(shape: &NetworkShape, v: &[f64]) -> Result<Weights> {
        if v.len() != shape.num_params() {
            return Err(Error::InvalidShape(format!(
                "{} values for {} parameters",
                v.len(),
                shape.num_params()
            )));
        }
        let mut off = 0;
        let mut layers = Vec::with_capacity(shape.depth());
        for h in 1..=shape.depth() {
            let (r, c) = (shape.d(h), shape.d(h - 1));
            layers.push(Mat::from_column_slice(r, c, &v[off..off + r * c]));
            off += r * c;
        }
        Ok(Weights { shape: shape.clone(), layers })
    }

    /// `W̃_h = D_h⁻¹ W_h D_{h-1}` with `D_0 = I` and `D_H = I`.
    ///
    /// `ds` holds `D_1, ..., D_{H-1}`. The global map is unchanged.
    pub fn basis_change(&self, ds: &[Mat]) -> Result<Weights> {
        let hh = self.depth();
        if ds.len() != hh - 1 {
            return Err(Error::InvalidShape(format!("need {} basis changes, got {}", hh - 1, ds.len())));
        }
        let mut invs = Vec::with_capacity(ds.len());
        for (k, d) in ds.iter().enumerate() {
            let n = self.shape.d(k + 1);
            if d.shape() != (n, n) {
                return Err(Error::InvalidShape(format!("D_{} must be {n}x{n}", k + 1)));
            }
            invs.push(inverse(d)?);
        }
        let mut layers = Vec::with_capacity(hh);
        for h in 1..=hh {
            let mut w = self.layer(h).clone();
            if h >= 2 {
                w = w * &ds[h - 2];
            }
            if h <= hh - 1 {
                w = &invs[h - 1] * w;
            }
            layers.push(w);
        }
        Ok(Weights { shape: self.shape.clone(), layers })
    }
}

/// Random invertible basis changes `D_1..D_{H-1}` with N(0,1) entries,
/// redrawing any block whose condition number exceeds `max_cond`.
pub fn random_basis_change<R: Rng + ?Sized>(shape: &NetworkShape, max_cond: f64, rng: &mut R) -> Vec<Mat> {
    (1..shape.depth())
        .map(|h| {
            let n = shape.d(h);
            loop {
                let d = Mat::from_fn(n, n, |_, _| StandardNormal.sample(rng));
                if condition_number(&d) <= max_cond {
                    break d;
                }
            }
        })
        .collect()
}

/// Magnitude against which gradient norms are compared:
/// `M² (‖Σ_XX‖_F + ‖Σ_YX‖_F)` with `M = Π_h max(1, ‖W_h‖_F)`.
pub fn gradient_scale(w: &Weights, bundle: &SigmaBundle) -> f64 {
    let m: f64 = w.layers().iter().map(|l| l.norm().max(1.0)).product();
    m * m * (bundle.sxx.norm() + bundle.syx.norm())
}

/// Magnitude against which curvature values are compared: `(1 + ‖W‖_F²) ‖X‖_F²`.
pub fn curvature_scale(w: &Weights, bundle: &SigmaBundle) -> f64 {
    (1.0 + w.frob2()) * bundle.x_norm2()
}
