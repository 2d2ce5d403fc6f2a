//! Training data, second-moment matrices and the standing data assumption.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{fix_column_signs, numeric_rank, svd, Mat, RankTolerance};

/// Inputs `x` (`d_x x m`) and targets `y` (`d_y x m`), one sample per column.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrices {
    x: Mat,
    y: Mat,
}

impl DataMatrices {
    pub fn new(x: Mat, y: Mat) -> Result<Self> {
        if x.ncols() != y.ncols() {
            return Err(Error::InvalidShape(format!(
                "x has {} samples but y has {}",
                x.ncols(),
                y.ncols()
            )));
        }
        if x.nrows() == 0 || y.nrows() == 0 || x.ncols() == 0 {
            return Err(Error::InvalidShape("data matrices must be nonempty".into()));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidShape("data contains non-finite entries".into()));
        }
        Ok(DataMatrices { x, y })
    }

    pub fn x(&self) -> &Mat {
        &self.x
    }

    pub fn y(&self) -> &Mat {
        &self.y
    }

    pub fn d_x(&self) -> usize {
        self.x.nrows()
    }

    pub fn d_y(&self) -> usize {
        self.y.nrows()
    }

    pub fn m(&self) -> usize {
        self.x.ncols()
    }
}

/// Gaussian data with i.i.d. N(0,1) entries. `x` is filled first, row by row.
pub fn generate_gaussian_data(d_x: usize, d_y: usize, m: usize, seed: u64) -> Result<DataMatrices> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |rows: usize| {
        let v: Vec<f64> = (0..rows * m).map(|_| StandardNormal.sample(&mut rng)).collect();
        Mat::from_row_slice(rows, m, &v)
    };
    let x = draw(d_x);
    let y = draw(d_y);
    DataMatrices::new(x, y)
}

/// Numerical tolerances used when checking data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    /// Relative tolerance for orthogonality checks.
    pub orth: f64,
    /// Relative rank tolerance for SVD-based checks.
    pub svd: f64,
    /// Absolute eigenvalue gap.
    pub gap: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances { orth: 1e-10, svd: 1e-10, gap: 1e-8 }
    }
}

/// Second moments of the data and the spectral data derived from them.
#[derive(Debug, Clone)]
pub struct SigmaBundle {
    /// The inputs the moments were computed from.
    pub x: Mat,
    pub sxx: Mat,
    pub sxy: Mat,
    pub syx: Mat,
    pub syy: Mat,
    pub sxx_inv: Mat,
    /// `Σ_YX Σ_XX⁻¹`, the least-squares regression matrix.
    pub regression: Mat,
    /// `Σ_YX Σ_XX⁻¹ X`, size `d_y x m`.
    pub sigma_half: Mat,
    /// `Σ_YX Σ_XX⁻¹ Σ_XY`.
    pub sigma: Mat,
    /// Left singular vectors of `sigma_half`, columns ordered by decreasing `lambdas`.
    pub u: Mat,
    /// Squared singular values of `sigma_half`, decreasing.
    pub lambdas: Vec<f64>,
    /// Right singular vectors, `m x d_y`, with `v_i = sigma_halfᵀ u_i / sqrt(λ_i)`.
    pub v: Mat,
}

impl SigmaBundle {
    pub fn d_x(&self) -> usize {
        self.sxx.nrows()
    }

    pub fn d_y(&self) -> usize {
        self.syy.nrows()
    }

    pub fn m(&self) -> usize {
        self.sigma_half.ncols()
    }

    /// `‖X‖_F² = tr Σ_XX`.
    pub fn x_norm2(&self) -> f64 {
        self.sxx.trace()
    }

    /// Columns of `u` indexed by the 1-based `idx`.
    pub fn u_cols(&self, idx: &[usize]) -> Mat {
        let mut out = Mat::zeros(self.d_y(), idx.len());
        for (k, &i) in idx.iter().enumerate() {
            out.set_column(k, &self.u.column(i - 1));
        }
        out
    }

    pub fn v_cols(&self, idx: &[usize]) -> Mat {
        let mut out = Mat::zeros(self.m(), idx.len());
        for (k, &i) in idx.iter().enumerate() {
            out.set_column(k, &self.v.column(i - 1));
        }
        out
    }
}

pub fn build_sigma_bundle(data: &DataMatrices) -> Result<SigmaBundle> {
    let x = data.x();
    let y = data.y();
    let sxx = x * x.transpose();
    let sxy = x * y.transpose();
    let syx = sxy.transpose();
    let syy = y * y.transpose();
    let sxx_inv = sxx
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::AssumptionViolated("Σ_XX is not positive definite".into()))?;
    let regression = &syx * &sxx_inv;
    let sigma_half = &regression * x;
    let sigma = &regression * &sxy;

    let d_y = data.d_y();
    let dec = svd(&sigma_half);
    if dec.s.len() < d_y {
        return Err(Error::AssumptionViolated(format!(
            "need m >= d_y, got m = {}",
            data.m()
        )));
    }
    let mut u = dec.u;
    fix_column_signs(&mut u);
    let lambdas: Vec<f64> = dec.s.iter().map(|s| s * s).collect();
    let mut v = sigma_half.transpose() * &u;
    for (i, s) in dec.s.iter().enumerate() {
        if *s > 0.0 {
            v.column_mut(i).scale_mut(1.0 / s);
        }
    }
    Ok(SigmaBundle { x: x.clone(), sxx, sxy, syx, syy, sxx_inv, regression, sigma_half, sigma, u, lambdas, v })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionCheck {
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub holds: bool,
    pub checks: Vec<AssumptionCheck>,
}

impl AssumptionReport {
    pub fn failures(&self) -> Vec<&AssumptionCheck> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }
}

/// Checks dimensions, invertibility of Σ_XX, full rank of Σ_XY and a simple,
/// positive spectrum of Σ.
pub fn check_assumption_h(data: &DataMatrices, tol: &Tolerances) -> AssumptionReport {
    let (d_x, d_y, m) = (data.d_x(), data.d_y(), data.m());
    let mut checks = Vec::new();
    let mut push = |name: &str, passed: bool, measured: f64, threshold: f64| {
        checks.push(AssumptionCheck { name: name.into(), passed, measured, threshold });
    };
    push("dims d_y <= d_x", d_y <= d_x, d_y as f64, d_x as f64);
    push("dims d_x <= m", d_x <= m, d_x as f64, m as f64);

    let rank_tol = RankTolerance::relative(tol.svd);
    let x = data.x();
    let sxx = x * x.transpose();
    let sxy = x * data.y().transpose();
    let rx = numeric_rank(&sxx, rank_tol);
    push("Σ_XX invertible", rx == d_x, rx as f64, d_x as f64);
    let ry = numeric_rank(&sxy, rank_tol);
    push("rank Σ_XY = d_y", ry == d_y, ry as f64, d_y as f64);

    let spectrum = if rx == d_x && d_y <= m {
        build_sigma_bundle(data).ok().map(|b| b.lambdas)
    } else {
        None
    };
    match spectrum {
        Some(l) => {
            let min_gap = l.windows(2).map(|w| w[0] - w[1]).fold(f64::INFINITY, f64::min);
            push("distinct eigenvalues", min_gap > tol.gap, min_gap, tol.gap);
            let last = *l.last().unwrap_or(&0.0);
            push("smallest eigenvalue positive", last > tol.gap, last, tol.gap);
        }
        None => {
            push("distinct eigenvalues", false, f64::NAN, tol.gap);
            push("smallest eigenvalue positive", false, f64::NAN, tol.gap);
        }
    }
    let holds = checks.iter().all(|c| c.passed);
    AssumptionReport { holds, checks }
}

/// Like [`check_assumption_h`] but turns a failed report into an error.
pub fn require_assumption_h(data: &DataMatrices, tol: &Tolerances) -> Result<AssumptionReport> {
    let rep = check_assumption_h(data, tol);
    if rep.holds {
        Ok(rep)
    } else {
        let names: Vec<_> = rep.failures().iter().map(|c| c.name.clone()).collect();
        Err(Error::AssumptionViolated(names.join(", ")))
    }
}
