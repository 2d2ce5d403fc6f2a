//! Second-order classification of critical points.
//!
//! A pivot is a pair `(i, j)` with `1 <= j < i <= H`. It is tightened when
//!
//! ```text
//! min(rank(W_{j-1}⋯W_1 Σ_XY W_H⋯W_{i+1}), rank(W_{i-1}⋯W_{j+1})) = r
//! ```
//!
//! where `r = rank(W_H⋯W_1)`. A critical point is tightened when all its
//! pivots are. With `S` its support:
//!
//! - `r = r_max`: global minimizer iff `S = {1..r_max}`, otherwise a strict saddle;
//! - `r < r_max`: a non-strict saddle iff `S = {1..r}` and the point is tightened,
//!   otherwise a strict saddle.
//!
//! Every strict-saddle verdict comes with a direction of negative curvature,
//! scaled to `‖W'‖_F² = 1 + ‖W‖_F²`.

use serde::{Deserialize, Serialize};

use crate::critical_points::{associated_support, critical_value, Support};
use crate::curvature::{witness_eigen_swap, witness_untightened, Witness};
use crate::data::SigmaBundle;
use crate::error::{Error, Result};
use crate::linalg::{numeric_rank, RankTolerance};
use crate::network::{curvature_scale, gradient_scale, Weights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    GlobalMinimizer,
    StrictSaddle,
    NonStrictSaddle,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Verdict::GlobalMinimizer => "GlobalMinimizer",
            Verdict::StrictSaddle => "StrictSaddle",
            Verdict::NonStrictSaddle => "NonStrictSaddle",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PivotReport {
    pub i: usize,
    pub j: usize,
    pub rank1: usize,
    pub rank2: usize,
    pub tightened: bool,
}

/// Relative rank tolerance used by the classifier unless overridden.
pub const DEFAULT_RANK_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub rank_tol: RankTolerance,
    /// Gradient norms up to `tau_crit * gradient_scale` are treated as zero.
    pub tau_crit: f64,
    /// Gradient norms up to `approx_band * tau_crit * scale` are accepted but flagged.
    pub approx_band: f64,
    /// A witness must have `c2 < -witness_tol * curvature_scale`.
    pub witness_tol: f64,
    /// Stop computing pivots at the first one that is not tightened.
    pub short_circuit: bool,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            rank_tol: RankTolerance::relative(DEFAULT_RANK_TOL),
            tau_crit: 1e-6,
            approx_band: 100.0,
            witness_tol: 1e-8,
            short_circuit: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Classification {
    pub verdict: Verdict,
    pub support: Support,
    pub r: usize,
    pub critical_value: f64,
    pub pivots: Vec<PivotReport>,
    pub witness: Option<Witness>,
    /// The gradient was small but above the strict threshold.
    pub approximate: bool,
    pub gradient_norm: f64,
    pub gradient_scale: f64,
}

pub fn pivot_report(w: &Weights, bundle: &SigmaBundle, i: usize, j: usize, tol: RankTolerance) -> Result<PivotReport> {
    w.shape().check_data(bundle)?;
    let hh = w.depth();
    if !(1 <= j && j < i && i <= hh) {
        return Err(Error::InvalidPivot(format!("({i}, {j}) with H = {hh}")));
    }
    let r = numeric_rank(&w.global_map(), tol);
    let block1 = w.prod(j - 1, 1) * &bundle.sxy * w.prod(hh, i + 1);
    let block2 = w.prod(i - 1, j + 1);
    let rank1 = numeric_rank(&block1, tol);
    let rank2 = numeric_rank(&block2, tol);
    Ok(PivotReport { i, j, rank1, rank2, tightened: rank1.min(rank2) == r })
}

/// All pivots, ordered by `i` then `j`.
pub fn pivot_reports(w: &Weights, bundle: &SigmaBundle, tol: RankTolerance, short_circuit: bool) -> Result<Vec<PivotReport>> {
    let hh = w.depth();
    let mut out = Vec::new();
    for i in 2..=hh {
        for j in 1..i {
            let rep = pivot_report(w, bundle, i, j, tol)?;
            out.push(rep);
            if short_circuit && !rep.tightened {
                return Ok(out);
            }
        }
    }
    Ok(out)
}

pub fn is_tightened(w: &Weights, bundle: &SigmaBundle, tol: RankTolerance, short_circuit: bool) -> Result<bool> {
    Ok(pivot_reports(w, bundle, tol, short_circuit)?.iter().all(|p| p.tightened))
}

/// Quick check: three layers of rank `r` make every pivot tightened.
pub fn tightened_by_three_layers(w: &Weights, tol: RankTolerance) -> bool {
    let r = numeric_rank(&w.global_map(), tol);
    w.layers().iter().filter(|l| numeric_rank(l, tol) == r).count() >= 3
}

pub fn classify(w: &Weights, bundle: &SigmaBundle, cfg: &ClassifierConfig) -> Result<Classification> {
    let shape = w.shape();
    shape.check_data(bundle)?;
    let gnorm = w.gradient(bundle).norm();
    let gscale = gradient_scale(w, bundle);
    let tau = cfg.tau_crit * gscale;
    if gnorm > cfg.approx_band * tau {
        return Err(Error::NotCritical(format!("gradient norm {gnorm:.3e} exceeds {:.3e}", cfg.approx_band * tau)));
    }
    let approximate = gnorm > tau;
    let tol = cfg.rank_tol;
    let r = numeric_rank(&w.global_map(), tol);
    let support = associated_support(w, bundle, tol)?;
    let pivots = pivot_reports(w, bundle, tol, cfg.short_circuit)?;
    for p in &pivots {
        if p.rank1 < r || p.rank2 < r {
            return Err(Error::InternalInconsistency(format!(
                "pivot ({}, {}) has ranks ({}, {}) below r = {r}",
                p.i, p.j, p.rank1, p.rank2
            )));
        }
    }
    let tightened = pivots.iter().all(|p| p.tightened);
    let r_max = shape.r_max();
    let leading = support.is_leading();
    let verdict = match (r == r_max, leading, tightened) {
        (true, true, _) => Verdict::GlobalMinimizer,
        (true, false, _) => Verdict::StrictSaddle,
        (false, false, _) => Verdict::StrictSaddle,
        (false, true, false) => Verdict::StrictSaddle,
        (false, true, true) => Verdict::NonStrictSaddle,
    };
    let witness = if verdict == Verdict::StrictSaddle {
        let wit = if !leading {
            witness_eigen_swap(w, bundle, &support)?.normalized(w)
        } else {
            let p = pivots.iter().find(|p| !p.tightened).expect("untightened pivot");
            witness_untightened(w, bundle, (p.i, p.j), tol)?
        };
        let bound = -cfg.witness_tol * curvature_scale(w, bundle);
        if !(wit.c2 < bound) {
            return Err(Error::InternalInconsistency(format!(
                "witness has c2 = {:.3e}, not below {bound:.3e}",
                wit.c2
            )));
        }
        Some(wit)
    } else {
        None
    };
    Ok(Classification {
        verdict,
        critical_value: critical_value(bundle, &support),
        support,
        r,
        pivots,
        witness,
        approximate,
        gradient_norm: gnorm,
        gradient_scale: gscale,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::critical_points::{build_example_family, ZFill};
    use crate::data::{build_sigma_bundle, generate_gaussian_data};
    use crate::network::NetworkShape;

    fn bundle() -> SigmaBundle {
        build_sigma_bundle(&generate_gaussian_data(4, 3, 30, 21).unwrap()).unwrap()
    }

    #[test]
    fn invalid_pivot() {
        let b = bundle();
        let shape = NetworkShape::new(vec![4, 3, 3, 3]).unwrap();
        let w = Weights::zeros(&shape);
        assert!(matches!(pivot_report(&w, &b, 2, 2, RankTolerance::machine()), Err(Error::InvalidPivot(_))));
        assert!(matches!(pivot_report(&w, &b, 4, 1, RankTolerance::machine()), Err(Error::InvalidPivot(_))));
    }

    #[test]
    fn zero_point_three_layers_is_non_strict() {
        let b = bundle();
        let shape = NetworkShape::new(vec![4, 3, 3, 3]).unwrap();
        let w = Weights::zeros(&shape);
        let c = classify(&w, &b, &ClassifierConfig::default()).unwrap();
        assert_eq!(c.verdict, Verdict::NonStrictSaddle);
        assert!(c.witness.is_none());
        assert!(tightened_by_three_layers(&w, RankTolerance::machine()));
    }

    #[test]
    fn zero_point_two_layers_is_strict() {
        let b = bundle();
        let shape = NetworkShape::new(vec![4, 3, 3]).unwrap();
        let w = Weights::zeros(&shape);
        let c = classify(&w, &b, &ClassifierConfig::default()).unwrap();
        assert_eq!(c.verdict, Verdict::StrictSaddle);
        assert!(c.witness.unwrap().c2 < 0.0);
    }

    #[test]
    fn non_critical_rejected() {
        let b = bundle();
        let shape = NetworkShape::new(vec![4, 3, 3]).unwrap();
        let mut w = Weights::zeros(&shape);
        w.layer_mut(1)[(0, 0)] = 1.0;
        w.layer_mut(2)[(0, 0)] = 1.0;
        assert!(matches!(classify(&w, &b, &ClassifierConfig::default()), Err(Error::NotCritical(_))));
    }

    #[test]
    fn example_family_verdicts() {
        let b = bundle();
        let shape = NetworkShape::new(vec![4, 3, 3, 3]).unwrap();
        let cfg = ClassifierConfig::default();
        let (_, t) = build_example_family(&shape, &b, 1, true, ZFill::TopLeft).unwrap();
        assert_eq!(classify(&t, &b, &cfg).unwrap().verdict, Verdict::NonStrictSaddle);
        let (_, n) = build_example_family(&shape, &b, 1, false, ZFill::TopLeft).unwrap();
        assert_eq!(classify(&n, &b, &cfg).unwrap().verdict, Verdict::StrictSaddle);
        let (_, g) = build_example_family(&shape, &b, 3, false, ZFill::TopLeft).unwrap();
        assert_eq!(classify(&g, &b, &cfg).unwrap().verdict, Verdict::GlobalMinimizer);
    }
}
