//! Optimizers and the saddle-escape experiment.
//!
//! Each run starts from a perturbed saddle point and records the first epoch
//! at which the loss falls below `L(W_cp) − λ_k / 2`. Training is full batch,
//! so one epoch is one update.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::critical_points::{build_example_family, ZFill};
use crate::data::{build_sigma_bundle, generate_gaussian_data, SigmaBundle};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::network::{NetworkShape, Weights};

/// Losses above this count as divergence.
pub const DIVERGENCE_LOSS: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    /// Keras defaults.
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-7 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam(AdamConfig),
    Gd { lr: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam(AdamConfig::default())
    }
}

/// Loss after each update; `losses[0]` is the starting loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub losses: Vec<f64>,
    /// Epoch at which the loss became non-finite or exceeded [`DIVERGENCE_LOSS`].
    pub diverged_at: Option<usize>,
}

impl Trace {
    pub fn final_loss(&self) -> f64 {
        *self.losses.last().expect("trace has the starting loss")
    }
}

struct AdamState {
    m: Vec<Mat>,
    v: Vec<Mat>,
    t: i32,
}

/// Runs `epochs` full-batch updates from `w0`.
pub fn run_optimizer(w0: &Weights, bundle: &SigmaBundle, opt: &OptimizerKind, epochs: usize) -> Trace {
    let mut w = w0.clone();
    let mut losses = Vec::with_capacity(epochs + 1);
    losses.push(w.loss_from_moments(bundle));
    let mut adam = AdamState {
        m: w.layers().iter().map(|l| Mat::zeros(l.nrows(), l.ncols())).collect(),
        v: w.layers().iter().map(|l| Mat::zeros(l.nrows(), l.ncols())).collect(),
        t: 0,
    };
    for epoch in 1..=epochs {
        let g = w.gradient(bundle);
        match opt {
            OptimizerKind::Gd { lr } => {
                w = w.add_scaled(&g, -lr);
            }
            OptimizerKind::Adam(c) => {
                adam.t += 1;
                let lr_t = c.lr * (1.0 - c.beta2.powi(adam.t)).sqrt() / (1.0 - c.beta1.powi(adam.t));
                for h in 1..=w.depth() {
                    let gh = g.layer(h);
                    let m = &mut adam.m[h - 1];
                    let v = &mut adam.v[h - 1];
                    *m = &*m * c.beta1 + gh * (1.0 - c.beta1);
                    *v = &*v * c.beta2 + gh.component_mul(gh) * (1.0 - c.beta2);
                    let step = m.zip_map(v, |mi, vi| lr_t * mi / (vi.sqrt() + c.epsilon));
                    *w.layer_mut(h) -= step;
                }
            }
        }
        let l = w.loss_from_moments(bundle);
        losses.push(l);
        if !l.is_finite() || l > DIVERGENCE_LOSS {
            return Trace { losses, diverged_at: Some(epoch) };
        }
    }
    Trace { losses, diverged_at: None }
}

/// Same as [`run_optimizer`] but returns [`Error::Diverged`] on divergence.
pub fn run_optimizer_checked(w0: &Weights, bundle: &SigmaBundle, opt: &OptimizerKind, epochs: usize) -> Result<Trace> {
    let t = run_optimizer(w0, bundle, opt, epochs);
    match t.diverged_at {
        Some(epoch) => Err(Error::Diverged { epoch }),
        None => Ok(t),
    }
}

/// Adds Gaussian noise `N(0, σ_h²)` to each layer with
/// `σ_h = scale ‖W_h‖_F / sqrt(d_{h-1} d_h)`; a zero layer uses `σ_h = scale / sqrt(d_{h-1} d_h)`.
pub fn perturb(w: &Weights, scale: f64, rng: &mut ChaCha8Rng) -> Weights {
    let mut out = w.clone();
    for h in 1..=w.depth() {
        let l = w.layer(h);
        let size = ((l.nrows() * l.ncols()) as f64).sqrt();
        let nrm = l.norm();
        let sigma = if nrm > 0.0 { scale * nrm / size } else { scale / size };
        let dist = Normal::new(0.0, sigma).expect("finite sigma");
        for x in out.layer_mut(h).iter_mut() {
            *x += dist.sample(rng);
        }
    }
    out
}

/// First epoch with loss strictly below `threshold`.
pub fn escape_epoch(trace: &Trace, threshold: f64) -> Option<usize> {
    let end = trace.diverged_at.unwrap_or(trace.losses.len());
    trace.losses[..end.min(trace.losses.len())].iter().position(|&l| l < threshold)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaddleVariant {
    Tightened,
    NonTightened,
}

impl std::fmt::Display for SaddleVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SaddleVariant::Tightened => "tightened",
            SaddleVariant::NonTightened => "non_tightened",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// `[d_x, d_1, ..., d_y]`.
    pub shape: Vec<usize>,
    /// Number of samples.
    pub m: usize,
    pub data_seed: u64,
    /// Run `k` draws its perturbation from seed `perturb_seed + k`.
    pub perturb_seed: u64,
    pub n_runs: usize,
    pub variants: Vec<SaddleVariant>,
    pub r: usize,
    pub perturb_scale: f64,
    pub optimizer: OptimizerKind,
    pub max_epochs: usize,
    /// 1-based index `k` of the eigenvalue in the escape threshold; defaults to `r + 1`.
    pub escape_margin_index: Option<usize>,
    /// Interior blocks of the non-tightened saddle.
    pub non_tightened_fill: ZFill,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            shape: vec![10, 10, 10, 10, 10, 4],
            m: 100,
            data_seed: 0,
            perturb_seed: 1_000,
            n_runs: 100,
            variants: vec![SaddleVariant::Tightened, SaddleVariant::NonTightened],
            r: 2,
            perturb_scale: 0.1,
            optimizer: OptimizerKind::default(),
            max_epochs: 2000,
            escape_margin_index: None,
            non_tightened_fill: ZFill::Identity,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: usize,
    pub variant: SaddleVariant,
    pub escape_epoch: Option<usize>,
    pub final_loss: f64,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: SaddleVariant,
    pub saddle_loss: f64,
    pub threshold: f64,
    pub runs: usize,
    /// Runs that never escaped are counted as `+∞`; `None` when such runs reach the quantile.
    pub median: Option<f64>,
    pub q1: Option<f64>,
    pub q3: Option<f64>,
    pub fraction_never_escaped: f64,
    pub diverged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub runs: Vec<RunRecord>,
    pub summaries: Vec<VariantSummary>,
}

impl ExperimentResult {
    pub fn summary(&self, v: SaddleVariant) -> Option<&VariantSummary> {
        self.summaries.iter().find(|s| s.variant == v)
    }
}

/// Quantile by linear interpolation over sorted values where `None` sorts as `+∞`.
/// Returns `None` when an infinite value takes part in the interpolation.
pub fn censored_quantile(values: &[Option<usize>], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v: Vec<f64> = values.iter().map(|x| x.map_or(f64::INFINITY, |e| e as f64)).collect();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    let (a, b) = (v[lo], v[hi]);
    if !a.is_finite() || (frac > 0.0 && !b.is_finite()) {
        return None;
    }
    Some(if frac > 0.0 { a + frac * (b - a) } else { a })
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    let shape = NetworkShape::new(cfg.shape.clone())?;
    let data = generate_gaussian_data(shape.d_x(), shape.d_y(), cfg.m, cfg.data_seed)?;
    let bundle = build_sigma_bundle(&data)?;
    let k = cfg.escape_margin_index.unwrap_or(cfg.r + 1);
    if k == 0 || k > shape.d_y() {
        return Err(Error::InvalidShape(format!("escape margin index {k} outside 1..={}", shape.d_y())));
    }
    let margin = bundle.lambdas[k - 1] / 2.0;

    let mut runs = Vec::new();
    let mut summaries = Vec::new();
    for &variant in &cfg.variants {
        let tightened = variant == SaddleVariant::Tightened;
        let (_, wcp) = build_example_family(&shape, &bundle, cfg.r, tightened, cfg.non_tightened_fill)?;
        let saddle_loss = wcp.loss_from_moments(&bundle);
        let threshold = saddle_loss - margin;
        let recs: Vec<RunRecord> = (0..cfg.n_runs)
            .into_par_iter()
            .map(|run| {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.perturb_seed.wrapping_add(run as u64));
                let w0 = perturb(&wcp, cfg.perturb_scale, &mut rng);
                let trace = run_optimizer(&w0, &bundle, &cfg.optimizer, cfg.max_epochs);
                RunRecord {
                    run,
                    variant,
                    escape_epoch: escape_epoch(&trace, threshold),
                    final_loss: trace.final_loss(),
                    diverged: trace.diverged_at.is_some(),
                }
            })
            .collect();
        let epochs: Vec<Option<usize>> = recs.iter().map(|r| r.escape_epoch).collect();
        let never = epochs.iter().filter(|e| e.is_none()).count();
        summaries.push(VariantSummary {
            variant,
            saddle_loss,
            threshold,
            runs: recs.len(),
            median: censored_quantile(&epochs, 0.5),
            q1: censored_quantile(&epochs, 0.25),
            q3: censored_quantile(&epochs, 0.75),
            fraction_never_escaped: if recs.is_empty() { 0.0 } else { never as f64 / recs.len() as f64 },
            diverged: recs.iter().filter(|r| r.diverged).count(),
        });
        runs.extend(recs);
    }
    Ok(ExperimentResult { config: cfg.clone(), runs, summaries })
}

/// Histogram bin of escape epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub variant: SaddleVariant,
    pub bin_lo: usize,
    pub bin_hi: usize,
    pub count: usize,
}

/// Bins escaped runs into `[lo, hi)` intervals of width `width`; runs that never
/// escaped go to a final bin starting at `max_epochs + 1`.
pub fn escape_histogram(result: &ExperimentResult, width: usize) -> Vec<HistogramBin> {
    let width = width.max(1);
    let max_epochs = result.config.max_epochs;
    let nbins = max_epochs / width + 1;
    let mut out = Vec::new();
    for &variant in &result.config.variants {
        let mut counts = vec![0usize; nbins];
        let mut never = 0;
        for r in result.runs.iter().filter(|r| r.variant == variant) {
            match r.escape_epoch {
                Some(e) => counts[(e / width).min(nbins - 1)] += 1,
                None => never += 1,
            }
        }
        for (b, &count) in counts.iter().enumerate() {
            out.push(HistogramBin { variant, bin_lo: b * width, bin_hi: (b + 1) * width, count });
        }
        out.push(HistogramBin { variant, bin_lo: max_epochs + 1, bin_hi: usize::MAX, count: never });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gd_decreases_loss_with_small_step() {
        let data = generate_gaussian_data(4, 2, 30, 1).unwrap();
        let b = build_sigma_bundle(&data).unwrap();
        let shape = NetworkShape::new(vec![4, 3, 2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = Weights::gaussian(&shape, 0.3, &mut rng);
        let lr = 1e-4 / b.sxx.norm();
        let t = run_optimizer(&w, &b, &OptimizerKind::Gd { lr }, 200);
        assert!(t.losses.windows(2).all(|p| p[1] <= p[0] + 1e-12));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // From zero moments the first step is lr g / (|g| + ε / sqrt(1 - β2)).
        let data = generate_gaussian_data(2, 1, 10, 3).unwrap();
        let b = build_sigma_bundle(&data).unwrap();
        let shape = NetworkShape::new(vec![2, 2, 1]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = Weights::gaussian(&shape, 0.5, &mut rng);
        let g = w.gradient(&b);
        let cfg = AdamConfig::default();
        let mut w1 = w.clone();
        for h in 1..=2 {
            let eps = cfg.epsilon / (1.0 - cfg.beta2).sqrt();
            let step = g.layer(h).map(|x| cfg.lr * x / (x.abs() + eps));
            *w1.layer_mut(h) -= step;
        }
        let t = run_optimizer(&w, &b, &OptimizerKind::Adam(cfg), 1);
        let expected = w1.loss_from_moments(&b);
        assert!((t.final_loss() - expected).abs() <= 1e-12 * expected);
    }

    #[test]
    fn divergence_detected() {
        let data = generate_gaussian_data(2, 1, 10, 3).unwrap();
        let b = build_sigma_bundle(&data).unwrap();
        let shape = NetworkShape::new(vec![2, 2, 1]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = Weights::gaussian(&shape, 1.0, &mut rng);
        let r = run_optimizer_checked(&w, &b, &OptimizerKind::Gd { lr: 10.0 }, 100);
        assert!(matches!(r, Err(Error::Diverged { .. })));
    }

    #[test]
    fn escape_epoch_is_first_crossing() {
        let t = Trace { losses: vec![5.0, 4.0, 2.0, 3.0, 1.0], diverged_at: None };
        assert_eq!(escape_epoch(&t, 2.5), Some(2));
        assert_eq!(escape_epoch(&t, 0.5), None);
    }

    #[test]
    fn censored_median() {
        assert_eq!(censored_quantile(&[Some(1), Some(3), None], 0.5), Some(3.0));
        assert_eq!(censored_quantile(&[Some(1), None, None], 0.5), None);
        assert_eq!(censored_quantile(&[Some(1), Some(2), Some(4), Some(10)], 0.5), Some(3.0));
    }

    #[test]
    fn perturbation_is_seeded() {
        let shape = NetworkShape::new(vec![3, 3, 2]).unwrap();
        let w = Weights::zeros(&shape);
        let a = perturb(&w, 0.1, &mut ChaCha8Rng::seed_from_u64(5));
        let b = perturb(&w, 0.1, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
        assert!(a.norm() > 0.0);
    }

    #[test]
    fn small_experiment_runs() {
        let cfg = ExperimentConfig {
            shape: vec![4, 4, 4, 2],
            m: 20,
            n_runs: 3,
            r: 1,
            max_epochs: 50,
            ..Default::default()
        };
        let res = run_experiment(&cfg).unwrap();
        assert_eq!(res.runs.len(), 6);
        assert_eq!(res.summaries.len(), 2);
        let hist = escape_histogram(&res, 10);
        let total: usize = hist.iter().map(|b| b.count).sum();
        assert_eq!(total, 6);
    }
}
