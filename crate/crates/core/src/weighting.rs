//! Truncated-Laplace pseudo-label weighting.
//!
//! A pseudo-label whose confidence `max(p)` reaches the running confidence
//! mean `μ̂` gets the full weight `λ_max`; below the mean the weight decays as
//! `λ_max · exp(-|max(p) - μ̂| / b)` with Laplace scale `b = sqrt(σ̂² / 2)`.
//! `μ̂` and `σ̂²` are exponential moving averages of per-batch confidence
//! statistics.

use std::sync::Once;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::seeds::{self, Purpose};
use crate::tensor::DenseArray;

/// Laplace scales below this are treated as a hard threshold at the mean.
pub const MIN_SCALE: f64 = 1e-12;

static DEGENERATE_SCALE: Once = Once::new();

/// Running estimate of the confidence distribution of one client.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceEma {
    mean: f64,
    var: f64,
    momentum: f64,
    /// Apply the `B/(B-1)` correction to batch variances.
    unbiased: bool,
}

impl ConfidenceEma {
    /// Starts at `μ̂ = 1/C`, `σ̂² = 1`.
    pub fn new(num_classes: usize, momentum: f64) -> Self {
        assert!((0.0..=1.0).contains(&momentum), "momentum outside [0, 1]");
        Self {
            mean: 1.0 / num_classes as f64,
            var: 1.0,
            momentum,
            unbiased: true,
        }
    }

    /// Disables the batch-variance bias correction. Only used to demonstrate
    /// that the verifier notices.
    pub fn with_biased_variance(mut self) -> Self {
        self.unbiased = false;
        self
    }

    pub fn from_parts(mean: f64, var: f64, momentum: f64) -> Self {
        Self {
            mean,
            var: var.max(0.0),
            momentum,
            unbiased: true,
        }
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn var(&self) -> f64 {
        self.var
    }

    pub fn std(&self) -> f64 {
        self.var.sqrt()
    }

    /// Laplace scale `b = sqrt(σ̂² / 2)`.
    pub fn scale(&self) -> f64 {
        (self.var / 2.0).sqrt()
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    /// Folds in one batch's `(mean, biased variance)` of `batch_size` samples.
    /// A single-sample batch updates the mean only.
    pub fn update(&mut self, batch_mean: f64, batch_var: f64, batch_size: usize) {
        let m = self.momentum;
        self.mean = m * self.mean + (1.0 - m) * batch_mean;
        if batch_size > 1 {
            let correction = if self.unbiased {
                batch_size as f64 / (batch_size - 1) as f64
            } else {
                1.0
            };
            self.var = (m * self.var + (1.0 - m) * correction * batch_var).max(0.0);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightingConfig {
    pub lambda_max: f64,
}

impl Default for WeightingConfig {
    fn default() -> Self {
        Self { lambda_max: 1.0 }
    }
}

pub fn max_prob(p: &[f64]) -> f64 {
    p.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    best
}

/// Weight of a pseudo-label with confidence `confidence`.
pub fn laplace_weight(confidence: f64, mean: f64, scale: f64, lambda_max: f64) -> f64 {
    if confidence >= mean {
        return lambda_max;
    }
    if scale < MIN_SCALE {
        DEGENERATE_SCALE.call_once(|| log::warn!("confidence scale {scale:e} is degenerate; weighting falls back to a hard threshold"));
        return 0.0;
    }
    lambda_max * (-(mean - confidence) / scale).exp()
}

pub fn sample_weight(p: &[f64], ema: &ConfidenceEma, cfg: &WeightingConfig) -> f64 {
    laplace_weight(max_prob(p), ema.mean(), ema.scale(), cfg.lambda_max)
}

/// Mean and biased (divide-by-n) variance of the row confidences.
pub fn batch_confidence_stats(probs: &DenseArray) -> Option<(f64, f64)> {
    let n = probs.rows();
    if probs.is_empty() || n == 0 {
        return None;
    }
    let conf: Vec<f64> = (0..n).map(|i| max_prob(probs.row(i))).collect();
    let mean = conf.iter().sum::<f64>() / n as f64;
    let var = conf.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / n as f64;
    Some((mean, var))
}

/// Hard pseudo-labels and their weights for a batch of probability rows.
pub fn pseudo_labels(probs: &DenseArray, ema: &ConfidenceEma, cfg: &WeightingConfig) -> (Vec<usize>, Vec<f64>) {
    (0..probs.rows())
        .map(|i| {
            let p = probs.row(i);
            (argmax(p), sample_weight(p, ema, cfg))
        })
        .unzip()
}

/// Ramp of the unsupervised-loss coefficient over rounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub total_rounds: usize,
    pub eta_final: f64,
    pub t1_frac: f64,
    pub t2_frac: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            total_rounds: 60,
            eta_final: 3.0,
            t1_frac: 0.3,
            t2_frac: 0.7,
        }
    }
}

impl Schedule {
    pub fn t1(&self) -> f64 {
        self.t1_frac * self.total_rounds as f64
    }

    pub fn t2(&self) -> f64 {
        self.t2_frac * self.total_rounds as f64
    }

    pub fn eta(&self, t: f64) -> f64 {
        let (t1, t2) = (self.t1(), self.t2());
        if t < t1 {
            0.0
        } else if t < t2 {
            self.eta_final * (t - t1) / (t2 - t1)
        } else {
            self.eta_final
        }
    }
}

/// Share of labeled samples in a batch; weights the global contrastive loss.
pub fn iota(labeled: usize, batch: usize) -> f64 {
    assert!(batch > 0 && labeled <= batch, "iota needs 0 <= E <= B, B > 0");
    labeled as f64 / batch as f64
}

/// Average pseudo-label weight over a pool.
pub fn quantity(weights: &[f64]) -> Result<f64> {
    if weights.is_empty() {
        return Err(Error::InvalidArgument("quantity of an empty pool is undefined".into()));
    }
    Ok(weights.iter().sum::<f64>() / weights.len() as f64)
}

/// Weight-normalized share of correct pseudo-labels.
pub fn quality(pseudo: &[usize], truth: &[usize], weights: &[f64]) -> Result<f64> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::InvalidArgument("quality with all-zero weights is undefined".into()));
    }
    let correct: f64 = pseudo
        .iter()
        .zip(truth)
        .zip(weights)
        .filter(|((p, y), _)| p == y)
        .map(|(_, w)| w)
        .sum();
    Ok(correct / total)
}

/// Quantity and quality of a whole pool under `ema`.
pub fn quantity_oracle(probs: &DenseArray, ema: &ConfidenceEma, cfg: &WeightingConfig) -> Result<f64> {
    quantity(&pseudo_labels(probs, ema, cfg).1)
}

pub fn quality_oracle(probs: &DenseArray, truth: &[usize], ema: &ConfidenceEma, cfg: &WeightingConfig) -> Result<f64> {
    let (labels, weights) = pseudo_labels(probs, ema, cfg);
    quality(&labels, truth, &weights)
}

/// Every quantity the bound checks look at, for one pool.
#[derive(Debug, Clone)]
pub struct PoolBounds {
    pub size: usize,
    /// Pool members with confidence at or above the mean.
    pub above: usize,
    pub quantity: f64,
    pub quality: f64,
    /// `exp(-|1/C - μ̂| / b)`, the smallest weight any valid confidence can get.
    pub floor_weight: f64,
    /// `λ_max/2 · (1 + floor_weight)`, the chain as stated for a half/half pool.
    pub chain_symmetric: f64,
    /// `λ_max · (Û + (U - Û) · floor_weight) / U`, the same chain with the
    /// actual branch sizes.
    pub chain_general: f64,
    /// `Σ_{above} 1(correct) / (2Û)`.
    pub quality_floor: f64,
}

pub fn pool_bounds(
    probs: &DenseArray,
    truth: &[usize],
    ema: &ConfidenceEma,
    cfg: &WeightingConfig,
    num_classes: usize,
) -> Result<PoolBounds> {
    let (labels, weights) = pseudo_labels(probs, ema, cfg);
    let u = weights.len();
    let conf: Vec<f64> = (0..u).map(|i| max_prob(probs.row(i))).collect();
    let above: Vec<usize> = (0..u).filter(|&i| conf[i] >= ema.mean()).collect();
    let floor_weight = laplace_weight(1.0 / num_classes as f64, ema.mean(), ema.scale(), 1.0);
    let lm = cfg.lambda_max;
    let hat_u = above.len();
    let correct_above = above.iter().filter(|&&i| labels[i] == truth[i]).count();
    Ok(PoolBounds {
        size: u,
        above: hat_u,
        quantity: quantity(&weights)?,
        quality: quality(&labels, truth, &weights)?,
        floor_weight,
        chain_symmetric: lm / 2.0 * (1.0 + floor_weight),
        chain_general: lm * (hat_u as f64 + (u - hat_u) as f64 * floor_weight) / u as f64,
        quality_floor: if hat_u == 0 {
            0.0
        } else {
            correct_above as f64 / (2.0 * hat_u as f64)
        },
    })
}

#[derive(Debug, Clone)]
pub struct BoundViolation {
    pub trial: usize,
    pub check: &'static str,
    pub detail: String,
    pub confidences: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct BoundsReport {
    pub trials: usize,
    pub evaluated: usize,
    /// Trials with every confidence on one side of the mean (`f = λ_max`
    /// exactly); the bound chain degenerates and counts as a pass.
    pub degenerate: usize,
    pub violations: Vec<BoundViolation>,
}

impl BoundsReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn count(&self, check: &str) -> usize {
        self.violations.iter().filter(|v| v.check == check).count()
    }
}

/// Builds a probability vector over `num_classes` classes whose maximum is
/// `top` and sits at class `winner`.
fn prob_row(top: f64, winner: usize, num_classes: usize, rng: &mut impl Rng) -> Vec<f64> {
    let rest = 1.0 - top;
    let raw: Vec<f64> = (0..num_classes - 1).map(|_| rng.random_range(0.1..1.0)).collect();
    let s: f64 = raw.iter().sum();
    let mut others: Vec<f64> = raw.iter().map(|r| rest * r / s).collect();
    if others.iter().any(|&o| o > top) {
        others.iter_mut().for_each(|o| *o = rest / (num_classes - 1) as f64);
    }
    let mut row = Vec::with_capacity(num_classes);
    let mut it = others.into_iter();
    for j in 0..num_classes {
        row.push(if j == winner { top } else { it.next().unwrap() });
    }
    row
}

/// A randomized pool of prediction rows with ground truth. Confidences are
/// drawn symmetrically around a random center inside `(1/C, 1)`; correctness
/// becomes more likely with confidence.
pub fn random_pool(
    num_classes: usize,
    size: usize,
    trial: usize,
    rng: &mut impl Rng,
) -> (DenseArray, Vec<usize>) {
    let lo = 1.0 / num_classes as f64;
    let center = rng.random_range(lo + 0.02..0.98);
    let spread = rng.random_range(0.01..1.0) * (center - lo).min(1.0 - center);
    let gauss = Normal::new(0.0, 0.4 * spread).expect("finite");
    let mut rows = Vec::with_capacity(size);
    let mut truth = Vec::with_capacity(size);
    for _ in 0..size {
        let top = if trial % 2 == 0 {
            center + spread * rng.random_range(-1.0..=1.0)
        } else {
            (center + gauss.sample(rng)).clamp(lo, 1.0)
        };
        let winner = rng.random_range(0..num_classes);
        let p_correct = 0.2 + 0.8 * (top - lo) / (1.0 - lo);
        let y = if rng.random_bool(p_correct.clamp(0.0, 1.0)) {
            winner
        } else {
            (winner + rng.random_range(1..num_classes)) % num_classes
        };
        rows.push(prob_row(top, winner, num_classes, rng));
        truth.push(y);
    }
    (DenseArray::from_rows(&rows).expect("equal rows"), truth)
}

/// Options of [`verify_weighting_bounds`].
#[derive(Debug, Clone, Copy)]
pub struct VerifyOptions {
    pub trials: usize,
    pub pool_size: usize,
    pub num_classes: usize,
    pub lambda_max: f64,
    pub seed: u64,
    /// Fault injection: estimate σ̂² without the `B/(B-1)` correction.
    pub biased_variance: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            trials: 1000,
            pool_size: 256,
            num_classes: 3,
            lambda_max: 1.0,
            seed: 0,
            biased_variance: false,
        }
    }
}

/// Checks, on randomized pools, the quantity bounds `λ_max/2 < f < λ_max`,
/// both forms of the lower-bound chain, the quality floor, and that the
/// confidence estimator reproduces the unbiased pool variance.
///
/// Per trial the estimator is fed the whole pool as one batch with zero
/// momentum, so `μ̂` is the pool mean.
pub fn verify_weighting_bounds(opts: &VerifyOptions) -> Result<BoundsReport> {
    let cfg = WeightingConfig {
        lambda_max: opts.lambda_max,
    };
    let mut report = BoundsReport {
        trials: opts.trials,
        ..Default::default()
    };
    for trial in 0..opts.trials {
        let mut rng = seeds::stream(opts.seed, Purpose::Verify, &[trial as u64]);
        let (probs, truth) = random_pool(opts.num_classes, opts.pool_size, trial, &mut rng);
        let (bm, bv) = batch_confidence_stats(&probs).expect("non-empty pool");
        let mut ema = ConfidenceEma::new(opts.num_classes, 0.0);
        if opts.biased_variance {
            ema = ema.with_biased_variance();
        }
        ema.update(bm, bv, opts.pool_size);
        let b = pool_bounds(&probs, &truth, &ema, &cfg, opts.num_classes)?;
        let conf: Vec<f64> = (0..probs.rows()).map(|i| max_prob(probs.row(i))).collect();
        let mut fail = |check: &'static str, detail: String| {
            report.violations.push(BoundViolation {
                trial,
                check,
                detail,
                confidences: conf.clone(),
            })
        };

        // brute-force unbiased variance of the pool confidences
        let n = conf.len() as f64;
        let mean = conf.iter().sum::<f64>() / n;
        let unbiased = conf.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1.0);
        if (ema.var() - unbiased).abs() > 1e-12 * unbiased.max(1e-300) {
            fail("variance_estimator", format!("σ̂² = {:e}, pool variance {unbiased:e}", ema.var()));
        }

        if b.above == b.size {
            report.degenerate += 1;
            continue;
        }
        report.evaluated += 1;
        let lm = opts.lambda_max;
        if !(b.quantity < lm) {
            fail("quantity_upper", format!("f = {} ≥ λ_max", b.quantity));
        }
        if !(b.quantity > lm / 2.0) {
            fail("quantity_half", format!("f = {} ≤ λ_max/2", b.quantity));
        }
        if !(b.chain_general <= b.quantity) {
            fail("quantity_chain_general", format!("f = {} < {}", b.quantity, b.chain_general));
        }
        if !(b.chain_symmetric <= b.quantity) {
            fail(
                "quantity_chain",
                format!("f = {} < {} (Û = {} of {})", b.quantity, b.chain_symmetric, b.above, b.size),
            );
        }
        if !(b.quality >= b.quality_floor) {
            fail("quality_floor", format!("g = {} < {}", b.quality, b.quality_floor));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn probs(rows: &[&[f64]]) -> DenseArray {
        DenseArray::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn weight_examples() {
        let cfg = WeightingConfig { lambda_max: 1.0 };
        let ema = ConfidenceEma::from_parts(0.8, 2.0 * 0.1 * 0.1, 0.999);
        assert_eq!(sample_weight(&[0.9, 0.05, 0.05], &ema, &cfg), 1.0);
        // independent evaluation: 2b · φ(0.6; 0.8, 0.1) = 2b · exp(-0.2/0.1) / (2b)
        let b = 0.1;
        let phi = (1.0 / (2.0 * b)) * (-(0.8f64 - 0.6).abs() / b).exp();
        let w = sample_weight(&[0.6, 0.3, 0.1], &ema, &cfg);
        assert!((w - 2.0 * b * phi).abs() < 1e-12);
        assert!((w - 0.1353352832366127).abs() < 1e-12);
        // continuity from below
        let just_below = sample_weight(&[0.8 - 1e-12, 0.2, 1e-12], &ema, &cfg);
        assert!((just_below - 1.0).abs() < 1e-9);
    }

    #[test]
    fn degenerate_scale_is_hard_threshold() {
        let cfg = WeightingConfig { lambda_max: 2.0 };
        let ema = ConfidenceEma::from_parts(0.7, 0.0, 0.9);
        assert_eq!(sample_weight(&[0.69, 0.31], &ema, &cfg), 0.0);
        assert_eq!(sample_weight(&[0.71, 0.29], &ema, &cfg), 2.0);
    }

    #[test]
    fn batch_stats_examples() {
        assert_eq!(batch_confidence_stats(&probs(&[&[0.7, 0.3], &[0.3, 0.7]])), Some((0.7, 0.0)));
        let (m, v) = batch_confidence_stats(&probs(&[&[0.5, 0.5], &[0.9, 0.1]])).unwrap();
        assert!((m - 0.7).abs() < 1e-15 && (v - 0.04).abs() < 1e-15);
        assert_eq!(batch_confidence_stats(&probs(&[&[0.2, 0.8]])), Some((0.8, 0.0)));
    }

    #[test]
    fn ema_examples() {
        let fresh = ConfidenceEma::new(3, 0.999);
        assert_eq!(fresh.mean(), 1.0 / 3.0);
        assert_eq!(fresh.var(), 1.0);

        let mut e = ConfidenceEma::new(3, 0.0);
        e.update(0.7, 0.04, 4);
        assert_eq!(e.mean(), 0.7);
        assert!((e.var() - 0.04 * 4.0 / 3.0).abs() < 1e-15);

        let mut e = ConfidenceEma::new(3, 1.0);
        e.update(0.7, 0.04, 4);
        assert_eq!((e.mean(), e.var()), (1.0 / 3.0, 1.0));

        let mut e = ConfidenceEma::new(2, 0.5);
        e.update(0.9, 0.3, 1);
        assert_eq!((e.mean(), e.var()), (0.7, 1.0));
    }

    #[test]
    fn schedule_examples() {
        let s = Schedule {
            total_rounds: 100,
            ..Default::default()
        };
        assert_eq!(s.eta(10.0), 0.0);
        assert!((s.eta(50.0) - 1.5).abs() < 1e-12);
        assert_eq!(s.eta(90.0), 3.0);
        assert_eq!(iota(16, 16), 1.0);
        assert_eq!(iota(0, 16), 0.0);
        assert_eq!(iota(4, 16), 0.25);
    }

    #[test]
    fn pseudo_label_examples() {
        let cfg = WeightingConfig::default();
        let ema = ConfidenceEma::new(3, 0.9);
        let (l, w) = pseudo_labels(&probs(&[&[0.0, 0.0, 1.0], &[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]]), &ema, &cfg);
        assert_eq!(l, vec![2, 0]);
        assert_eq!(w[0], 1.0);
        assert_eq!(w[1], laplace_weight(1.0 / 3.0, ema.mean(), ema.scale(), 1.0));

        let ema = ConfidenceEma::from_parts(0.6, 0.05, 0.9);
        let batch = probs(&[&[0.9, 0.1, 0.0], &[0.4, 0.35, 0.25], &[0.2, 0.5, 0.3], &[0.1, 0.1, 0.8]]);
        let (l, w) = pseudo_labels(&batch, &ema, &cfg);
        assert_eq!(l, vec![0, 0, 1, 2]);
        for i in 0..4 {
            assert_eq!(w[i], sample_weight(batch.row(i), &ema, &cfg));
        }
    }

    #[test]
    fn oracle_examples() {
        let cfg = WeightingConfig::default();
        let ema = ConfidenceEma::from_parts(0.5, 0.02, 0.9);
        let high = probs(&[&[0.9, 0.1], &[0.2, 0.8], &[0.6, 0.4]]);
        assert_eq!(quantity_oracle(&high, &ema, &cfg).unwrap(), 1.0);
        assert_eq!(quality_oracle(&high, &[0, 1, 0], &ema, &cfg).unwrap(), 1.0);
        assert_eq!(quality_oracle(&high, &[1, 0, 1], &ema, &cfg).unwrap(), 0.0);
        assert!(quantity(&[]).is_err());
        assert!(quality(&[0], &[0], &[0.0]).is_err());
    }

    #[test]
    fn half_pool_at_zero_weight_limit() {
        // half at λ_max, half with weight → 0: f approaches λ_max/2 from above
        // b = 0.04, gap 0.4: weight exp(-10) ≈ 4.5e-5
        let ema = ConfidenceEma::from_parts(0.9, 2.0 * 0.04 * 0.04, 0.9);
        let pool = probs(&[&[0.95, 0.05], &[0.95, 0.05], &[0.5, 0.5], &[0.5, 0.5]]);
        let f = quantity_oracle(&pool, &ema, &WeightingConfig::default()).unwrap();
        assert!(f > 0.5 && f - 0.5 < 3e-5);
    }

    #[test]
    fn symmetric_tight_pool_meets_chain() {
        // half the pool exactly at 1/C, half above; μ̂ is the pool mean
        let c = 3;
        let lo = 1.0 / 3.0;
        let hi = 0.9;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for i in 0..64 {
            rows.push(if i % 2 == 0 { vec![lo, lo, lo] } else { vec![hi, 0.05, 0.05] });
        }
        let pool = DenseArray::from_rows(&rows).unwrap();
        let (m, v) = batch_confidence_stats(&pool).unwrap();
        let mut ema = ConfidenceEma::new(c, 0.0);
        ema.update(m, v, 64);
        let truth = vec![0; 64];
        let b = pool_bounds(&pool, &truth, &ema, &WeightingConfig::default(), c).unwrap();
        assert_eq!(b.above, 32);
        assert!((b.quantity - b.chain_symmetric).abs() < 1e-12);
        assert!((b.chain_general - b.chain_symmetric).abs() < 1e-15);
    }

    #[test]
    fn skewed_pool_breaks_only_the_symmetric_chain() {
        // 90% of the pool just above 1/C, a few confident outliers lift the mean
        let c = 3;
        let mut rows = Vec::new();
        for i in 0..100 {
            rows.push(if i < 90 { vec![0.34, 0.33, 0.33] } else { vec![0.99, 0.005, 0.005] });
        }
        let pool = DenseArray::from_rows(&rows).unwrap();
        let (m, v) = batch_confidence_stats(&pool).unwrap();
        let mut ema = ConfidenceEma::new(c, 0.0);
        ema.update(m, v, 100);
        let b = pool_bounds(&pool, &vec![0; 100], &ema, &WeightingConfig::default(), c).unwrap();
        assert!(b.quantity < b.chain_symmetric);
        assert!(b.quantity >= b.chain_general);
        assert!(b.quantity > 0.5);
    }

    #[test]
    fn verifier_passes_and_detects_injected_fault() {
        let opts = VerifyOptions {
            trials: 200,
            ..Default::default()
        };
        let r = verify_weighting_bounds(&opts).unwrap();
        assert!(r.passed(), "{:?}", r.violations.first());
        assert!(r.evaluated > 150);
        let faulty = verify_weighting_bounds(&VerifyOptions {
            biased_variance: true,
            ..opts
        })
        .unwrap();
        assert_eq!(faulty.count("variance_estimator"), 200);
    }

    proptest! {
        #[test]
        fn weight_bounded_monotone_continuous(
            mean in 0.34f64..1.0, var in 1e-6f64..1.0, a in 0.0f64..1.0, b in 0.0f64..1.0, lm in 0.1f64..5.0,
        ) {
            let scale = (var / 2.0).sqrt();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let wl = laplace_weight(lo, mean, scale, lm);
            let wh = laplace_weight(hi, mean, scale, lm);
            prop_assert!((0.0..=lm).contains(&wl));
            prop_assert!(wl <= wh);
            let below = laplace_weight(mean - 1e-13, mean, scale, lm);
            prop_assert!((below - lm).abs() <= lm * 1e-6);
        }

        #[test]
        fn eta_monotone_and_continuous(t in 0.0f64..60.0, dt in 0.0f64..1.0, ef in 0.0f64..5.0) {
            let s = Schedule { total_rounds: 60, eta_final: ef, ..Default::default() };
            prop_assert!(s.eta(t) <= s.eta((t + dt).min(60.0)) + 1e-12);
            let eps = 1e-9;
            prop_assert!((s.eta(t) - s.eta(t + eps)).abs() <= ef * eps / (s.t2() - s.t1()) + 1e-12);
        }

        #[test]
        fn ema_contracts_toward_batch(m in 0.0f64..1.0, prev in 0.0f64..1.0, batch in 0.0f64..1.0) {
            let mut e = ConfidenceEma::from_parts(prev, 0.1, m);
            e.update(batch, 0.01, 8);
            prop_assert!(((e.mean() - batch).abs() - m * (prev - batch).abs()).abs() < 1e-12);
            prop_assert!(e.var() >= 0.0);
        }
    }
}
