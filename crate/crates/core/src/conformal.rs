//! Split and weighted conformal intervals, the shifted-calibration coverage
//! gap bound and the plug-in Gaussian interval used as a reference.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Two-sided 95% standard-normal quantile.
pub const Z_975: f64 = 1.959964;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

/// Calibration scores with optional importance weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformalCalibration {
    pub scores: Vec<f64>,
    pub weights: Option<Vec<f64>>,
    pub alpha: f64,
}

impl ConformalCalibration {
    pub fn new(scores: Vec<f64>, weights: Option<Vec<f64>>, alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        if let Some(s) = scores.iter().find(|s| !(**s >= 0.0)) {
            return Err(Error::Config(format!("calibration score {s} must be ≥ 0")));
        }
        if let Some(w) = &weights {
            check_weights(&scores, w)?;
        }
        Ok(ConformalCalibration { scores, weights, alpha })
    }

    /// Split quantile when unweighted, weighted quantile otherwise.
    pub fn quantile(&self) -> f64 {
        match &self.weights {
            None => split_quantile(&self.scores, self.alpha),
            Some(w) => weighted_quantile_unchecked(&self.scores, w, self.alpha),
        }
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("miscoverage {alpha} must lie in (0, 1)")))
    }
}

fn check_weights(scores: &[f64], weights: &[f64]) -> Result<()> {
    if scores.len() != weights.len() {
        return Err(Error::Shape(format!("{} scores vs {} weights", scores.len(), weights.len())));
    }
    if let Some(w) = weights.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
        return Err(Error::Config(format!("weight {w} must be positive and finite")));
    }
    Ok(())
}

/// `|pred − actual|` elementwise.
pub fn residual_scores(preds: &[f64], actuals: &[f64]) -> Result<Vec<f64>> {
    if preds.len() != actuals.len() {
        return Err(Error::Shape(format!("{} predictions vs {} actuals", preds.len(), actuals.len())));
    }
    Ok(preds.iter().zip(actuals).map(|(p, a)| (p - a).abs()).collect())
}

/// Rank `⌈(1+N)(1−α)⌉` used by the split quantile.
pub fn split_rank(n: usize, alpha: f64) -> usize {
    // guard against (1+N)(1−α) landing a hair above an integer
    let x = (1.0 + n as f64) * (1.0 - alpha);
    let r = x.round();
    if (x - r).abs() <= 1e-9 * x.max(1.0) {
        r as usize
    } else {
        x.ceil() as usize
    }
}

/// The `⌈(1+N)(1−α)⌉`-th smallest score, or `+∞` when that rank exceeds `N`.
pub fn split_quantile(scores: &[f64], alpha: f64) -> f64 {
    let n = scores.len();
    let k = split_rank(n, alpha);
    if k > n {
        return f64::INFINITY;
    }
    let mut s = scores.to_vec();
    let k = k.max(1) - 1;
    let (_, v, _) = s.select_nth_unstable_by(k, f64::total_cmp);
    *v
}

/// Smallest score `q` whose normalized weight mass on `S ≤ q` reaches `1 − α`.
pub fn weighted_quantile(scores: &[f64], weights: &[f64], alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    check_weights(scores, weights)?;
    Ok(weighted_quantile_unchecked(scores, weights, alpha))
}

fn weighted_quantile_unchecked(scores: &[f64], weights: &[f64], alpha: f64) -> f64 {
    if scores.is_empty() {
        return f64::INFINITY;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let z: f64 = weights.iter().sum();
    let target = 1.0 - alpha;
    let mut acc = 0.0;
    let mut i = 0;
    while i < idx.len() {
        // sum whole tie groups before testing
        let s = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == s {
            acc += weights[idx[i]];
            i += 1;
        }
        if acc / z >= target - 1e-12 {
            return s;
        }
    }
    scores[idx[idx.len() - 1]]
}

/// Worst-case coverage shortfall `ε / ((1−ε) p_min)`.
pub fn gap_bound(epsilon: f64, p_min: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::Config(format!("ε = {epsilon} outside [0, 1)")));
    }
    if !(p_min > 0.0 && p_min.is_finite()) {
        return Err(Error::Config(format!("p_min = {p_min} must be positive")));
    }
    Ok(epsilon / ((1.0 - epsilon) * p_min))
}

pub fn conformal_interval(pred: f64, q: f64) -> Interval {
    Interval {
        lower: pred - q,
        upper: pred + q,
    }
}

/// Fraction of `actuals` inside their interval.
pub fn coverage_eval(intervals: &[Interval], actuals: &[f64]) -> Result<f64> {
    if intervals.len() != actuals.len() || actuals.is_empty() {
        return Err(Error::Shape(format!("{} intervals vs {} actuals", intervals.len(), actuals.len())));
    }
    let hit = intervals.iter().zip(actuals).filter(|(iv, a)| iv.contains(**a)).count();
    Ok(hit as f64 / actuals.len() as f64)
}

/// Standard-normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

/// `pred ± z_{1−α/2} σ`.
pub fn plugin_interval(pred: f64, sigma: f64, alpha: f64) -> Result<Interval> {
    check_alpha(alpha)?;
    if !(sigma >= 0.0) {
        return Err(Error::Config(format!("σ = {sigma} must be ≥ 0")));
    }
    let z = if alpha == 0.05 { Z_975 } else { normal_quantile(1.0 - alpha / 2.0) };
    Ok(conformal_interval(pred, z * sigma))
}
