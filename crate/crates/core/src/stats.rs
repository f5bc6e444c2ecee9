//! Descriptive statistics used by the evaluation reports.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population standard deviation.
pub fn std_dev(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Pearson correlation; `None` when either sample is constant.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let (mx, my) = (mean(xs), mean(ys));
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some(cov / (vx * vy).sqrt())
}

/// Quantile of sorted data with linear interpolation between order statistics.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Box-plot summary of a sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
    /// Most extreme data within 1.5 IQR of the quartiles.
    pub whisker_low: f64,
    pub whisker_high: f64,
    /// Approximate 95% interval of the median, `median +- 1.57 IQR / sqrt(n)`.
    pub notch_low: f64,
    pub notch_high: f64,
}

impl Summary {
    pub fn from_samples(xs: &[f64]) -> Result<Self> {
        if xs.is_empty() {
            return Err(Error::domain("summary of an empty sample"));
        }
        if xs.iter().any(|x| !x.is_finite()) {
            return Err(Error::domain("summary of non-finite data"));
        }
        let mut sorted = xs.to_vec();
        sorted.sort_by(f64::total_cmp);
        let q25 = quantile_sorted(&sorted, 0.25);
        let median = quantile_sorted(&sorted, 0.5);
        let q75 = quantile_sorted(&sorted, 0.75);
        let iqr = q75 - q25;
        let (lo_fence, hi_fence) = (q25 - 1.5 * iqr, q75 + 1.5 * iqr);
        let whisker_low = sorted.iter().copied().find(|&x| x >= lo_fence).unwrap_or(sorted[0]);
        let whisker_high = sorted.iter().rev().copied().find(|&x| x <= hi_fence).unwrap_or(sorted[sorted.len() - 1]);
        let half_notch = 1.57 * iqr / (xs.len() as f64).sqrt();
        Ok(Self {
            count: xs.len(),
            mean: mean(xs),
            std: std_dev(xs),
            min: sorted[0],
            q25,
            median,
            q75,
            max: sorted[sorted.len() - 1],
            whisker_low,
            whisker_high,
            notch_low: median - half_notch,
            notch_high: median + half_notch,
        })
    }
}
