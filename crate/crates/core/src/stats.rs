//! Exact order statistics over finite samples.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

/// Exact five-number style summary of a sample.
///
/// Quantiles use linear interpolation between order statistics (the
/// "type 7" definition), so the median of `[2, 10]` is `6`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Summary {
    pub count: u64,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub iqr: f64,
    pub total: f64,
}

impl Summary {
    /// Summarises `values`. An empty sample yields the all-zero summary.
    pub fn of(values: &[f64]) -> Self {
        let mut sorted: Vec<f64> = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Self::of_sorted(&sorted)
    }

    /// Same as [`Summary::of`] for already ascending input.
    pub fn of_sorted(sorted: &[f64]) -> Self {
        if sorted.is_empty() {
            return Self::default();
        }
        let total: f64 = sorted.iter().sum();
        let q1 = quantile_sorted(sorted, 0.25);
        let q3 = quantile_sorted(sorted, 0.75);
        Self {
            count: sorted.len() as u64,
            min: sorted[0],
            max: sorted[sorted.len() - 1],
            mean: total / sorted.len() as f64,
            median: quantile_sorted(sorted, 0.5),
            q1,
            q3,
            iqr: q3 - q1,
            total,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }
}

/// Linear-interpolation quantile of an ascending, non-empty slice.
///
/// # Panics
///
/// Panics on an empty slice or `q` outside `[0, 1]`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty sample");
    assert!((0.0..=1.0).contains(&q), "quantile level out of range");
    let pos = q * (sorted.len() - 1) as f64;
    let lo = libm::floor(pos) as usize;
    let hi = libm::ceil(pos) as usize;
    let frac = pos - lo as f64;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * frac
    }
}

/// Fixed-width histogram over `[lo, hi]`; the last bin is closed on the right
/// and values outside the range are clamped into the end bins.
pub fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<u64> {
    let mut counts = alloc::vec![0u64; bins];
    if bins == 0 || hi <= lo {
        return counts;
    }
    let width = (hi - lo) / bins as f64;
    for &v in values {
        let idx = libm::floor((v - lo) / width);
        let idx = if idx < 0.0 { 0 } else { (idx as usize).min(bins - 1) };
        counts[idx] += 1;
    }
    counts
}
