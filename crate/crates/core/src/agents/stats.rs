//! Statistical reports and volatility classification.

use serde::{Deserialize, Serialize};

use super::scenario::Volatility;
use crate::error::{Error, Result};
use crate::metrics::marr;

/// Residual ramp rate below which a series counts as stable.
pub const STABLE_BELOW: f64 = 0.01;
/// Residual ramp rate below which a series counts as moderate.
pub const MODERATE_BELOW: f64 = 0.04;
/// Width of the centred moving average removed before measuring volatility.
pub const TREND_WINDOW: usize = 5;

pub const SEGMENT_NAMES: [&str; 4] = ["dawn", "morning", "afternoon", "evening"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlobalStats {
    pub max: f64,
    pub min: f64,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub marr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentStats {
    pub mean: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatReport {
    pub global: GlobalStats,
    /// Dawn, morning, afternoon, evening: the four equal quarters of the day.
    pub segments: [SegmentStats; 4],
}

pub fn stat_report(x: &[f64]) -> Result<StatReport> {
    if x.is_empty() || x.len() % 4 != 0 {
        return Err(Error::Argument(format!(
            "series length {} is not a positive multiple of 4",
            x.len()
        )));
    }
    let summary = |s: &[f64]| {
        let mean = s.iter().sum::<f64>() / s.len() as f64;
        let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (mean, max)
    };
    let (mean, max) = summary(x);
    let min = x.iter().copied().fold(f64::INFINITY, f64::min);
    let std = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / x.len() as f64).sqrt();
    let q = x.len() / 4;
    let segments = std::array::from_fn(|i| {
        let (mean, max) = summary(&x[i * q..(i + 1) * q]);
        SegmentStats { mean, max }
    });
    Ok(StatReport {
        global: GlobalStats {
            max,
            min,
            mean,
            std,
            marr: if x.len() >= 2 { marr(x)? } else { 0.0 },
        },
        segments,
    })
}

/// Centred moving average; the window shrinks at the ends.
pub fn moving_average(x: &[f64], window: usize) -> Vec<f64> {
    let h = window / 2;
    (0..x.len())
        .map(|i| {
            let lo = i.saturating_sub(h);
            let hi = (i + h + 1).min(x.len());
            x[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

/// Ramp rate of the series after removing its moving-average trend, so the
/// diurnal shape itself does not count as volatility.
pub fn residual_marr(x: &[f64]) -> Result<f64> {
    let trend = moving_average(x, TREND_WINDOW);
    let r: Vec<f64> = x.iter().zip(&trend).map(|(a, b)| a - b).collect();
    marr(&r)
}

pub fn classify_volatility(residual_marr: f64) -> Volatility {
    if residual_marr < STABLE_BELOW {
        Volatility::Stable
    } else if residual_marr < MODERATE_BELOW {
        Volatility::Moderate
    } else {
        Volatility::High
    }
}
