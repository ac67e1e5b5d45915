use serde::{Deserialize, Serialize};

use super::EpisodeResult;
use crate::error::{Error, Result};

/// Mean with a normal-approximation 95% interval `1.96 s / sqrt(n)`, where
/// `s` is the sample standard deviation (`n - 1` denominator).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub ci95: f64,
    /// Set when `n == 1`: the interval is reported as 0 but is undefined.
    pub single_sample: bool,
}

pub fn summarize(values: &[f64]) -> Result<SummaryStats> {
    let n = values.len();
    if n == 0 {
        return Err(Error::Data("cannot summarize an empty set".into()));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::Data(format!("non-finite value {v} in summary input")));
    }
    let first = values[0];
    if values.iter().all(|&v| v == first) {
        return Ok(SummaryStats { n, mean: first, std: 0.0, ci95: 0.0, single_sample: n == 1 });
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    let std = var.sqrt();
    Ok(SummaryStats { n, mean, std, ci95: 1.96 * std / (n as f64).sqrt(), single_sample: false })
}

/// Accuracy summary over episodes.
pub fn aggregate(results: &[EpisodeResult]) -> Result<SummaryStats> {
    let acc: Vec<f64> = results.iter().map(|r| r.accuracy).collect();
    summarize(&acc)
}
