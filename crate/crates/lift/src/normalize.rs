//! Per-channel, per-window instance normalization without affine parameters.
//!
//! Statistics are fitted on the lookback window and reused to denormalize
//! horizon predictions; the standard deviation is the population (1/L) one.

use crate::error::{LiftError, Result};
use serde::{Deserialize, Serialize};

/// Floor applied to the standard deviation of degenerate (constant) channels.
pub const STD_EPS: f64 = 1e-5;

/// Per-channel mean and (floored) standard deviation of a lookback window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// Fits per-channel statistics on a C x L window.
pub fn fit(window: &[Vec<f64>]) -> Result<NormStats> {
    if window.iter().any(|row| row.len() < 2) {
        return Err(LiftError::InvalidInput(
            "normalization window needs at least 2 samples per channel".into(),
        ));
    }
    let mut mean = Vec::with_capacity(window.len());
    let mut std = Vec::with_capacity(window.len());
    for row in window {
        let n = row.len() as f64;
        let m = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
        mean.push(m);
        std.push(var.sqrt().max(STD_EPS));
    }
    Ok(NormStats { mean, std })
}

fn check_channels(rows: usize, stats: &NormStats) -> Result<()> {
    if rows != stats.channels() {
        return Err(LiftError::ShapeMismatch(format!(
            "{} channels vs stats for {}",
            rows,
            stats.channels()
        )));
    }
    Ok(())
}

/// Row-wise (x - mean) / std.
pub fn apply(x: &[Vec<f64>], stats: &NormStats) -> Result<Vec<Vec<f64>>> {
    check_channels(x.len(), stats)?;
    Ok(x.iter()
        .enumerate()
        .map(|(c, row)| {
            let (m, s) = (stats.mean[c], stats.std[c]);
            row.iter().map(|v| (v - m) / s).collect()
        })
        .collect())
}

/// Exact inverse of `apply`.
pub fn invert(x_norm: &[Vec<f64>], stats: &NormStats) -> Result<Vec<Vec<f64>>> {
    check_channels(x_norm.len(), stats)?;
    Ok(x_norm
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let (m, s) = (stats.mean[c], stats.std[c]);
            row.iter().map(|v| v * s + m).collect()
        })
        .collect())
}
