//! Convergence diagnostics: fits the tail of a squared-Wasserstein
//! series to `floor + c / k`, the decay-to-a-floor shape the coverage
//! analysis predicts, and reports how much tail variance the fit leaves
//! unexplained.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default residual-fraction threshold for calling a series consistent
/// with `O(1/k)` decay to a floor.
pub const RESIDUAL_FRACTION_THRESHOLD: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    /// Estimated decay coefficient `c` in `floor + c / k`.
    pub c_hat: f64,
    /// Estimated asymptotic floor.
    pub floor: f64,
    /// Sum of squared fit residuals over the tail divided by the tail
    /// variance (0 when the tail is constant).
    pub residual_frac: f64,
    /// `c_hat > 0` and `residual_frac` below the threshold used.
    pub consistent: bool,
}

/// Least-squares fit of `w2sq(k) ~ floor + c / k` over the tail half of
/// the series (entries with `k >= 1`). Needs at least 10 points.
pub fn convergence_diagnostics(
    series: &[(usize, f64)],
    residual_frac_threshold: f64,
) -> Result<DecayFit> {
    if series.len() < 10 {
        return Err(Error::InvalidArgument(format!(
            "need at least 10 series points, got {}",
            series.len()
        )));
    }
    let tail_start = series.len() / 2;
    let tail: Vec<(f64, f64)> = series[tail_start..]
        .iter()
        .filter(|(k, _)| *k >= 1)
        .map(|(k, y)| (*k as f64, *y))
        .collect();
    if tail.len() < 3 {
        return Err(Error::InvalidArgument(
            "series tail has fewer than 3 usable points".into(),
        ));
    }

    let n = tail.len() as f64;
    let mean_y = tail.iter().map(|(_, y)| y).sum::<f64>() / n;
    let sst: f64 = tail.iter().map(|(_, y)| (y - mean_y).powi(2)).sum();
    // Variation below roundoff scale means a constant tail.
    let sst_floor = 1e-18 * n * mean_y.powi(2).max(1e-12);
    let constant = sst <= sst_floor;

    // Normal equations for the basis [1, 1/k].
    let sum_x: f64 = tail.iter().map(|(k, _)| 1.0 / k).sum();
    let sum_xx: f64 = tail.iter().map(|(k, _)| 1.0 / (k * k)).sum();
    let sum_y: f64 = tail.iter().map(|(_, y)| y).sum();
    let sum_xy: f64 = tail.iter().map(|(k, y)| y / k).sum();
    let det = n * sum_xx - sum_x * sum_x;

    let (floor, c_hat) = if constant || det.abs() <= 1e-14 * (n * sum_xx).max(1.0) {
        // Constant series or a degenerate design: floor at the mean.
        (mean_y, 0.0)
    } else {
        let floor = (sum_xx * sum_y - sum_x * sum_xy) / det;
        let c_hat = (n * sum_xy - sum_x * sum_y) / det;
        (floor, c_hat)
    };

    let ssr: f64 = tail
        .iter()
        .map(|(k, y)| (y - floor - c_hat / k).powi(2))
        .sum();
    let residual_frac = if constant { 0.0 } else { ssr / sst };
    Ok(DecayFit {
        c_hat,
        floor,
        residual_frac,
        consistent: c_hat > 0.0 && residual_frac < residual_frac_threshold,
    })
}
