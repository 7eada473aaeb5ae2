//! Chain summaries and the Geweke convergence diagnostic.

use serde::{Deserialize, Serialize};

use super::dram::Chain;
use crate::error::{invalid, Error, Result};
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectralWindow {
    /// Spectral density at zero estimated by the plain sample variance.
    #[default]
    ZeroLag,
    /// Bartlett-weighted autocovariances up to `sqrt(n)` lags.
    Bartlett,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Geweke {
    pub z: f64,
    pub p: f64,
}

fn spectral_zero(x: &[f64], window: SpectralWindow) -> f64 {
    let n = x.len();
    let m = stats::mean(x);
    let acov = |lag: usize| x[..n - lag].iter().zip(&x[lag..]).map(|(a, b)| (a - m) * (b - m)).sum::<f64>() / n as f64;
    match window {
        SpectralWindow::ZeroLag => stats::variance(x),
        SpectralWindow::Bartlett => {
            let max_lag = ((n as f64).sqrt() as usize).min(n - 1);
            let mut s = acov(0);
            for lag in 1..=max_lag {
                s += 2.0 * (1.0 - lag as f64 / (max_lag + 1) as f64) * acov(lag);
            }
            s.max(0.0)
        }
    }
}

/// Geweke z-score comparing the first and last fractions of one series.
pub fn geweke_series(x: &[f64], first_fraction: f64, last_fraction: f64, window: SpectralWindow) -> Result<Geweke> {
    if x.len() < 100 {
        return invalid(format!("Geweke needs at least 100 draws, got {}", x.len()));
    }
    if !(first_fraction > 0.0 && last_fraction > 0.0 && first_fraction + last_fraction <= 1.0) {
        return invalid(format!("invalid Geweke fractions ({first_fraction}, {last_fraction})"));
    }
    let n = x.len();
    let n1 = ((first_fraction * n as f64).round() as usize).max(2);
    let n2 = ((last_fraction * n as f64).round() as usize).max(2);
    let a = &x[..n1];
    let b = &x[n - n2..];
    let (sa, sb) = (spectral_zero(a, window), spectral_zero(b, window));
    if sa == 0.0 || sb == 0.0 {
        return Err(Error::Domain("Geweke segment has zero variance".into()));
    }
    let z = (stats::mean(a) - stats::mean(b)) / (sa / n1 as f64 + sb / n2 as f64).sqrt();
    Ok(Geweke { z, p: 2.0 * (1.0 - stats::normal_cdf(z.abs())) })
}

/// Per-parameter Geweke statistics over the post-burn-in draws.
pub fn geweke(chain: &Chain, first_fraction: f64, last_fraction: f64, window: SpectralWindow) -> Result<Vec<Geweke>> {
    (0..chain.dim()).map(|j| geweke_series(&chain.column(j), first_fraction, last_fraction, window)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamStats {
    pub mean: f64,
    pub median: f64,
    pub std: f64,
}

pub fn series_stats(x: &[f64]) -> ParamStats {
    ParamStats { mean: stats::mean(x), median: stats::median(x), std: stats::std_dev(x) }
}

pub fn chain_stats(chain: &Chain) -> Result<Vec<ParamStats>> {
    if chain.post_burn_in().len() < 2 {
        return invalid("chain statistics need at least two post-burn-in draws");
    }
    Ok((0..chain.dim()).map(|j| series_stats(&chain.column(j))).collect())
}
