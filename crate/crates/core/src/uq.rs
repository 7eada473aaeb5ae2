//! Prediction bands from the trained ensemble and their overlap with the
//! phenomenological ensemble.

use std::ops::Range;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bayes::{InverseGamma, VarianceMode};
use crate::error::{invalid, Error, Result};
use crate::io;
use crate::mc_train::EnsembleModel;
use crate::narx::regressor_row;
use crate::reactor::Trajectory;
use crate::rng::stream;
use crate::stats;

/// Unscaled one-step predictions of every member at `samples`.
#[derive(Debug, Clone, PartialEq)]
pub struct MemberPredictions {
    pub samples: Vec<usize>,
    /// `values[member][j]` predicts sample `samples[j]`.
    pub values: Vec<Vec<f64>>,
}

/// Samples of `ranges` that have a full lag window inside their own range.
pub fn predictable_samples(ranges: &[Range<usize>], max_lag: usize) -> Vec<usize> {
    ranges.iter().flat_map(|r| (r.start + max_lag).min(r.end)..r.end).collect()
}

/// One-step predictions from measured lagged inputs and outputs.
pub fn one_step_predict(ensemble: &EnsembleModel, traj: &Trajectory, ranges: &[Range<usize>]) -> Result<MemberPredictions> {
    let lag = ensemble.narx.max_lag();
    if ranges.iter().any(|r| r.end > traj.len()) {
        return invalid("prediction range exceeds the trajectory");
    }
    let samples = predictable_samples(ranges, lag);
    if samples.is_empty() {
        return invalid(format!("no sample has the {lag} lags the model needs"));
    }
    let inputs = traj.input_rows();
    let y = traj.series(ensemble.target);
    let mut x = Vec::with_capacity(samples.len() * ensemble.spec.input_dim);
    for &k in &samples {
        regressor_row(&inputs, &y, k, &ensemble.narx, &ensemble.scalers, &mut x);
    }
    let values = ensemble
        .members
        .par_iter()
        .map(|m| Ok(m.model.mlp.forward(&x)?.into_iter().map(|v| ensemble.scalers.output.unscale(v)).collect()))
        .collect::<Result<Vec<Vec<f64>>>>()?;
    Ok(MemberPredictions { samples, values })
}

/// Scaled outputs beyond this magnitude stop a free run.
pub const DIVERGENCE_LIMIT: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct FreeRun {
    /// First simulated sample.
    pub start: usize,
    /// `outputs[member]` covers `start..start + len`; truncated members hold `NaN` after the cut.
    pub outputs: Vec<Vec<f64>>,
    /// Sample index at which each member was cut, if it diverged.
    pub truncated: Vec<Option<usize>>,
}

/// Recursive simulation: every member feeds back its own predictions.
///
/// `initial` holds the measured outputs before `start` (at least the output lag
/// count, most recent last) and `inputs` covers the whole horizon from sample 0.
pub fn free_run_simulate(ensemble: &EnsembleModel, inputs: &[[f64; 4]], initial: &[f64], start: usize) -> Result<FreeRun> {
    let cfg = ensemble.narx;
    if start < cfg.max_lag() || initial.len() < cfg.output_lags || start > inputs.len() {
        return invalid(format!("free run from {start} needs {} lags of history", cfg.max_lag()));
    }
    let n = inputs.len();
    let runs: Vec<Result<(Vec<f64>, Option<usize>)>> = ensemble
        .members
        .par_iter()
        .map(|m| {
            let mut y = vec![f64::NAN; n];
            y[start - initial.len()..start].copy_from_slice(initial);
            let mut row = Vec::with_capacity(ensemble.spec.input_dim);
            let mut cut = None;
            for k in start..n {
                row.clear();
                regressor_row(inputs, &y, k, &cfg, &ensemble.scalers, &mut row);
                let s = m.model.mlp.forward(&row)?[0];
                if !s.is_finite() || s.abs() > DIVERGENCE_LIMIT {
                    cut = Some(k);
                    break;
                }
                y[k] = ensemble.scalers.output.unscale(s);
            }
            Ok((y[start..].to_vec(), cut))
        })
        .collect();
    let mut outputs = Vec::with_capacity(runs.len());
    let mut truncated = Vec::with_capacity(runs.len());
    for r in runs {
        let (o, c) = r?;
        outputs.push(o);
        truncated.push(c);
    }
    if !truncated.is_empty() && truncated.iter().all(Option::is_some) {
        return Err(Error::Domain("every member diverged during the free run".into()));
    }
    Ok(FreeRun { start, outputs, truncated })
}

/// Inverse-gamma law of a prediction error variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpistemicVariance {
    pub alpha: f64,
    /// `SSE/2` in standard mode, `2/SSE` in as-printed mode.
    pub beta: f64,
    pub mode: VarianceMode,
    pub distribution: InverseGamma,
}

impl EpistemicVariance {
    pub fn mean(&self) -> f64 {
        self.distribution.mean()
    }

    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.distribution.sample(rng)
    }
}

/// `alpha = N/2` with scale `SSE/2`; both modes describe the same law.
pub fn epistemic_variance(sse: f64, n_data: usize, mode: VarianceMode) -> Result<EpistemicVariance> {
    if !(sse > 0.0) || !sse.is_finite() || n_data == 0 {
        return invalid(format!("epistemic variance needs SSE > 0 and data, got ({sse}, {n_data})"));
    }
    let alpha = n_data as f64 / 2.0;
    let beta = match mode {
        VarianceMode::Standard => sse / 2.0,
        VarianceMode::AsPrinted => 2.0 / sse,
    };
    Ok(EpistemicVariance { alpha, beta, mode, distribution: InverseGamma::new(alpha, sse / 2.0)? })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandSource {
    EnsembleSpread,
    InverseGamma,
}

/// Gaussian widening of member predictions before taking quantiles.
#[derive(Debug, Clone, PartialEq)]
pub struct Widening {
    /// One variance law per member.
    pub variances: Vec<EpistemicVariance>,
    /// Noisy copies per member and sample.
    pub replicas: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionBand {
    pub times: Vec<f64>,
    pub center: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub level: f64,
    pub sources: Vec<BandSource>,
}

/// Per-sample type-7 quantiles over members (`values[member][sample]`).
pub fn prediction_band(times: &[f64], values: &[Vec<f64>], level: f64, widening: Option<&Widening>) -> Result<PredictionBand> {
    if values.len() < 2 {
        return invalid("a band needs at least two members");
    }
    if !(level > 0.0 && level < 1.0) {
        return invalid(format!("band level must lie in (0, 1), got {level}"));
    }
    if values.iter().any(|v| v.len() != times.len()) {
        return invalid("member predictions do not match the time grid");
    }
    let mut sources = vec![BandSource::EnsembleSpread];
    let mut pools: Vec<Vec<f64>> = (0..times.len()).map(|j| values.iter().map(|v| v[j]).collect()).collect();
    if let Some(w) = widening {
        if w.variances.len() != values.len() || w.replicas == 0 {
            return invalid("widening needs one variance per member and at least one replica");
        }
        sources.push(BandSource::InverseGamma);
        pools = vec![Vec::with_capacity(values.len() * w.replicas); times.len()];
        for (k, (v, law)) in values.iter().zip(&w.variances).enumerate() {
            let mut rng = stream(w.seed, "band-widening", k as u64);
            for _ in 0..w.replicas {
                let sd = law.sample(&mut rng).sqrt();
                let noise = Normal::new(0.0, sd).map_err(|e| Error::Domain(e.to_string()))?;
                for (pool, x) in pools.iter_mut().zip(v) {
                    pool.push(x + noise.sample(&mut rng));
                }
            }
        }
    }
    let a = (1.0 - level) / 2.0;
    let mut band = PredictionBand {
        times: times.to_vec(),
        center: Vec::with_capacity(times.len()),
        lower: Vec::with_capacity(times.len()),
        upper: Vec::with_capacity(times.len()),
        level,
        sources,
    };
    for pool in pools {
        let finite: Vec<f64> = pool.into_iter().filter(|v| v.is_finite()).collect();
        if finite.is_empty() {
            band.center.push(f64::NAN);
            band.lower.push(f64::NAN);
            band.upper.push(f64::NAN);
            continue;
        }
        let s = stats::sorted(&finite);
        band.center.push(stats::quantile_sorted(&s, 0.5));
        band.lower.push(stats::quantile_sorted(&s, a));
        band.upper.push(stats::quantile_sorted(&s, 1.0 - a));
    }
    Ok(band)
}

impl PredictionBand {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn width(&self, j: usize) -> f64 {
        self.upper[j] - self.lower[j]
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let rows: Vec<Vec<f64>> =
            (0..self.len()).map(|j| vec![self.times[j], self.center[j], self.lower[j], self.upper[j]]).collect();
        io::write_matrix(path, &["time", "center", "lower", "upper"], &rows)
    }

    /// Reads the four columns back; level and sources are not part of the file.
    pub fn read_csv(path: &Path, level: f64) -> Result<Self> {
        let (header, rows) = io::read_matrix(path)?;
        if header != ["time", "center", "lower", "upper"] {
            return Err(Error::Parse(format!("{}: unexpected band header", path.display())));
        }
        Ok(Self {
            times: rows.iter().map(|r| r[0]).collect(),
            center: rows.iter().map(|r| r[1]).collect(),
            lower: rows.iter().map(|r| r[2]).collect(),
            upper: rows.iter().map(|r| r[3]).collect(),
            level,
            sources: vec![BandSource::EnsembleSpread],
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub samples: usize,
    pub overlapping: usize,
    pub fraction: f64,
    pub threshold: f64,
    pub pass: bool,
}

/// Fraction of samples where the two intervals intersect.
pub fn overlap_validate(a: &PredictionBand, b: &PredictionBand, threshold: f64) -> Result<OverlapReport> {
    if a.times != b.times {
        return invalid("bands are on different time grids");
    }
    if a.is_empty() {
        return invalid("empty bands");
    }
    let overlapping = (0..a.len()).filter(|&j| a.lower[j].max(b.lower[j]) <= a.upper[j].min(b.upper[j])).count();
    let fraction = overlapping as f64 / a.len() as f64;
    Ok(OverlapReport { samples: a.len(), overlapping, fraction, threshold, pass: fraction >= threshold })
}
