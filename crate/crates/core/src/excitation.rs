//! Persistent-excitation step schedules and measurement noise.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Error, Result};
use crate::io;
use crate::reactor::{Channel, ReactorInputs, Trajectory, INPUT_NAMES};
use crate::stats;

/// Latin hypercube design: `samples[step][input]` in physical units.
#[derive(Debug, Clone, PartialEq)]
pub struct LhsDesign {
    pub samples: Vec<Vec<f64>>,
    pub bounds: Vec<(f64, f64)>,
}

impl LhsDesign {
    pub fn n_steps(&self) -> usize {
        self.samples.len()
    }

    pub fn n_inputs(&self) -> usize {
        self.bounds.len()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.samples.iter().map(|r| r[j]).collect()
    }

    /// Number of samples falling in each equal-width stratum of column `j`.
    pub fn stratum_counts(&self, j: usize) -> Vec<usize> {
        let n = self.n_steps();
        let (lo, hi) = self.bounds[j];
        let mut counts = vec![0; n];
        for r in &self.samples {
            let k = (((r[j] - lo) / (hi - lo)) * n as f64).floor() as isize;
            counts[k.clamp(0, n as isize - 1) as usize] += 1;
        }
        counts
    }
}

/// Draw a Latin hypercube design with one point per stratum in every column.
pub fn lhs_sample<R: Rng + ?Sized>(n_steps: usize, bounds: &[(f64, f64)], rng: &mut R) -> Result<LhsDesign> {
    if n_steps == 0 {
        return invalid("LHS needs at least one step");
    }
    if bounds.is_empty() {
        return invalid("LHS needs at least one input");
    }
    for &(lo, hi) in bounds {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return invalid(format!("degenerate LHS bounds ({lo}, {hi})"));
        }
    }
    let mut samples = vec![vec![0.0; bounds.len()]; n_steps];
    let mut perm: Vec<usize> = (0..n_steps).collect();
    for (j, &(lo, hi)) in bounds.iter().enumerate() {
        perm.shuffle(rng);
        let width = (hi - lo) / n_steps as f64;
        for (row, &stratum) in samples.iter_mut().zip(&perm) {
            let u: f64 = rng.gen();
            row[j] = (lo + (stratum as f64 + u) * width).min(hi);
        }
    }
    Ok(LhsDesign { samples, bounds: bounds.to_vec() })
}

/// Best of `candidates` independent LHS designs, ranked by the largest
/// absolute pairwise column correlation.
pub fn lhs_sample_min_correlation<R: Rng + ?Sized>(
    n_steps: usize,
    bounds: &[(f64, f64)],
    candidates: usize,
    rng: &mut R,
) -> Result<LhsDesign> {
    if candidates == 0 {
        return invalid("need at least one candidate design");
    }
    let mut best = lhs_sample(n_steps, bounds, rng)?;
    if n_steps < 3 || bounds.len() < 2 {
        return Ok(best);
    }
    let mut best_score = max_abs_correlation(&best)?;
    for _ in 1..candidates {
        let d = lhs_sample(n_steps, bounds, rng)?;
        let score = max_abs_correlation(&d)?;
        if score < best_score {
            best = d;
            best_score = score;
        }
    }
    Ok(best)
}

fn max_abs_correlation(design: &LhsDesign) -> Result<f64> {
    let c = correlation_matrix(design)?;
    let mut worst = 0.0f64;
    for (i, row) in c.iter().enumerate() {
        for v in &row[..i] {
            worst = worst.max(v.abs());
        }
    }
    Ok(worst)
}

/// Symmetric ranges `s (1 +- fraction)` around each steady input.
pub fn bounds_from_steady(steady: &ReactorInputs, fraction: f64) -> Result<Vec<(f64, f64)>> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return invalid(format!("bound fraction must lie in (0, 1), got {fraction}"));
    }
    Ok(steady.to_array().iter().map(|&s| (s * (1.0 - fraction), s * (1.0 + fraction))).collect())
}

/// Pearson correlation between design columns.
pub fn correlation_matrix(design: &LhsDesign) -> Result<Vec<Vec<f64>>> {
    if design.n_steps() < 3 {
        return invalid("correlation needs at least three steps");
    }
    let cols: Vec<Vec<f64>> = (0..design.n_inputs()).map(|j| design.column(j)).collect();
    for (j, c) in cols.iter().enumerate() {
        if stats::variance(c) == 0.0 {
            return invalid(format!("design column {j} has zero variance"));
        }
    }
    let n = cols.len();
    let mut m = vec![vec![0.0; n]; n];
    for i in 0..n {
        m[i][i] = 1.0;
        for j in 0..i {
            let r = stats::pearson(&cols[i], &cols[j]);
            m[i][j] = r;
            m[j][i] = r;
        }
    }
    Ok(m)
}

pub fn write_correlation_csv(path: &Path, matrix: &[Vec<f64>], names: &[&str]) -> Result<()> {
    let mut header = vec!["input".to_string()];
    header.extend(names.iter().map(|s| s.to_string()));
    let rows: Vec<Vec<String>> = matrix
        .iter()
        .zip(names)
        .map(|(row, n)| std::iter::once(n.to_string()).chain(row.iter().map(|v| io::fmt_f64(*v))).collect())
        .collect();
    io::write_rows(path, &header, &rows)
}

/// Piecewise-constant input sequence.
///
/// Level `k` is active on `[start + k hold, start + (k+1) hold)`; the last level
/// also covers the final instant.
#[derive(Debug, Clone, PartialEq)]
pub struct InputSchedule {
    pub start_time: f64,
    pub hold_duration: f64,
    pub levels: Vec<ReactorInputs>,
}

impl InputSchedule {
    pub fn new(levels: Vec<ReactorInputs>, hold_duration: f64) -> Result<Self> {
        if levels.is_empty() {
            return invalid("schedule needs at least one level");
        }
        if !(hold_duration > 0.0) || !hold_duration.is_finite() {
            return invalid(format!("hold duration must be positive, got {hold_duration}"));
        }
        for u in &levels {
            u.validate()?;
        }
        Ok(Self { start_time: 0.0, hold_duration, levels })
    }

    pub fn constant(inputs: ReactorInputs, duration: f64) -> Self {
        Self { start_time: 0.0, hold_duration: duration, levels: vec![inputs] }
    }

    pub fn from_design(design: &LhsDesign, hold_duration: f64) -> Result<Self> {
        if design.n_inputs() != 4 {
            return invalid(format!("a reactor schedule needs 4 inputs, design has {}", design.n_inputs()));
        }
        let levels = design.samples.iter().map(|r| ReactorInputs::from_array([r[0], r[1], r[2], r[3]])).collect();
        Self::new(levels, hold_duration)
    }

    pub fn steps(&self) -> usize {
        self.levels.len()
    }

    pub fn start(&self) -> f64 {
        self.start_time
    }

    pub fn end(&self) -> f64 {
        self.segment_end(self.steps() - 1)
    }

    pub fn duration(&self) -> f64 {
        self.steps() as f64 * self.hold_duration
    }

    pub fn segment_start(&self, k: usize) -> f64 {
        self.start_time + k as f64 * self.hold_duration
    }

    pub fn segment_end(&self, k: usize) -> f64 {
        self.start_time + (k + 1) as f64 * self.hold_duration
    }

    pub fn segment_index(&self, t: f64) -> usize {
        let k = ((t - self.start_time) / self.hold_duration + 1e-9).floor();
        if k < 0.0 {
            0
        } else {
            (k as usize).min(self.steps() - 1)
        }
    }

    pub fn level(&self, k: usize) -> ReactorInputs {
        self.levels[k]
    }

    pub fn level_at(&self, t: f64) -> ReactorInputs {
        self.levels[self.segment_index(t)]
    }

    /// Uniform sampling grid `start, start + dt, ..., end`.
    pub fn grid(&self, dt: f64) -> Result<Vec<f64>> {
        if !(dt > 0.0) {
            return invalid(format!("sample period must be positive, got {dt}"));
        }
        let n = (self.duration() / dt + 1e-9).floor() as usize;
        Ok((0..=n).map(|k| self.start_time + k as f64 * dt).collect())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut header = vec!["step_index", "start_time"];
        header.extend(INPUT_NAMES);
        let rows: Vec<Vec<f64>> = self
            .levels
            .iter()
            .enumerate()
            .map(|(k, u)| {
                let mut r = vec![k as f64, self.segment_start(k)];
                r.extend(u.to_array());
                r
            })
            .collect();
        io::write_matrix(path, &header, &rows)
    }

    /// Read a schedule; the hold duration is recovered from the start times.
    pub fn read_csv(path: &Path, hold_if_single: f64) -> Result<Self> {
        let (header, rows) = io::read_matrix(path)?;
        if header != ["step_index", "start_time", "Qi", "Qs", "Qm", "Qc"] {
            return Err(Error::Parse(format!("{}: unexpected schedule header", path.display())));
        }
        if rows.is_empty() {
            return Err(Error::Parse(format!("{}: empty schedule", path.display())));
        }
        let hold = if rows.len() > 1 { rows[1][1] - rows[0][1] } else { hold_if_single };
        let levels = rows.iter().map(|r| ReactorInputs::from_array([r[2], r[3], r[4], r[5]])).collect();
        let mut s = Self::new(levels, hold)?;
        s.start_time = rows[0][1];
        Ok(s)
    }
}

/// Add white Gaussian noise with `sigma = range_fraction * (max - min)` per channel.
pub fn add_noise<R: Rng + ?Sized>(
    traj: &Trajectory,
    channels: &[Channel],
    range_fraction: f64,
    rng: &mut R,
) -> Result<Trajectory> {
    if !(range_fraction > 0.0) || !range_fraction.is_finite() {
        return invalid(format!("noise fraction must be positive, got {range_fraction}"));
    }
    let mut out = traj.clone();
    for &ch in channels {
        let clean = traj.series(ch);
        let range = stats::max(&clean) - stats::min(&clean);
        if !(range > 0.0) || !range.is_finite() {
            return invalid(format!("channel {ch} has no usable range for noise scaling"));
        }
        let normal = Normal::new(0.0, range_fraction * range).expect("positive finite sigma");
        let noisy: Vec<f64> = clean.iter().map(|v| v + normal.sample(rng)).collect();
        out.set_series(ch, &noisy)?;
    }
    Ok(out)
}

/// Noise standard deviation used by [`add_noise`] for one clean series.
pub fn noise_sigma(clean: &[f64], range_fraction: f64) -> f64 {
    range_fraction * (stats::max(clean) - stats::min(clean))
}
