//! NARX regressors and Lipschitz-index lag selection.

use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::io;
use crate::reactor::{Channel, Trajectory};
use crate::rng::stream;

/// Lag structure of a NARX predictor.
///
/// Input taps are `u[k-1] .. u[k-input_lags]`, preceded by `u[k]` when
/// `include_current_input` is set; output taps are `y[k-1] .. y[k-output_lags]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NarxConfig {
    pub input_lags: usize,
    pub output_lags: usize,
    #[serde(default)]
    pub include_current_input: bool,
}

impl Default for NarxConfig {
    fn default() -> Self {
        Self { input_lags: 4, output_lags: 2, include_current_input: false }
    }
}

impl NarxConfig {
    pub fn validate(&self) -> Result<()> {
        if self.output_lags == 0 {
            return invalid("at least one output lag is required");
        }
        Ok(())
    }

    pub fn input_taps(&self) -> usize {
        self.input_lags + usize::from(self.include_current_input)
    }

    pub fn feature_dim(&self, n_inputs: usize) -> usize {
        n_inputs * self.input_taps() + self.output_lags
    }

    /// Index of the first sample that has a complete regressor.
    pub fn max_lag(&self) -> usize {
        self.input_lags.max(self.output_lags)
    }
}

/// Affine map of `[min, max]` onto `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub min: f64,
    pub max: f64,
}

impl Scaler {
    pub fn fit(values: impl IntoIterator<Item = f64>) -> Result<Self> {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for v in values {
            if v.is_finite() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        if !lo.is_finite() {
            return invalid("cannot fit a scaler on empty data");
        }
        Ok(Self { min: lo, max: hi })
    }

    fn half_range(&self) -> f64 {
        0.5 * (self.max - self.min)
    }

    #[inline]
    pub fn scale(&self, v: f64) -> f64 {
        let h = self.half_range();
        if h > 0.0 {
            (v - self.min) / h - 1.0
        } else {
            0.0
        }
    }

    #[inline]
    pub fn unscale(&self, s: f64) -> f64 {
        (s + 1.0) * self.half_range() + self.min
    }

    /// Factor converting a scaled variance into physical units.
    pub fn variance_factor(&self) -> f64 {
        self.half_range().powi(2)
    }
}

/// One experiment: input rows and the matching output series.
#[derive(Debug, Clone, PartialEq)]
pub struct IoSeries {
    pub inputs: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

impl IoSeries {
    pub fn from_trajectory(traj: &Trajectory, target: Channel) -> Self {
        Self { inputs: traj.inputs.iter().map(|u| u.to_array().to_vec()).collect(), output: traj.series(target) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LipschitzOptions {
    pub p_fraction: f64,
    pub max_pairs: usize,
    pub seed: u64,
    /// Multiply the quotients by the square root of the regressor dimension.
    pub dimension_scaling: bool,
}

impl Default for LipschitzOptions {
    fn default() -> Self {
        Self { p_fraction: 0.02, max_pairs: 200_000, seed: 0, dimension_scaling: true }
    }
}

fn scaled_series(data: &[IoSeries]) -> Result<(Vec<Vec<Vec<f64>>>, Vec<Vec<f64>>)> {
    if data.is_empty() {
        return invalid("no data for the Lipschitz index");
    }
    let n_in = data[0].inputs.first().map_or(0, |r| r.len());
    let in_scalers: Vec<Scaler> = (0..n_in)
        .map(|j| Scaler::fit(data.iter().flat_map(|s| s.inputs.iter().map(move |r| r[j]))))
        .collect::<Result<_>>()?;
    let out_scaler = Scaler::fit(data.iter().flat_map(|s| s.output.iter().copied()))?;
    let u = data
        .iter()
        .map(|s| s.inputs.iter().map(|r| r.iter().zip(&in_scalers).map(|(v, sc)| sc.scale(*v)).collect()).collect())
        .collect();
    let y = data.iter().map(|s| s.output.iter().map(|v| out_scaler.scale(*v)).collect()).collect();
    Ok((u, y))
}

/// Lipschitz index of the map from lagged regressors to the current output.
pub fn lipschitz_index(data: &[IoSeries], lu: usize, ly: usize, opts: &LipschitzOptions) -> Result<f64> {
    let (u, y) = scaled_series(data)?;
    lipschitz_index_scaled(&u, &y, lu, ly, opts)
}

fn lipschitz_index_scaled(u: &[Vec<Vec<f64>>], y: &[Vec<f64>], lu: usize, ly: usize, opts: &LipschitzOptions) -> Result<f64> {
    if lu + ly == 0 {
        return invalid("the Lipschitz index needs at least one lag");
    }
    if !(opts.p_fraction > 0.0 && opts.p_fraction <= 1.0) {
        return invalid(format!("p_fraction must lie in (0, 1], got {}", opts.p_fraction));
    }
    let m = lu.max(ly);
    let mut regs: Vec<Vec<f64>> = Vec::new();
    let mut targets: Vec<f64> = Vec::new();
    for (us, ys) in u.iter().zip(y) {
        for k in m..ys.len() {
            let mut r = Vec::with_capacity(lu * us[k].len() + ly);
            for l in 1..=lu {
                r.extend_from_slice(&us[k - l]);
            }
            for l in 1..=ly {
                r.push(ys[k - l]);
            }
            regs.push(r);
            targets.push(ys[k]);
        }
    }
    let n = regs.len();
    let total_pairs = n * n.saturating_sub(1) / 2;
    if total_pairs == 0 || (total_pairs as f64) < 1.0 / opts.p_fraction {
        return invalid(format!("too few samples ({n}) for p_fraction {}", opts.p_fraction));
    }
    let quotient = |i: usize, j: usize| -> Option<f64> {
        let d2: f64 = regs[i].iter().zip(&regs[j]).map(|(a, b)| (a - b) * (a - b)).sum();
        (d2 > 0.0).then(|| (targets[i] - targets[j]).abs() / d2.sqrt())
    };
    let mut q: Vec<f64> = Vec::with_capacity(total_pairs.min(opts.max_pairs));
    if total_pairs <= opts.max_pairs {
        for i in 0..n {
            for j in i + 1..n {
                q.extend(quotient(i, j));
            }
        }
    } else {
        let mut rng = stream(opts.seed, "lipschitz-pairs", (lu * 1000 + ly) as u64);
        let mut attempts = 0usize;
        while q.len() < opts.max_pairs && attempts < 20 * opts.max_pairs {
            attempts += 1;
            let i = rng.gen_range(0..n);
            let j = rng.gen_range(0..n);
            if i != j {
                q.extend(quotient(i, j));
            }
        }
    }
    if q.is_empty() {
        return Err(Error::Domain("all regressor pairs are duplicates".into()));
    }
    let k = ((opts.p_fraction * q.len() as f64).ceil() as usize).max(1);
    let nth = q.len() - k;
    q.select_nth_unstable_by(nth, |a, b| a.partial_cmp(b).expect("finite quotients"));
    let top = &q[nth..];
    if top.iter().any(|v| *v == 0.0) {
        return Ok(0.0);
    }
    let dim = (lu * u.first().and_then(|s| s.first()).map_or(0, |r| r.len()) + ly) as f64;
    let factor = if opts.dimension_scaling { dim.sqrt() } else { 1.0 };
    Ok((top.iter().map(|v| (factor * v).ln()).sum::<f64>() / k as f64).exp())
}

/// Index values on the grid `lu = 0..=max_lu`, `ly = 0..=max_ly`.
#[derive(Debug, Clone, PartialEq)]
pub struct LipschitzSurface {
    /// `values[lu][ly]`; the `(0, 0)` cell is NaN.
    pub values: Vec<Vec<f64>>,
    pub p_fraction: f64,
}

impl LipschitzSurface {
    pub fn get(&self, lu: usize, ly: usize) -> f64 {
        self.values[lu][ly]
    }

    pub fn max_lu(&self) -> usize {
        self.values.len() - 1
    }

    pub fn max_ly(&self) -> usize {
        self.values[0].len() - 1
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut header = vec!["input_lag".to_string()];
        header.extend((0..=self.max_ly()).map(|l| format!("output_lag_{l}")));
        let rows: Vec<Vec<String>> = self
            .values
            .iter()
            .enumerate()
            .map(|(lu, row)| std::iter::once(lu.to_string()).chain(row.iter().map(|v| io::fmt_f64(*v))).collect())
            .collect();
        io::write_rows(path, &header, &rows)
    }
}

pub fn lipschitz_surface(data: &[IoSeries], max_lu: usize, max_ly: usize, opts: &LipschitzOptions) -> Result<LipschitzSurface> {
    if max_lu == 0 && max_ly == 0 {
        return invalid("surface needs at least one lag direction");
    }
    let (u, y) = scaled_series(data)?;
    let cells: Vec<(usize, usize)> = (0..=max_lu).flat_map(|a| (0..=max_ly).map(move |b| (a, b))).collect();
    let vals: Vec<Result<f64>> = cells
        .par_iter()
        .map(|&(a, b)| if a + b == 0 { Ok(f64::NAN) } else { lipschitz_index_scaled(&u, &y, a, b, opts) })
        .collect();
    let mut values = vec![vec![f64::NAN; max_ly + 1]; max_lu + 1];
    for ((a, b), v) in cells.into_iter().zip(vals) {
        values[a][b] = v?;
    }
    Ok(LipschitzSurface { values, p_fraction: opts.p_fraction })
}

/// Smallest lags beyond which the index stops dropping.
///
/// Candidates `(lu, ly)` with `ly >= 1` are visited by increasing `lu + ly`, then
/// `lu`. The first one for which every cell at or beyond it decreases by less than
/// `slope_threshold` (relative) when either lag grows by one is returned. Cells on
/// the last row or column of the grid cannot be checked and are never selected.
pub fn select_lags(surface: &LipschitzSurface, slope_threshold: f64) -> Result<NarxConfig> {
    if !(slope_threshold > 0.0) {
        return invalid(format!("slope threshold must be positive, got {slope_threshold}"));
    }
    let (nu, ny) = (surface.max_lu() + 1, surface.max_ly() + 1);
    let mut cands: Vec<(usize, usize)> =
        (0..nu.saturating_sub(1)).flat_map(|a| (1..ny.saturating_sub(1)).map(move |b| (a, b))).collect();
    cands.sort_by_key(|&(a, b)| (a + b, a));
    let flat_beyond = |a: usize, b: usize| {
        let s = &surface.values;
        for i in a..nu {
            for j in b..ny {
                let q = s[i][j];
                if i + 1 < nu && (q - s[i + 1][j]) / q >= slope_threshold {
                    return false;
                }
                if j + 1 < ny && (q - s[i][j + 1]) / q >= slope_threshold {
                    return false;
                }
            }
        }
        true
    };
    cands
        .into_iter()
        .find(|&(a, b)| flat_beyond(a, b))
        .map(|(a, b)| NarxConfig { input_lags: a, output_lags: b, include_current_input: false })
        .ok_or_else(|| Error::Domain("the index keeps decreasing inside the grid; use larger maximum lags".into()))
}

/// Input and target scalers of one NARX model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NarxScalers {
    pub inputs: Vec<Scaler>,
    pub output: Scaler,
}

impl NarxScalers {
    /// Fit on the samples of the training blocks of every trajectory.
    pub fn fit(trajectories: &[&Trajectory], target: Channel, blocks: &[Range<usize>], train: &[usize]) -> Result<Self> {
        if train.is_empty() || trajectories.is_empty() {
            return invalid("scalers need a non-empty training split");
        }
        let idx: Vec<usize> = train.iter().flat_map(|&b| blocks[b].clone()).collect();
        if idx.is_empty() {
            return invalid("training blocks hold no samples");
        }
        let inputs = (0..4)
            .map(|j| Scaler::fit(trajectories.iter().flat_map(|t| idx.iter().map(move |&k| t.inputs[k].to_array()[j]))))
            .collect::<Result<_>>()?;
        let series: Vec<Vec<f64>> = trajectories.iter().map(|t| t.series(target)).collect();
        let output = Scaler::fit(series.iter().flat_map(|s| idx.iter().map(move |&k| s[k])))?;
        Ok(Self { inputs, output })
    }

    /// One `(min, max)` pair per regressor column, in feature order.
    pub fn per_feature(&self, cfg: &NarxConfig) -> Vec<Scaler> {
        let mut out = Vec::with_capacity(cfg.feature_dim(self.inputs.len()));
        for _ in 0..cfg.input_taps() {
            out.extend_from_slice(&self.inputs);
        }
        out.extend(std::iter::repeat(self.output).take(cfg.output_lags));
        out
    }
}

/// Scaled regressor matrix (row-major) and targets.
#[derive(Debug, Clone, PartialEq)]
pub struct NarxDataset {
    pub n_features: usize,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// Block index of every row.
    pub blocks: Vec<usize>,
    /// Sample index of every row within its trajectory.
    pub sample_index: Vec<usize>,
    pub config: NarxConfig,
    pub scalers: NarxScalers,
}

impl NarxDataset {
    pub fn empty(config: NarxConfig, scalers: NarxScalers) -> Self {
        Self {
            n_features: config.feature_dim(scalers.inputs.len()),
            x: Vec::new(),
            y: Vec::new(),
            blocks: Vec::new(),
            sample_index: Vec::new(),
            config,
            scalers,
        }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.x[k * self.n_features..(k + 1) * self.n_features]
    }

    pub fn append(&mut self, other: &NarxDataset) {
        self.x.extend_from_slice(&other.x);
        self.y.extend_from_slice(&other.y);
        self.blocks.extend_from_slice(&other.blocks);
        self.sample_index.extend_from_slice(&other.sample_index);
    }

    /// Targets in physical units.
    pub fn unscaled_targets(&self) -> Vec<f64> {
        self.y.iter().map(|v| self.scalers.output.unscale(*v)).collect()
    }

    /// Write `X.csv`, `y.csv` and `scalers.toml` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let header: Vec<String> = (0..self.n_features).map(|j| format!("x{j}")).collect();
        let h: Vec<&str> = header.iter().map(String::as_str).collect();
        let rows: Vec<Vec<f64>> = (0..self.len()).map(|k| self.row(k).to_vec()).collect();
        io::write_matrix(&dir.join("X.csv"), &h, &rows)?;
        let yrows: Vec<Vec<f64>> =
            (0..self.len()).map(|k| vec![self.blocks[k] as f64, self.sample_index[k] as f64, self.y[k]]).collect();
        io::write_matrix(&dir.join("y.csv"), &["block", "sample", "y"], &yrows)?;
        let file = ScalerFile {
            config: self.config,
            output: self.scalers.output,
            inputs: self.scalers.inputs.clone(),
            features: self.scalers.per_feature(&self.config),
        };
        fs::write(dir.join("scalers.toml"), toml::to_string(&file).map_err(|e| Error::Parse(e.to_string()))?)?;
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let file: ScalerFile = toml::from_str(&fs::read_to_string(dir.join("scalers.toml"))?)
            .map_err(|e| Error::Parse(e.to_string()))?;
        let (_, xrows) = io::read_matrix(&dir.join("X.csv"))?;
        let (_, yrows) = io::read_matrix(&dir.join("y.csv"))?;
        let mut ds = NarxDataset::empty(file.config, NarxScalers { inputs: file.inputs, output: file.output });
        if xrows.len() != yrows.len() || xrows.iter().any(|r| r.len() != ds.n_features) {
            return Err(Error::Parse(format!("{}: inconsistent regressor files", dir.display())));
        }
        for (xr, yr) in xrows.into_iter().zip(yrows) {
            ds.x.extend(xr);
            ds.blocks.push(yr[0] as usize);
            ds.sample_index.push(yr[1] as usize);
            ds.y.push(yr[2]);
        }
        Ok(ds)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ScalerFile {
    config: NarxConfig,
    output: Scaler,
    inputs: Vec<Scaler>,
    features: Vec<Scaler>,
}

/// Scaled regressor row for sample `k` from raw input rows and output values.
pub fn regressor_row(
    inputs: &[[f64; 4]],
    outputs: &[f64],
    k: usize,
    cfg: &NarxConfig,
    scalers: &NarxScalers,
    out: &mut Vec<f64>,
) {
    let first = if cfg.include_current_input { 0 } else { 1 };
    for l in first..=cfg.input_lags {
        for (j, sc) in scalers.inputs.iter().enumerate() {
            out.push(sc.scale(inputs[k - l][j]));
        }
    }
    for l in 1..=cfg.output_lags {
        out.push(scalers.output.scale(outputs[k - l]));
    }
}

/// Regressor rows for the listed blocks of one trajectory.
///
/// Rows never reach back across a block boundary, so each block loses its
/// first `max_lag` samples.
pub fn build_regressors(
    traj: &Trajectory,
    target: Channel,
    cfg: &NarxConfig,
    scalers: &NarxScalers,
    blocks: &[Range<usize>],
    which: &[usize],
) -> Result<NarxDataset> {
    cfg.validate()?;
    let inputs: Vec<[f64; 4]> = traj.inputs.iter().map(|u| u.to_array()).collect();
    let y = traj.series(target);
    let mut ds = NarxDataset::empty(*cfg, scalers.clone());
    let m = cfg.max_lag();
    for &b in which {
        let r = blocks.get(b).ok_or_else(|| Error::InvalidArgument(format!("unknown block {b}")))?;
        if r.end > traj.len() {
            return invalid("block range exceeds the trajectory");
        }
        for k in r.start + m..r.end {
            regressor_row(&inputs, &y, k, cfg, scalers, &mut ds.x);
            ds.y.push(scalers.output.scale(y[k]));
            ds.blocks.push(b);
            ds.sample_index.push(k);
        }
    }
    Ok(ds)
}
