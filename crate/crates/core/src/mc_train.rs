//! Monte Carlo training: one network per propagated trajectory.

use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::{block_ranges, EnsembleDataset, Split};
use crate::error::{invalid, Error, Result};
use crate::io::{self, fmt_f64};
use crate::narx::{build_regressors, NarxConfig, NarxDataset, NarxScalers};
use crate::neural::{load_weights, metric_mae, metric_mse, save_weights, train, Mlp, MlpModel, MlpSpec, TrainConfig};
use crate::reactor::{Channel, Trajectory};
use crate::rng::{child_seed, stream};
use crate::stats;

/// Training, validation and test regressors of one trajectory.
#[derive(Debug, Clone)]
pub struct MemberData {
    pub train: NarxDataset,
    pub validation: NarxDataset,
    pub test: NarxDataset,
}

fn split_of(ensemble: &EnsembleDataset) -> Result<&Split> {
    ensemble.split.as_ref().ok_or_else(|| Error::InvalidArgument("ensemble has no train/validation/test split".into()))
}

/// Scalers fitted on the training blocks of every member.
pub fn fit_ensemble_scalers(ensemble: &EnsembleDataset, target: Channel) -> Result<NarxScalers> {
    let split = split_of(ensemble)?;
    let first = ensemble.members.first().ok_or_else(|| Error::InvalidArgument("empty ensemble".into()))?;
    let blocks = block_ranges(&first.trajectory.times, &ensemble.schedule);
    let trajs: Vec<&Trajectory> = ensemble.members.iter().map(|m| &m.trajectory).collect();
    NarxScalers::fit(&trajs, target, &blocks, &split.train)
}

pub fn member_data(
    ensemble: &EnsembleDataset,
    member: usize,
    target: Channel,
    narx: &NarxConfig,
    scalers: &NarxScalers,
) -> Result<MemberData> {
    let split = split_of(ensemble)?;
    let traj = &ensemble.members.get(member).ok_or_else(|| Error::InvalidArgument(format!("no member {member}")))?.trajectory;
    let blocks = block_ranges(&traj.times, &ensemble.schedule);
    Ok(MemberData {
        train: build_regressors(traj, target, narx, scalers, &blocks, &split.train)?,
        validation: build_regressors(traj, target, narx, scalers, &blocks, &split.validation)?,
        test: build_regressors(traj, target, narx, scalers, &blocks, &split.test)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemberMetrics {
    pub train_mse: f64,
    pub train_mae: f64,
    pub val_mse: f64,
    pub val_mae: f64,
    pub test_mse: f64,
    pub test_mae: f64,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemberModel {
    /// Parameter-matrix row of the trajectory this member was trained on.
    pub row: usize,
    pub model: MlpModel,
    pub metrics: MemberMetrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleModel {
    pub target: Channel,
    pub spec: MlpSpec,
    pub narx: NarxConfig,
    pub scalers: NarxScalers,
    pub members: Vec<MemberModel>,
    /// Rows whose training diverged, with the epoch.
    pub diverged: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McOptions {
    /// Train on the first `members` trajectories only; `None` trains all.
    pub members: Option<usize>,
    pub max_divergence_fraction: f64,
}

impl Default for McOptions {
    fn default() -> Self {
        Self { members: None, max_divergence_fraction: 0.05 }
    }
}

fn evaluate(model: &MlpModel, data: &NarxDataset) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let pred = model.mlp.forward(&data.x)?;
    Ok((metric_mse(&pred, &data.y)?, metric_mae(&pred, &data.y)?))
}

/// Train one member; its streams depend only on `(cfg.seed, row)`.
pub fn train_member(data: &MemberData, spec: &MlpSpec, cfg: &TrainConfig, row: usize) -> Result<MemberModel> {
    let mlp = Mlp::init(spec, &mut stream(cfg.seed, "mc-init", row as u64))?;
    let member_cfg = TrainConfig { seed: child_seed(cfg.seed, "mc-train", row as u64), ..*cfg };
    let model = train(mlp, &data.train, &data.validation, &member_cfg)?;
    let (train_mse, train_mae) = evaluate(&model, &data.train)?;
    let (val_mse, val_mae) = evaluate(&model, &data.validation)?;
    let (test_mse, test_mae) = evaluate(&model, &data.test)?;
    let metrics = MemberMetrics { train_mse, train_mae, val_mse, val_mae, test_mse, test_mae, epochs: model.epochs_trained };
    Ok(MemberModel { row, model, metrics })
}

pub fn mc_training(
    ensemble: &EnsembleDataset,
    spec: &MlpSpec,
    cfg: &TrainConfig,
    target: Channel,
    narx: &NarxConfig,
    options: &McOptions,
) -> Result<EnsembleModel> {
    cfg.validate()?;
    spec.validate()?;
    let scalers = fit_ensemble_scalers(ensemble, target)?;
    if spec.input_dim != narx.feature_dim(scalers.inputs.len()) {
        return invalid(format!("spec input width {} does not match {} NARX features", spec.input_dim, narx.feature_dim(4)));
    }
    let n = options.members.map_or(ensemble.members.len(), |k| k.min(ensemble.members.len()));
    if n == 0 {
        return invalid("no members selected for training");
    }
    let results: Vec<Result<MemberModel>> = (0..n)
        .into_par_iter()
        .map(|k| {
            let data = member_data(ensemble, k, target, narx, &scalers)?;
            train_member(&data, spec, cfg, ensemble.members[k].row)
        })
        .collect();
    let mut members = Vec::with_capacity(n);
    let mut diverged = Vec::new();
    for (k, r) in results.into_iter().enumerate() {
        match r {
            Ok(m) => members.push(m),
            Err(Error::Divergence { epoch }) => diverged.push((ensemble.members[k].row, epoch)),
            Err(e) => return Err(e),
        }
    }
    if diverged.len() as f64 > options.max_divergence_fraction * n as f64 || members.is_empty() {
        let rows: Vec<String> = diverged.iter().map(|(r, e)| format!("{r}@{e}")).collect();
        return Err(Error::TooManyFailures(format!("{} of {n} members diverged: {}", diverged.len(), rows.join(", "))));
    }
    Ok(EnsembleModel { target, spec: spec.clone(), narx: *narx, scalers, members, diverged })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub min: f64,
    pub max: f64,
    pub median: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(x: &[f64]) -> Self {
        Self { min: stats::min(x), max: stats::max(x), median: stats::median(x), std: stats::std_dev(x) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub members: usize,
    pub test_mae: Stat,
    pub val_mae: Stat,
    pub test_mse: Stat,
    pub val_mse: Stat,
    pub epochs: Stat,
}

pub fn summarize(ensemble: &EnsembleModel) -> Result<MetricSummary> {
    summarize_metrics(&ensemble.members.iter().map(|m| m.metrics).collect::<Vec<_>>())
}

pub fn summarize_metrics(metrics: &[MemberMetrics]) -> Result<MetricSummary> {
    if metrics.is_empty() {
        return invalid("summary needs at least one member");
    }
    let col = |f: fn(&MemberMetrics) -> f64| Stat::of(&metrics.iter().map(f).collect::<Vec<_>>());
    Ok(MetricSummary {
        members: metrics.len(),
        test_mae: col(|m| m.test_mae),
        val_mae: col(|m| m.val_mae),
        test_mse: col(|m| m.test_mse),
        val_mse: col(|m| m.val_mse),
        epochs: col(|m| m.epochs as f64),
    })
}

/// Equal-width histogram as `bin_lower,bin_upper,count`.
pub fn write_histogram_csv(path: &Path, values: &[f64], bins: usize) -> Result<()> {
    if values.is_empty() || bins == 0 {
        return invalid("histogram needs values and at least one bin");
    }
    let (lo, hi) = (stats::min(values), stats::max(values));
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for v in values {
        let b = (((v - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let header = ["bin_lower", "bin_upper", "count"].map(String::from).to_vec();
    let rows = counts
        .iter()
        .enumerate()
        .map(|(b, c)| vec![fmt_f64(lo + b as f64 * width), fmt_f64(lo + (b + 1) as f64 * width), c.to_string()])
        .collect::<Vec<_>>();
    io::write_rows(path, &header, &rows)
}

#[derive(Serialize, Deserialize)]
struct EnsembleFile {
    target: String,
    spec: MlpSpec,
    narx: NarxConfig,
    scalers: NarxScalers,
    rows: Vec<usize>,
    diverged_rows: Vec<usize>,
    diverged_epochs: Vec<usize>,
    summary: MetricSummary,
}

pub const METRICS_HEADER: [&str; 5] = ["member", "split", "mse", "mae", "epochs"];

impl EnsembleModel {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// `member_<row>.weights`, `metrics.csv`, `summary.toml` and histograms.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let summary = summarize(self)?;
        let file = EnsembleFile {
            target: self.target.name().into(),
            spec: self.spec.clone(),
            narx: self.narx,
            scalers: self.scalers.clone(),
            rows: self.members.iter().map(|m| m.row).collect(),
            diverged_rows: self.diverged.iter().map(|d| d.0).collect(),
            diverged_epochs: self.diverged.iter().map(|d| d.1).collect(),
            summary,
        };
        fs::write(dir.join("summary.toml"), toml::to_string(&file).map_err(|e| Error::Parse(e.to_string()))?)?;
        let mut rows = Vec::new();
        for m in &self.members {
            save_weights(&m.model, &dir.join(format!("member_{:05}.weights", m.row)))?;
            let x = &m.metrics;
            for (split, mse, mae) in
                [("train", x.train_mse, x.train_mae), ("validation", x.val_mse, x.val_mae), ("test", x.test_mse, x.test_mae)]
            {
                rows.push(vec![m.row.to_string(), split.into(), fmt_f64(mse), fmt_f64(mae), x.epochs.to_string()]);
            }
        }
        io::write_rows(&dir.join("metrics.csv"), &METRICS_HEADER.map(String::from), &rows)?;
        let col = |f: fn(&MemberMetrics) -> f64| self.members.iter().map(|m| f(&m.metrics)).collect::<Vec<_>>();
        write_histogram_csv(&dir.join("hist_epochs.csv"), &col(|m| m.epochs as f64), 10)?;
        write_histogram_csv(&dir.join("hist_test_mse.csv"), &col(|m| m.test_mse), 10)?;
        write_histogram_csv(&dir.join("hist_test_mae.csv"), &col(|m| m.test_mae), 10)?;
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("summary.toml"))?;
        let file: EnsembleFile = toml::from_str(&text).map_err(|e| Error::Parse(e.to_string()))?;
        let (_, rows) = io::read_rows(&dir.join("metrics.csv"))?;
        let mut members = Vec::with_capacity(file.rows.len());
        for row in &file.rows {
            let model = load_weights(&dir.join(format!("member_{row:05}.weights")))?;
            let get = |split: &str| -> Result<(f64, f64, usize)> {
                let r = rows
                    .iter()
                    .find(|r| r.len() == 5 && r[0] == row.to_string() && r[1] == split)
                    .ok_or_else(|| Error::Parse(format!("metrics.csv lacks {split} for member {row}")))?;
                let epochs = r[4].parse().map_err(|_| Error::Parse(format!("bad epoch count {:?}", r[4])))?;
                Ok((io::parse_f64(&r[2])?, io::parse_f64(&r[3])?, epochs))
            };
            let (train_mse, train_mae, epochs) = get("train")?;
            let (val_mse, val_mae, _) = get("validation")?;
            let (test_mse, test_mae, _) = get("test")?;
            let metrics = MemberMetrics { train_mse, train_mae, val_mse, val_mae, test_mse, test_mae, epochs };
            members.push(MemberModel { row: *row, model, metrics });
        }
        Ok(Self {
            target: file.target.parse()?,
            spec: file.spec,
            narx: file.narx,
            scalers: file.scalers,
            members,
            diverged: file.diverged_rows.into_iter().zip(file.diverged_epochs).collect(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizePoint {
    pub size: usize,
    pub mean_mse: f64,
    pub std_mse: f64,
    pub mean_mae: f64,
    pub std_mae: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSizeStudy {
    pub points: Vec<SizePoint>,
    /// Rank correlation of mean validation MSE against size.
    pub spearman: f64,
    pub available: usize,
}

/// Validation error against training-set size.
///
/// An experiment is one regressor row.  Rows are pooled over the training
/// blocks of every member; each repeat draws a fresh subset and scores it on
/// the validation rows of the first member.
pub fn data_size_study(
    ensemble: &EnsembleDataset,
    spec: &MlpSpec,
    cfg: &TrainConfig,
    target: Channel,
    narx: &NarxConfig,
    sizes: &[usize],
    repeats: usize,
    seed: u64,
) -> Result<DataSizeStudy> {
    if sizes.is_empty() || repeats == 0 {
        return invalid("data-size study needs sizes and at least one repeat");
    }
    let scalers = fit_ensemble_scalers(ensemble, target)?;
    let mut pool = NarxDataset::empty(*narx, scalers.clone());
    let mut validation = None;
    for k in 0..ensemble.members.len() {
        let d = member_data(ensemble, k, target, narx, &scalers)?;
        pool.append(&d.train);
        if k == 0 {
            validation = Some(d.validation);
        }
    }
    let validation = validation.ok_or_else(|| Error::InvalidArgument("empty ensemble".into()))?;
    if let Some(s) = sizes.iter().find(|s| **s > pool.len() || **s == 0) {
        return invalid(format!("size {s} outside 1..={} available experiments", pool.len()));
    }
    let jobs: Vec<(usize, usize)> = sizes.iter().enumerate().flat_map(|(i, _)| (0..repeats).map(move |r| (i, r))).collect();
    let scores: Vec<Result<(f64, f64)>> = jobs
        .par_iter()
        .map(|&(i, r)| {
            let size = sizes[i];
            let tag = (size * repeats + r) as u64;
            let idx = sample(&mut stream(seed, "datasize-subset", tag), pool.len(), size);
            let mut sub = NarxDataset::empty(*narx, scalers.clone());
            for k in idx.iter() {
                sub.x.extend_from_slice(pool.row(k));
                sub.y.push(pool.y[k]);
                sub.blocks.push(pool.blocks[k]);
                sub.sample_index.push(pool.sample_index[k]);
            }
            let mlp = Mlp::init(spec, &mut stream(seed, "datasize-init", tag))?;
            let run_cfg = TrainConfig { seed: child_seed(seed, "datasize-train", tag), ..*cfg };
            let model = train(mlp, &sub, &validation, &run_cfg)?;
            evaluate(&model, &validation)
        })
        .collect();
    let mut points = Vec::with_capacity(sizes.len());
    for (i, &size) in sizes.iter().enumerate() {
        let mut mse = Vec::new();
        let mut mae = Vec::new();
        for ((j, _), s) in jobs.iter().zip(&scores) {
            if *j == i {
                let (a, b) = s.clone()?;
                mse.push(a);
                mae.push(b);
            }
        }
        points.push(SizePoint {
            size,
            mean_mse: stats::mean(&mse),
            std_mse: stats::std_dev(&mse),
            mean_mae: stats::mean(&mae),
            std_mae: stats::std_dev(&mae),
        });
    }
    let s: Vec<f64> = points.iter().map(|p| p.size as f64).collect();
    let m: Vec<f64> = points.iter().map(|p| p.mean_mse).collect();
    let spearman = if points.len() > 1 { stats::spearman(&s, &m) } else { 0.0 };
    Ok(DataSizeStudy { points, spearman, available: pool.len() })
}

pub fn write_size_study_csv(path: &Path, study: &DataSizeStudy) -> Result<()> {
    let header = ["size", "mean_mse", "std_mse", "mean_mae", "std_mae"].map(String::from).to_vec();
    let rows = study
        .points
        .iter()
        .map(|p| vec![p.size.to_string(), fmt_f64(p.mean_mse), fmt_f64(p.std_mse), fmt_f64(p.mean_mae), fmt_f64(p.std_mae)])
        .collect::<Vec<_>>();
    io::write_rows(path, &header, &rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn metrics(mse: f64) -> MemberMetrics {
        MemberMetrics { train_mse: mse, train_mae: mse, val_mse: mse, val_mae: mse, test_mse: mse, test_mae: mse.sqrt(), epochs: 10 }
    }

    #[test]
    fn single_member_summary() {
        let s = summarize_metrics(&[metrics(0.5)]).unwrap();
        assert_eq!((s.test_mse.min, s.test_mse.max, s.test_mse.median, s.test_mse.std), (0.5, 0.5, 0.5, 0.0));
        assert!(summarize_metrics(&[]).is_err());
    }

    #[test]
    fn summary_of_three_members() {
        let s = summarize_metrics(&[metrics(3.0), metrics(1.0), metrics(2.0)]).unwrap();
        assert_eq!(s.val_mse.median, 2.0);
        assert_eq!(s.val_mse.min, 1.0);
        assert_eq!(s.val_mse.max, 3.0);
        assert!((s.val_mse.std - 1.0).abs() < 1e-12);
        assert!(s.test_mae.min <= s.test_mae.median && s.test_mae.median <= s.test_mae.max);
    }

    #[test]
    fn histogram_counts_everything() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.csv");
        let v: Vec<f64> = (0..101).map(|k| k as f64).collect();
        write_histogram_csv(&p, &v, 10).unwrap();
        let (_, rows) = io::read_matrix(&p).unwrap();
        assert_eq!(rows.iter().map(|r| r[2] as usize).sum::<usize>(), 101);
        assert_eq!(rows[9][1], 100.0);
        write_histogram_csv(&p, &[2.0; 4], 3).unwrap();
        assert!(write_histogram_csv(&p, &[], 3).is_err());
    }
}
