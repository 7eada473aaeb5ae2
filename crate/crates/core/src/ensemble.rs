//! Monte Carlo propagation of posterior parameter draws through the reactor.

use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bayes::Chain;
use crate::error::{invalid, Error, Result};
use crate::excitation::InputSchedule;
use crate::io;
use crate::ode::OdeOptions;
use crate::reactor::{
    self, ModelVariant, ReactorInputs, ReactorParameters, ReactorState, Trajectory, N_PARAMS, PARAM_NAMES,
};

/// `m` normalized parameter vectors, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterMatrix {
    pub rows: Vec<Vec<f64>>,
}

impl ParameterMatrix {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r[j]).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut header = vec!["row"];
        header.extend(PARAM_NAMES);
        let rows: Vec<Vec<f64>> = self
            .rows
            .iter()
            .enumerate()
            .map(|(k, r)| std::iter::once(k as f64).chain(r.iter().copied()).collect())
            .collect();
        io::write_matrix(path, &header, &rows)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let (header, rows) = io::read_matrix(path)?;
        if header.len() != N_PARAMS + 1 || header[0] != "row" {
            return Err(Error::Parse(format!("{}: unexpected parameter matrix header", path.display())));
        }
        Ok(Self { rows: rows.into_iter().map(|r| r[1..].to_vec()).collect() })
    }
}

/// Resample `m` post-burn-in draws uniformly with replacement.
pub fn draw_parameter_matrix<R: Rng + ?Sized>(chain: &Chain, m: usize, rng: &mut R) -> Result<ParameterMatrix> {
    let pool = chain.post_burn_in();
    if pool.is_empty() {
        return invalid("chain has no post-burn-in draws");
    }
    if m == 0 {
        return invalid("ensemble size must be positive");
    }
    Ok(ParameterMatrix { rows: (0..m).map(|_| pool[rng.gen_range(0..pool.len())].clone()).collect() })
}

/// Propagation settings shared by every ensemble member.
#[derive(Debug, Clone)]
pub struct PropagationSetup {
    pub nominal: ReactorParameters,
    pub variant: ModelVariant,
    pub schedule: InputSchedule,
    pub grid: Vec<f64>,
    pub ode: OdeOptions,
    /// Each member starts at its own steady state for these inputs.
    pub initial_inputs: ReactorInputs,
    pub initial_guess: ReactorState,
    /// Largest tolerated fraction of failed members.
    pub max_failure_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleMember {
    /// Row of the parameter matrix that produced this member.
    pub row: usize,
    pub theta: Vec<f64>,
    pub trajectory: Trajectory,
}

/// Block-level split over the schedule steps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn n_blocks(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleDataset {
    pub members: Vec<EnsembleMember>,
    /// Rows whose simulation failed, with the reason.
    pub failures: Vec<(usize, String)>,
    pub schedule: InputSchedule,
    pub split: Option<Split>,
    pub noise_seed: Option<u64>,
}

/// Simulate one trajectory per parameter row, in parallel, keeping row order.
pub fn propagate_ensemble(theta: &ParameterMatrix, setup: &PropagationSetup) -> Result<EnsembleDataset> {
    if theta.is_empty() {
        return invalid("empty parameter matrix");
    }
    let results: Vec<Result<Trajectory>> = theta
        .rows
        .par_iter()
        .map(|row| {
            let params = setup.nominal.denormalize(row)?;
            let x0 = reactor::find_steady_state(&params, &setup.initial_inputs, &setup.variant, &setup.initial_guess)?;
            reactor::integrate(&x0, &setup.schedule, &params, &setup.variant, &setup.grid, setup.ode)
        })
        .collect();
    let mut members = Vec::with_capacity(theta.len());
    let mut failures = Vec::new();
    for (row, res) in results.into_iter().enumerate() {
        match res {
            Ok(trajectory) => members.push(EnsembleMember { row, theta: theta.rows[row].clone(), trajectory }),
            Err(e) => failures.push((row, e.to_string())),
        }
    }
    let frac = failures.len() as f64 / theta.len() as f64;
    if frac > setup.max_failure_fraction {
        let first = failures.first().map(|(r, e)| format!("row {r}: {e}")).unwrap_or_default();
        return Err(Error::TooManyFailures(format!(
            "{} of {} members failed to integrate (first: {first})",
            failures.len(),
            theta.len()
        )));
    }
    if !failures.is_empty() {
        log::warn!("{} ensemble members failed and were excluded", failures.len());
    }
    Ok(EnsembleDataset { members, failures, schedule: setup.schedule.clone(), split: None, noise_seed: None })
}

/// Largest-remainder allocation of `n` blocks to fractions, at least one each.
pub fn split_counts(n: usize, fractions: [f64; 3]) -> Result<[usize; 3]> {
    if n < 3 {
        return invalid(format!("splitting needs at least 3 blocks, got {n}"));
    }
    if fractions.iter().any(|f| !(*f > 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return invalid(format!("split fractions must be positive and sum to 1, got {fractions:?}"));
    }
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts = [0usize; 3];
    for k in 0..3 {
        counts[k] = exact[k].floor() as usize;
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let mut left = n - counts.iter().sum::<usize>();
    for &k in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[k] += 1;
        left -= 1;
    }
    for k in 0..3 {
        while counts[k] == 0 {
            let donor = (0..3).max_by_key(|&j| counts[j]).expect("three splits");
            counts[donor] -= 1;
            counts[k] += 1;
        }
    }
    Ok(counts)
}

/// Randomly assign block indices `0..n_blocks` to train, validation and test.
pub fn split_blocks<R: Rng + ?Sized>(n_blocks: usize, fractions: [f64; 3], rng: &mut R) -> Result<Split> {
    let counts = split_counts(n_blocks, fractions)?;
    let mut idx: Vec<usize> = (0..n_blocks).collect();
    idx.shuffle(rng);
    let mut train = idx[..counts[0]].to_vec();
    let mut validation = idx[counts[0]..counts[0] + counts[1]].to_vec();
    let mut test = idx[counts[0] + counts[1]..].to_vec();
    train.sort_unstable();
    validation.sort_unstable();
    test.sort_unstable();
    Ok(Split { train, validation, test })
}

pub fn split_dataset<R: Rng + ?Sized>(
    mut ensemble: EnsembleDataset,
    fractions: [f64; 3],
    rng: &mut R,
) -> Result<EnsembleDataset> {
    ensemble.split = Some(split_blocks(ensemble.schedule.steps(), fractions, rng)?);
    Ok(ensemble)
}

/// Add measurement noise to the given channels of every member, each member on its own stream.
pub fn apply_noise(
    mut ensemble: EnsembleDataset,
    channels: &[crate::reactor::Channel],
    range_fraction: f64,
    seed: u64,
) -> Result<EnsembleDataset> {
    let noisy: Vec<Result<Trajectory>> = ensemble
        .members
        .par_iter()
        .map(|m| {
            let mut rng = crate::rng::stream(seed, "ensemble-noise", m.row as u64);
            crate::excitation::add_noise(&m.trajectory, channels, range_fraction, &mut rng)
        })
        .collect();
    for (m, t) in ensemble.members.iter_mut().zip(noisy) {
        m.trajectory = t?;
    }
    ensemble.noise_seed = Some(seed);
    Ok(ensemble)
}

/// Sample index range of every schedule block on `times`.
///
/// Block `k` holds the samples with `t` in `[start_k, end_k)`; the final
/// sample at the schedule end joins the last block.
pub fn block_ranges(times: &[f64], schedule: &InputSchedule) -> Vec<Range<usize>> {
    let mut ranges = vec![0..0; schedule.steps()];
    let mut k = 0;
    while k < times.len() {
        let b = schedule.segment_index(times[k]);
        let start = k;
        while k < times.len() && schedule.segment_index(times[k]) == b {
            k += 1;
        }
        ranges[b] = start..k;
    }
    ranges
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetManifest {
    members: usize,
    rows: Vec<usize>,
    failures: Vec<FailureRecord>,
    hold_duration: f64,
    split: Option<Split>,
    noise_seed: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct FailureRecord {
    row: usize,
    reason: String,
}

impl EnsembleDataset {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn parameter_matrix(&self) -> ParameterMatrix {
        ParameterMatrix { rows: self.members.iter().map(|m| m.theta.clone()).collect() }
    }

    /// Write `manifest.toml`, `theta.csv`, `schedule.csv` and `traj_<row>.csv`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let manifest = DatasetManifest {
            members: self.members.len(),
            rows: self.members.iter().map(|m| m.row).collect(),
            failures: self.failures.iter().map(|(row, reason)| FailureRecord { row: *row, reason: reason.clone() }).collect(),
            hold_duration: self.schedule.hold_duration,
            split: self.split.clone(),
            noise_seed: self.noise_seed,
        };
        let text = toml::to_string(&manifest).map_err(|e| Error::Parse(e.to_string()))?;
        fs::write(dir.join("manifest.toml"), text)?;
        self.parameter_matrix().write_csv(&dir.join("theta.csv"))?;
        self.schedule.write_csv(&dir.join("schedule.csv"))?;
        for m in &self.members {
            m.trajectory.write_csv(&dir.join(format!("traj_{:05}.csv", m.row)))?;
        }
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("manifest.toml"))?;
        let manifest: DatasetManifest = toml::from_str(&text).map_err(|e| Error::Parse(e.to_string()))?;
        let schedule = InputSchedule::read_csv(&dir.join("schedule.csv"), manifest.hold_duration)?;
        let theta = ParameterMatrix::read_csv(&dir.join("theta.csv"))?;
        if theta.len() != manifest.members || manifest.rows.len() != manifest.members {
            return Err(Error::Parse(format!("{}: member count mismatch", dir.display())));
        }
        let members = manifest
            .rows
            .iter()
            .zip(theta.rows)
            .map(|(&row, theta)| {
                let trajectory = Trajectory::read_csv(&dir.join(format!("traj_{row:05}.csv")))?;
                Ok(EnsembleMember { row, theta, trajectory })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            members,
            failures: manifest.failures.into_iter().map(|f| (f.row, f.reason)).collect(),
            schedule,
            split: manifest.split,
            noise_seed: manifest.noise_seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bayes::Stage;
    use crate::rng::stream;
    use crate::stats;

    fn chain_from(draws: Vec<Vec<f64>>) -> Chain {
        let n = draws.len();
        Chain {
            param_names: PARAM_NAMES.iter().map(|s| s.to_string()).collect(),
            channel_names: vec![],
            log_posteriors: vec![0.0; n],
            variance_draws: vec![vec![]; n],
            accepted: vec![true; n],
            stages: vec![Stage::First; n],
            burn_in: 0,
            draws,
        }
    }

    fn setup(steps: usize) -> PropagationSetup {
        let u = ReactorInputs::steady_default();
        let levels: Vec<ReactorInputs> = (0..steps).map(|k| ReactorInputs { qc: 440.0 + 20.0 * k as f64, ..u }).collect();
        let schedule = InputSchedule::new(levels, 10.0).unwrap();
        let grid = schedule.grid(1.0).unwrap();
        PropagationSetup {
            nominal: ReactorParameters::nominal(),
            variant: ModelVariant::physical(),
            schedule,
            grid,
            ode: OdeOptions::default(),
            initial_inputs: u,
            initial_guess: ReactorState { i: 0.067, m: 3.3, t: 323.0, tc: 305.0, d0: 2.7e-4, d1: 16.0, d2: 4600.0 },
            max_failure_fraction: 0.01,
        }
    }

    #[test]
    fn constant_chain_gives_its_row() {
        let chain = chain_from(vec![vec![1.0; N_PARAMS]; 5]);
        let m = draw_parameter_matrix(&chain, 1, &mut stream(1, "d", 0)).unwrap();
        assert_eq!(m.rows, vec![vec![1.0; N_PARAMS]]);
    }

    #[test]
    fn resampled_medians_track_the_chain() {
        let mut rng = stream(2, "c", 0);
        let draws: Vec<Vec<f64>> = (0..2000).map(|_| (0..N_PARAMS).map(|_| rng.gen_range(0.95..1.05)).collect()).collect();
        let chain = chain_from(draws);
        let m = draw_parameter_matrix(&chain, 10_000, &mut stream(2, "d", 0)).unwrap();
        for j in 0..N_PARAMS {
            let mu = stats::median(&chain.column(j));
            assert!((stats::median(&m.column(j)) / mu - 1.0).abs() < 0.02);
        }
    }

    #[test]
    fn identical_rows_give_identical_trajectories() {
        let theta = ParameterMatrix { rows: vec![vec![1.0; N_PARAMS]; 3] };
        let ens = propagate_ensemble(&theta, &setup(3)).unwrap();
        assert_eq!(ens.len(), 3);
        assert_eq!(ens.members[0].trajectory, ens.members[2].trajectory);
        assert_eq!(ens.members[1].row, 1);
    }

    #[test]
    fn rounding_of_split_counts() {
        assert_eq!(split_counts(100, [0.7, 0.15, 0.15]).unwrap(), [70, 15, 15]);
        assert_eq!(split_counts(20, [0.7, 0.15, 0.15]).unwrap(), [14, 3, 3]);
        assert_eq!(split_counts(30, [0.7, 0.15, 0.15]).unwrap(), [21, 5, 4]);
        assert_eq!(split_counts(3, [0.7, 0.15, 0.15]).unwrap(), [1, 1, 1]);
        assert!(split_counts(2, [0.7, 0.15, 0.15]).is_err());
    }

    #[test]
    fn split_is_a_partition() {
        let s = split_blocks(30, [0.7, 0.15, 0.15], &mut stream(3, "s", 0)).unwrap();
        let mut all: Vec<usize> = s.train.iter().chain(&s.validation).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..30).collect::<Vec<_>>());
    }

    #[test]
    fn blocks_cover_every_sample_once() {
        let st = setup(4);
        let r = block_ranges(&st.grid, &st.schedule);
        assert_eq!(r, vec![0..10, 10..20, 20..30, 30..41]);
    }

    #[test]
    fn dataset_directory_round_trip() {
        let theta = ParameterMatrix { rows: vec![vec![1.0; N_PARAMS], vec![1.01; N_PARAMS]] };
        let ens = propagate_ensemble(&theta, &setup(3)).unwrap();
        let ens = split_dataset(ens, [0.7, 0.15, 0.15], &mut stream(1, "split", 0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ens.write_dir(dir.path()).unwrap();
        assert_eq!(EnsembleDataset::read_dir(dir.path()).unwrap(), ens);
    }
}
