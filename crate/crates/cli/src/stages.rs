//! The pipeline stages. Each stage reads the artifacts of its upstream stages,
//! wipes and rewrites its own directory, and records digests in the manifest.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use log::{info, warn};
use serde::{Deserialize, Serialize};
use uasml_core::bayes::{
    chain_stats, coverage_region, geweke, run_dram, symmetric_bounds, Chain, InferenceProblem, RegionKind,
};
use uasml_core::ensemble::{apply_noise, block_ranges, draw_parameter_matrix, propagate_ensemble, split_dataset};
use uasml_core::ensemble::{EnsembleDataset, PropagationSetup};
use uasml_core::excitation::{
    add_noise, bounds_from_steady, correlation_matrix, lhs_sample_min_correlation, write_correlation_csv,
};
use uasml_core::io::{fmt_f64, sha256_hex, write_matrix, write_rows};
use uasml_core::mc_train::{
    data_size_study, fit_ensemble_scalers, mc_training, member_data, summarize, write_size_study_csv, EnsembleModel,
};
use uasml_core::narx::{lipschitz_surface, select_lags, IoSeries, NarxConfig};
use uasml_core::neural::{count_params, save_weights, MlpSpec, TrainConfig};
use uasml_core::reactor::{
    algebraic_outputs, find_steady_state, integrate, normalized_residual, INPUT_NAMES, N_PARAMS, PARAM_NAMES,
};
use uasml_core::rng::{child_seed, stream};
use uasml_core::tuner::{hyperband_search, preset, write_trials_csv};
use uasml_core::uq::{
    epistemic_variance, free_run_simulate, one_step_predict, overlap_validate, predictable_samples, prediction_band,
    PredictionBand, Widening,
};
use uasml_core::{Channel, InputSchedule, ReactorInputs, ReactorState, Trajectory};

use crate::config::{LagMode, PipelineConfig, PredictionMode};
use crate::manifest::{digest_tree, DependencyError, RunLock, RunManifest, StageRecord, Timings};
use crate::report;

pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Simulate,
    Excite,
    Mcmc,
    Propagate,
    Lipschitz,
    Tune,
    Mctrain,
    Datasize,
    Validate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 10] = [
        Stage::Simulate,
        Stage::Excite,
        Stage::Mcmc,
        Stage::Propagate,
        Stage::Lipschitz,
        Stage::Tune,
        Stage::Mctrain,
        Stage::Datasize,
        Stage::Validate,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Simulate => "simulate",
            Stage::Excite => "excite",
            Stage::Mcmc => "mcmc",
            Stage::Propagate => "propagate",
            Stage::Lipschitz => "lipschitz",
            Stage::Tune => "tune",
            Stage::Mctrain => "mctrain",
            Stage::Datasize => "datasize",
            Stage::Validate => "validate",
            Stage::Report => "report",
        }
    }

    /// Stages whose artifacts this stage reads.
    pub fn upstream(self) -> &'static [Stage] {
        use Stage::*;
        match self {
            Simulate => &[],
            Excite => &[Simulate],
            Mcmc => &[Simulate, Excite],
            Propagate => &[Simulate, Excite, Mcmc],
            Lipschitz => &[Propagate],
            Tune => &[Propagate, Lipschitz],
            Mctrain | Datasize => &[Propagate, Lipschitz, Tune],
            Validate => &[Propagate, Mctrain],
            Report => &[Simulate, Excite, Mcmc, Propagate, Lipschitz, Tune, Mctrain, Datasize, Validate],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// What a stage reports back besides its files.
#[derive(Debug, Clone, Default)]
pub struct StageOutcome {
    pub warnings: Vec<String>,
    /// Set by `validate`: whether every target passed the overlap test.
    pub validation_passed: Option<bool>,
}

/// An open run directory: resolved configuration, manifest and lock.
pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub run_dir: PathBuf,
    manifest: RunManifest,
    _lock: RunLock,
}

impl Pipeline {
    /// Lock `run_dir` and load its manifest.
    ///
    /// A manifest written under a different configuration is discarded when
    /// `restart` is set and is a dependency error otherwise.
    pub fn open(cfg: PipelineConfig, run_dir: &Path, restart: bool) -> Result<Self> {
        fs::create_dir_all(run_dir).with_context(|| format!("creating {}", run_dir.display()))?;
        let lock = RunLock::acquire(run_dir)?;
        let mut stored = cfg.clone();
        stored.paths.out = ".".into();
        let text = stored.to_toml()?;
        let sha = sha256_hex(text.as_bytes());
        let manifest = match RunManifest::load(run_dir)? {
            Some(m) if m.config_sha256 == sha => m,
            Some(_) if !restart => {
                return Err(DependencyError(format!(
                    "{} was produced with a different configuration; rerun from `simulate` or use `run`",
                    run_dir.display()
                ))
                .into())
            }
            _ => RunManifest::new(&sha),
        };
        fs::write(run_dir.join(CONFIG_FILE), text)?;
        manifest.save(run_dir)?;
        Ok(Self { cfg, run_dir: run_dir.to_path_buf(), manifest, _lock: lock })
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn run_stage(&mut self, stage: Stage) -> Result<StageOutcome> {
        let mut inputs = BTreeMap::new();
        for up in stage.upstream() {
            let rec = self.manifest.verify_stage(&self.run_dir, up.name())?;
            inputs.extend(rec.outputs.clone());
        }
        let dir = self.run_dir.join(stage.name());
        if dir.exists() {
            fs::remove_dir_all(&dir).with_context(|| format!("clearing {}", dir.display()))?;
        }
        fs::create_dir_all(&dir)?;
        info!("stage {stage}: start");
        let clock = Instant::now();
        let mut ctx = StageCtx { cfg: &self.cfg, run: &self.run_dir, dir: dir.clone(), outcome: StageOutcome::default() };
        let result = match stage {
            Stage::Simulate => ctx.simulate(),
            Stage::Excite => ctx.excite(),
            Stage::Mcmc => ctx.mcmc(),
            Stage::Propagate => ctx.propagate(),
            Stage::Lipschitz => ctx.lipschitz(),
            Stage::Tune => ctx.tune(),
            Stage::Mctrain => ctx.mctrain(),
            Stage::Datasize => ctx.datasize(),
            Stage::Validate => ctx.validate(),
            Stage::Report => report::write_report(ctx.cfg, ctx.run, &ctx.dir).map(|w| ctx.outcome.warnings.extend(w)),
        };
        result.with_context(|| format!("stage `{stage}` failed"))?;
        let outcome = ctx.outcome;
        for w in &outcome.warnings {
            warn!("{stage}: {w}");
        }
        let outputs = digest_tree(&self.run_dir, &dir)?;
        self.manifest
            .stages
            .insert(stage.name().into(), StageRecord { inputs, outputs, warnings: outcome.warnings.clone() });
        self.manifest.save(&self.run_dir)?;
        let secs = clock.elapsed().as_secs_f64();
        Timings::record(&self.run_dir, stage.name(), secs)?;
        info!("stage {stage}: done in {secs:.1} s");
        Ok(outcome)
    }
}

struct StageCtx<'a> {
    cfg: &'a PipelineConfig,
    run: &'a Path,
    dir: PathBuf,
    outcome: StageOutcome,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SteadyRecord {
    pub normalized_residual: f64,
    pub inputs: ReactorInputs,
    pub state: ReactorState,
    pub outputs: OutputRecord,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutputRecord {
    pub p: f64,
    pub qt: f64,
    pub mw: Option<f64>,
    pub pd: Option<f64>,
    pub eta: Option<f64>,
}

/// Lags chosen per target by the `lipschitz` stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LagRecord {
    pub selection_error: Option<String>,
    /// Lags used by every downstream stage.
    pub used: NarxConfig,
    pub selected: Option<NarxConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LagsFile {
    pub targets: BTreeMap<String, LagRecord>,
}

/// Architecture chosen per target by the `tune` stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TuneRecord {
    pub target: String,
    /// `search` or the preset name.
    pub source: String,
    pub parameters: usize,
    pub best_trial: Option<usize>,
    pub val_mse: Option<f64>,
    pub val_mae: Option<f64>,
    pub test_mse: Option<f64>,
    pub test_mae: Option<f64>,
    pub epochs_spent: usize,
    pub budget_bound: usize,
    pub spec: MlpSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OverlapRecord {
    pub samples: usize,
    pub overlapping: usize,
    pub fraction: f64,
    pub threshold: f64,
    pub pass: bool,
    pub prediction: String,
    pub epistemic: bool,
    pub mean_width_ai: f64,
    pub mean_width_physical: f64,
    /// Members whose free run was cut, counted once per test block.
    pub truncated_runs: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidationFile {
    pub pass: bool,
    pub targets: BTreeMap<String, OverlapRecord>,
}

pub fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, toml::to_string(value)?).with_context(|| format!("writing {}", path.display()))
}

fn region_kind_name(kind: RegionKind) -> &'static str {
    match kind {
        RegionKind::GaussianEllipse => "gaussian",
        RegionKind::PossoloHdr => "possolo",
    }
}

fn mean_width(band: &PredictionBand) -> f64 {
    let w: Vec<f64> = (0..band.len()).map(|j| band.width(j)).filter(|w| w.is_finite()).collect();
    w.iter().sum::<f64>() / w.len().max(1) as f64
}

impl StageCtx<'_> {
    fn upstream(&self, rel: &str) -> PathBuf {
        self.run.join(rel)
    }

    fn warn(&mut self, msg: String) {
        self.outcome.warnings.push(msg);
    }

    fn steady(&self) -> Result<SteadyRecord> {
        read_toml(&self.upstream("simulate/steady_state.toml"))
    }

    fn schedule(&self) -> Result<InputSchedule> {
        Ok(InputSchedule::read_csv(&self.upstream("excite/schedule.csv"), self.cfg.excitation.hold)?)
    }

    fn ensemble(&self) -> Result<EnsembleDataset> {
        Ok(EnsembleDataset::read_dir(&self.upstream("propagate"))?)
    }

    fn lags(&self, target: Channel) -> Result<NarxConfig> {
        let file: LagsFile = read_toml(&self.upstream("lipschitz/lags.toml"))?;
        file.targets.get(target.name()).map(|r| r.used).ok_or_else(|| anyhow!("no lags recorded for {target}"))
    }

    fn tuned(&self, target: Channel) -> Result<TuneRecord> {
        read_toml(&self.upstream(&format!("tune/best_{target}.toml")))
    }

    fn simulate(&mut self) -> Result<()> {
        let r = &self.cfg.reactor;
        let x = find_steady_state(&r.parameters, &r.steady_inputs, &r.variant, &ReactorState::nominal_guess())?;
        let out = algebraic_outputs(&x, &r.steady_inputs, &r.parameters, &r.variant)?;
        let record = SteadyRecord {
            normalized_residual: normalized_residual(&x, &r.steady_inputs, &r.parameters, &r.variant),
            inputs: r.steady_inputs,
            state: x,
            outputs: OutputRecord { p: out.p, qt: out.qt, mw: out.mw, pd: out.pd, eta: out.eta },
        };
        write_toml(&self.dir.join("steady_state.toml"), &record)?;
        let schedule = InputSchedule::constant(r.steady_inputs, self.cfg.excitation.steady_run);
        let grid = schedule.grid(self.cfg.excitation.sample_period)?;
        let traj = integrate(&x, &schedule, &r.parameters, &r.variant, &grid, r.ode)?;
        traj.write_csv(&self.dir.join("steady_run.csv"))?;
        let t = traj.series(Channel::T);
        let drift = t.iter().map(|v| (v - t[0]).abs() / t[0]).fold(0.0, f64::max);
        if drift > 1e-6 {
            self.warn(format!("temperature drifts by {drift:e} (relative) during the steady run"));
        }
        info!("steady state T = {:.3} K, Tc = {:.3} K, eta = {:?}", x.t, x.tc, out.eta);
        Ok(())
    }

    fn excite(&mut self) -> Result<()> {
        let e = &self.cfg.excitation;
        let r = &self.cfg.reactor;
        let steady = self.steady()?;
        let bounds = bounds_from_steady(&r.steady_inputs, e.fraction)?;
        let design = lhs_sample_min_correlation(e.steps, &bounds, e.lhs_candidates, &mut stream(e.seed, "lhs", 0))?;
        let schedule = InputSchedule::from_design(&design, e.hold)?;
        schedule.write_csv(&self.dir.join("schedule.csv"))?;
        let corr = correlation_matrix(&design)?;
        write_correlation_csv(&self.dir.join("correlation.csv"), &corr, &INPUT_NAMES)?;
        let worst = corr
            .iter()
            .enumerate()
            .flat_map(|(i, row)| row[..i].iter().map(|v| v.abs()).collect::<Vec<_>>())
            .fold(0.0, f64::max);
        if worst > 0.5 {
            self.warn(format!("largest input correlation is {worst:.3}"));
        }
        let grid = schedule.grid(e.sample_period)?;
        let clean = integrate(&steady.state, &schedule, &r.parameters, &r.variant, &grid, r.ode)?;
        clean.write_csv(&self.dir.join("experiment_clean.csv"))?;
        let noisy = if e.noise_fraction > 0.0 {
            add_noise(&clean, &self.cfg.noise_channels()?, e.noise_fraction, &mut stream(e.seed, "calibration-noise", 0))?
        } else {
            clean
        };
        noisy.write_csv(&self.dir.join("experiment.csv"))?;
        Ok(())
    }

    fn mcmc(&mut self) -> Result<()> {
        let m = &self.cfg.mcmc;
        let r = &self.cfg.reactor;
        let steady = self.steady()?;
        let schedule = self.schedule()?;
        let experiment = Trajectory::read_csv(&self.upstream("excite/experiment.csv"))?;
        let steps = if m.experiment_steps == 0 { schedule.steps() } else { m.experiment_steps };
        let sub = InputSchedule::new(schedule.levels[..steps].to_vec(), schedule.hold_duration)?;
        let end = sub.end() + 1e-9 * sub.end().abs().max(1.0);
        let idx: Vec<usize> = (0..experiment.len()).step_by(m.data_stride).filter(|&k| experiment.times[k] <= end).collect();
        let channels = self.cfg.mcmc_channels()?;
        let problem = InferenceProblem {
            nominal: r.parameters,
            variant: r.variant,
            schedule: sub,
            grid: idx.iter().map(|&k| experiment.times[k]).collect(),
            initial_inputs: r.steady_inputs,
            initial_guess: steady.state,
            data: channels
                .iter()
                .map(|c| {
                    let s = experiment.series(*c);
                    idx.iter().map(|&k| s[k]).collect()
                })
                .collect(),
            channels,
            bounds: symmetric_bounds(m.bounds_fraction)?,
            ode: m.ode,
        };
        problem.validate()?;
        info!("calibrating against {} samples over {} steps", problem.grid.len(), steps);
        let names: Vec<String> = PARAM_NAMES.iter().map(|s| s.to_string()).collect();
        let chain = run_dram(&problem, &problem.bounds, &[1.0; N_PARAMS], &names, &problem.channel_names(), &m.dram)?;
        chain.write_csv(&self.dir.join("chain.csv"))?;

        let stats = chain_stats(&chain)?;
        let gw = geweke(&chain, m.geweke_first, m.geweke_last, m.geweke_window)?;
        let header = ["parameter", "mean", "median", "std", "geweke_z", "geweke_p"].map(String::from).to_vec();
        let rows: Vec<Vec<String>> = names
            .iter()
            .zip(stats.iter().zip(&gw))
            .map(|(n, (s, g))| {
                vec![n.clone(), fmt_f64(s.mean), fmt_f64(s.median), fmt_f64(s.std), fmt_f64(g.z), fmt_f64(g.p)]
            })
            .collect();
        write_rows(&self.dir.join("parameters.csv"), &header, &rows)?;
        for (n, g) in names.iter().zip(&gw) {
            if g.p < 0.05 {
                self.warn(format!("Geweke p = {:.3} for {n}", g.p));
            }
        }
        let (lo, hi) = (1.0 - m.bounds_fraction, 1.0 + m.bounds_fraction);
        if chain.draws.iter().flatten().any(|v| *v < lo || *v > hi) {
            self.warn("draws outside the parameter box".into());
        }
        #[derive(Serialize)]
        struct Summary {
            draws: usize,
            burn_in: usize,
            acceptance_rate: f64,
            delayed_acceptances: usize,
            calibration_samples: usize,
            calibration_steps: usize,
        }
        write_toml(
            &self.dir.join("summary.toml"),
            &Summary {
                draws: chain.len(),
                burn_in: chain.burn_in,
                acceptance_rate: chain.acceptance_rate(),
                delayed_acceptances: chain.delayed_acceptances(),
                calibration_samples: problem.grid.len(),
                calibration_steps: steps,
            },
        )?;
        for &[i, j] in &m.coverage_pairs {
            for kind in [RegionKind::GaussianEllipse, RegionKind::PossoloHdr] {
                let path = self.dir.join(format!("region_{}_{}_{}.csv", region_kind_name(kind), names[i], names[j]));
                match coverage_region(&chain, i, j, m.coverage_level, kind) {
                    Ok(region) => region.write_csv(&path, &names[i], &names[j])?,
                    Err(e) => self.warn(format!("no {kind:?} region for ({}, {}): {e}", names[i], names[j])),
                }
            }
        }
        info!("acceptance rate {:.3}", chain.acceptance_rate());
        Ok(())
    }

    fn propagate(&mut self) -> Result<()> {
        let c = &self.cfg.ensemble;
        let r = &self.cfg.reactor;
        let chain = Chain::read_csv(&self.upstream("mcmc/chain.csv"), self.cfg.mcmc.dram.burn_in)?;
        let schedule = self.schedule()?;
        let steady = self.steady()?;
        let theta = draw_parameter_matrix(&chain, c.members, &mut stream(c.seed, "parameter-draws", 0))?;
        let setup = PropagationSetup {
            nominal: r.parameters,
            variant: r.variant,
            grid: schedule.grid(self.cfg.excitation.sample_period)?,
            schedule,
            ode: r.ode,
            initial_inputs: r.steady_inputs,
            initial_guess: steady.state,
            max_failure_fraction: c.max_failure_fraction,
        };
        let ens = propagate_ensemble(&theta, &setup)?;
        for (row, reason) in &ens.failures {
            self.outcome.warnings.push(format!("member {row} failed: {reason}"));
        }
        let mut ens = split_dataset(ens, c.split, &mut stream(c.seed, "split", 0))?;
        if c.noise_fraction > 0.0 {
            ens = apply_noise(ens, &self.cfg.noise_channels()?, c.noise_fraction, child_seed(c.seed, "noise", 0))?;
        }
        ens.write_dir(&self.dir)?;
        info!("{} trajectories, {} failures", ens.len(), ens.failures.len());
        Ok(())
    }

    fn lipschitz(&mut self) -> Result<()> {
        let n = &self.cfg.narx;
        let ens = self.ensemble()?;
        let mut file = LagsFile { targets: BTreeMap::new() };
        for target in self.cfg.target_channels()? {
            let data: Vec<IoSeries> = ens
                .members
                .iter()
                .take(n.lipschitz_members.max(1))
                .map(|m| IoSeries::from_trajectory(&m.trajectory, target))
                .collect();
            let surface = lipschitz_surface(&data, n.max_input_lags, n.max_output_lags, &n.lipschitz)?;
            surface.write_csv(&self.dir.join(format!("surface_{target}.csv")))?;
            let selected = select_lags(&surface, n.slope_threshold);
            let used = match (n.mode, &selected) {
                (LagMode::Fixed, _) => n.lags,
                (LagMode::Auto, Ok(s)) => *s,
                (LagMode::Auto, Err(e)) => bail!("automatic lag selection failed for {target}: {e}"),
            };
            if let Ok(s) = &selected {
                if (s.input_lags, s.output_lags) != (used.input_lags, used.output_lags) {
                    self.warn(format!(
                        "{target}: index selects lags ({}, {}) but ({}, {}) are used",
                        s.input_lags, s.output_lags, used.input_lags, used.output_lags
                    ));
                }
            }
            info!("{target}: selected {:?}, using ({}, {})", selected.as_ref().ok(), used.input_lags, used.output_lags);
            file.targets.insert(
                target.name().into(),
                LagRecord { selection_error: selected.as_ref().err().map(|e| e.to_string()), used, selected: selected.ok() },
            );
        }
        write_toml(&self.dir.join("lags.toml"), &file)
    }

    fn tune(&mut self) -> Result<()> {
        let t = &self.cfg.tuner;
        let ens = self.ensemble()?;
        for (target, arch) in self.cfg.target_channels()?.into_iter().zip(&t.architecture) {
            let narx = self.lags(target)?;
            let input_dim = narx.feature_dim(INPUT_NAMES.len());
            let record = if arch == "search" {
                let scalers = fit_ensemble_scalers(&ens, target)?;
                let data = member_data(&ens, t.member, target, &narx, &scalers)?;
                let hb = uasml_core::tuner::HyperbandConfig { seed: child_seed(t.hyperband.seed, target.name(), 0), ..t.hyperband };
                let mut res = hyperband_search(&t.space, &data.train, &data.validation, Some(&data.test), &hb)?;
                write_trials_csv(&self.dir.join(format!("trials_{target}.csv")), &res.trials)?;
                res.model.narx = Some(narx);
                res.model.scalers = Some(scalers);
                save_weights(&res.model, &self.dir.join(format!("best_{target}.weights")))?;
                info!(
                    "{target}: best {:?} {:?} lr {} (val MSE {:.3e})",
                    res.best.hidden, res.best.activations[0], res.best.learning_rate, res.best_val_mse
                );
                TuneRecord {
                    target: target.name().into(),
                    source: "search".into(),
                    parameters: count_params(&res.best),
                    best_trial: Some(res.best_trial),
                    val_mse: Some(res.best_val_mse),
                    val_mae: Some(res.best_val_mae),
                    test_mse: res.test_mse,
                    test_mae: res.test_mae,
                    epochs_spent: res.epochs_spent,
                    budget_bound: res.budget_bound,
                    spec: res.best,
                }
            } else {
                let spec = preset(arch, input_dim).ok_or_else(|| anyhow!("unknown architecture preset {arch:?}"))?;
                TuneRecord {
                    target: target.name().into(),
                    source: arch.clone(),
                    parameters: count_params(&spec),
                    best_trial: None,
                    val_mse: None,
                    val_mae: None,
                    test_mse: None,
                    test_mae: None,
                    epochs_spent: 0,
                    budget_bound: 0,
                    spec,
                }
            };
            write_toml(&self.dir.join(format!("best_{target}.toml")), &record)?;
        }
        Ok(())
    }

    fn mctrain(&mut self) -> Result<()> {
        let ens = self.ensemble()?;
        for (k, target) in self.cfg.target_channels()?.into_iter().enumerate() {
            let narx = self.lags(target)?;
            let spec = self.tuned(target)?.spec;
            let cfg = TrainConfig { seed: child_seed(self.cfg.training.train.seed, target.name(), k as u64), ..self.cfg.training.train };
            let model = mc_training(&ens, &spec, &cfg, target, &narx, &self.cfg.training.monte_carlo)?;
            for (row, epoch) in &model.diverged {
                self.outcome.warnings.push(format!("{target}: member {row} diverged at epoch {epoch}"));
            }
            let s = summarize(&model)?;
            info!(
                "{target}: {} members, median test MSE {:.3e}, median test MAE {:.3e}, epochs {}..{}",
                s.members, s.test_mse.median, s.test_mae.median, s.epochs.min, s.epochs.max
            );
            model.write_dir(&self.dir.join(target.name()))?;
        }
        Ok(())
    }

    fn datasize(&mut self) -> Result<()> {
        let d = &self.cfg.datasize;
        let ens = self.ensemble()?;
        let mut cfg = self.cfg.training.train;
        if d.max_epochs > 0 {
            cfg.max_epochs = d.max_epochs;
            cfg.patience = cfg.patience.min(d.max_epochs.saturating_sub(1)).max(1);
        }
        #[derive(Serialize)]
        struct Entry {
            spearman: f64,
            available: usize,
            repeats: usize,
        }
        let mut summary = BTreeMap::new();
        for target in self.cfg.target_channels()? {
            let narx = self.lags(target)?;
            let spec = self.tuned(target)?.spec;
            let seed = child_seed(d.seed, target.name(), 0);
            let study = data_size_study(&ens, &spec, &cfg, target, &narx, &d.sizes, d.repeats, seed)?;
            write_size_study_csv(&self.dir.join(format!("{target}.csv")), &study)?;
            if study.spearman > 0.0 {
                self.warn(format!("{target}: validation MSE grows with training size (Spearman {:.3})", study.spearman));
            }
            info!("{target}: Spearman {:.3} over {} sizes", study.spearman, study.points.len());
            summary.insert(
                target.name().to_string(),
                Entry { spearman: study.spearman, available: study.available, repeats: d.repeats },
            );
        }
        write_toml(&self.dir.join("summary.toml"), &summary)
    }

    fn validate(&mut self) -> Result<()> {
        let v = &self.cfg.validation;
        let ens = self.ensemble()?;
        let split = ens.split.clone().ok_or_else(|| anyhow!("ensemble has no split"))?;
        let first = ens.members.first().ok_or_else(|| anyhow!("empty ensemble"))?;
        let blocks = block_ranges(&first.trajectory.times, &ens.schedule);
        let test: Vec<_> = split.test.iter().map(|&b| blocks[b].clone()).collect();
        let mut file = ValidationFile { pass: true, targets: BTreeMap::new() };
        for (k, target) in self.cfg.target_channels()?.into_iter().enumerate() {
            let model = EnsembleModel::read_dir(&self.upstream(&format!("mctrain/{target}")))?;
            let lag = model.narx.max_lag();
            let samples = predictable_samples(&test, lag);
            let times: Vec<f64> = samples.iter().map(|&j| first.trajectory.times[j]).collect();
            let physical: Vec<Vec<f64>> = ens
                .members
                .iter()
                .map(|m| {
                    let s = m.trajectory.series(target);
                    samples.iter().map(|&j| s[j]).collect()
                })
                .collect();
            let mut truncated_runs = 0;
            let mut ai = Vec::with_capacity(model.len());
            for member in &model.members {
                let traj = &ens
                    .members
                    .iter()
                    .find(|m| m.row == member.row)
                    .ok_or_else(|| anyhow!("no trajectory for member {}", member.row))?
                    .trajectory;
                let single = EnsembleModel { members: vec![member.clone()], diverged: Vec::new(), ..model.clone_header() };
                let values = match v.prediction {
                    PredictionMode::OneStep => one_step_predict(&single, traj, &test)?.values.remove(0),
                    PredictionMode::FreeRun => {
                        let inputs = traj.input_rows();
                        let y = traj.series(target);
                        let mut out = Vec::with_capacity(samples.len());
                        for r in &test {
                            let start = (r.start + lag).min(r.end);
                            if start == r.end {
                                continue;
                            }
                            let initial = &y[start - model.narx.output_lags..start];
                            match free_run_simulate(&single, &inputs[..r.end], initial, start) {
                                Ok(run) => {
                                    if run.truncated[0].is_some() {
                                        truncated_runs += 1;
                                    }
                                    out.extend_from_slice(&run.outputs[0]);
                                }
                                Err(_) => {
                                    truncated_runs += 1;
                                    out.extend(std::iter::repeat(f64::NAN).take(r.end - start));
                                }
                            }
                        }
                        out
                    }
                };
                ai.push(values);
            }
            let widening = if v.epistemic {
                let factor = model.scalers.output.variance_factor();
                let variances = model
                    .members
                    .iter()
                    .map(|m| epistemic_variance(m.metrics.test_mse * samples.len() as f64 * factor, samples.len(), v.variance_mode))
                    .collect::<uasml_core::Result<Vec<_>>>()?;
                Some(Widening { variances, replicas: v.replicas, seed: child_seed(v.seed, "widening", k as u64) })
            } else {
                None
            };
            let band_ai = prediction_band(&times, &ai, v.level, widening.as_ref())?;
            let band_phys = prediction_band(&times, &physical, v.level, None)?;
            band_ai.write_csv(&self.dir.join(format!("band_ai_{target}.csv")))?;
            band_phys.write_csv(&self.dir.join(format!("band_physical_{target}.csv")))?;
            let report = overlap_validate(&band_ai, &band_phys, v.threshold)?;
            info!(
                "{target}: overlap {}/{} = {:.4} (threshold {}) -> {}",
                report.overlapping,
                report.samples,
                report.fraction,
                report.threshold,
                if report.pass { "pass" } else { "fail" }
            );
            if truncated_runs > 0 {
                self.warn(format!("{target}: {truncated_runs} free runs were truncated"));
            }
            file.pass &= report.pass;
            file.targets.insert(
                target.name().into(),
                OverlapRecord {
                    samples: report.samples,
                    overlapping: report.overlapping,
                    fraction: report.fraction,
                    threshold: report.threshold,
                    pass: report.pass,
                    prediction: match v.prediction {
                        PredictionMode::OneStep => "one_step".into(),
                        PredictionMode::FreeRun => "free_run".into(),
                    },
                    epistemic: v.epistemic,
                    mean_width_ai: mean_width(&band_ai),
                    mean_width_physical: mean_width(&band_phys),
                    truncated_runs,
                },
            );
        }
        write_toml(&self.dir.join("overlap.toml"), &file)?;
        self.outcome.validation_passed = Some(file.pass);
        Ok(())
    }
}

trait CloneHeader {
    fn clone_header(&self) -> Self;
}

impl CloneHeader for EnsembleModel {
    /// Everything except the members.
    fn clone_header(&self) -> Self {
        EnsembleModel {
            target: self.target,
            spec: self.spec.clone(),
            narx: self.narx,
            scalers: self.scalers.clone(),
            members: Vec::new(),
            diverged: Vec::new(),
        }
    }
}

/// Write a matrix CSV, creating the parent directory.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p)?;
    }
    Ok(write_matrix(path, header, rows)?)
}
