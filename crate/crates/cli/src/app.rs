//! Argument parsing and command dispatch.

use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::{Parser, Subcommand};
use log::{error, info};

use crate::config::{PipelineConfig, Scale};
use crate::manifest::{DependencyError, RunManifest};
use crate::stages::{Pipeline, Stage};

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_VALIDATION: u8 = 2;
pub const EXIT_DEPENDENCY: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "uasml", version, about = "Uncertainty-aware soft sensors for a polymerization reactor")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct RunArgs {
    /// Pipeline configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Derive every stage seed from this master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory; overrides `paths.out`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// `paper` switches to full-size sample counts.
    #[arg(long, value_enum)]
    pub scale: Option<Scale>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Steady state and a constant-input run at the nominal parameters.
    Simulate(RunArgs),
    /// LHS step schedule and the noisy calibration experiment.
    Excite(RunArgs),
    /// DRAM calibration, chain diagnostics and coverage regions.
    Mcmc(RunArgs),
    /// Monte Carlo propagation of posterior draws and the block split.
    Propagate(RunArgs),
    /// Lipschitz surfaces and NARX lag choice.
    Lipschitz(RunArgs),
    /// Hyperband architecture search or preset selection.
    Tune(RunArgs),
    /// One network per propagated trajectory.
    Mctrain(RunArgs),
    /// Validation error against training-set size.
    Datasize(RunArgs),
    /// Prediction bands and their overlap on the test split.
    Validate(RunArgs),
    /// Summary tables and plot-ready CSV files.
    Report(RunArgs),
    /// Every stage in order.
    Run(RunArgs),
    /// Recheck every digest recorded in the manifest.
    Audit(RunArgs),
    /// Print the default configuration.
    DefaultConfig,
}

/// Exit status for an error: 3 for dependency problems, 1 otherwise.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    if e.chain().any(|c| c.downcast_ref::<DependencyError>().is_some()) {
        EXIT_DEPENDENCY
    } else {
        EXIT_FAILURE
    }
}

/// Load the configuration and apply the command-line overrides.
pub fn resolve(args: &RunArgs) -> Result<(PipelineConfig, PathBuf)> {
    let mut cfg = PipelineConfig::load(&args.config)?;
    if let Some(scale) = args.scale {
        cfg.apply_scale(scale);
    }
    if let Some(seed) = args.seed {
        cfg.reseed(seed);
    }
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.paths.out));
    cfg.paths.out = out.to_string_lossy().into_owned();
    cfg.validate()?;
    Ok((cfg, out))
}

fn single(args: &RunArgs, stage: Stage) -> Result<u8> {
    let (cfg, out) = resolve(args)?;
    let mut p = Pipeline::open(cfg, &out, stage == Stage::Simulate)?;
    let outcome = p.run_stage(stage)?;
    Ok(match outcome.validation_passed {
        Some(false) => EXIT_VALIDATION,
        _ => EXIT_OK,
    })
}

pub fn execute(command: Command) -> Result<u8> {
    let (args, stage) = match command {
        Command::Simulate(a) => (a, Stage::Simulate),
        Command::Excite(a) => (a, Stage::Excite),
        Command::Mcmc(a) => (a, Stage::Mcmc),
        Command::Propagate(a) => (a, Stage::Propagate),
        Command::Lipschitz(a) => (a, Stage::Lipschitz),
        Command::Tune(a) => (a, Stage::Tune),
        Command::Mctrain(a) => (a, Stage::Mctrain),
        Command::Datasize(a) => (a, Stage::Datasize),
        Command::Validate(a) => (a, Stage::Validate),
        Command::Report(a) => (a, Stage::Report),
        Command::Run(a) => return run_all(&a),
        Command::Audit(a) => return audit(&a),
        Command::DefaultConfig => {
            print!("{}", PipelineConfig::default().to_toml()?);
            return Ok(EXIT_OK);
        }
    };
    single(&args, stage)
}

fn run_all(args: &RunArgs) -> Result<u8> {
    let (cfg, out) = resolve(args)?;
    let mut p = Pipeline::open(cfg, &out, true)?;
    let mut passed = true;
    for stage in Stage::ALL {
        let outcome = p.run_stage(stage)?;
        if outcome.validation_passed == Some(false) {
            passed = false;
        }
    }
    if passed {
        info!("pipeline finished; validation passed");
        Ok(EXIT_OK)
    } else {
        error!("pipeline finished; validation failed");
        Ok(EXIT_VALIDATION)
    }
}

fn audit(args: &RunArgs) -> Result<u8> {
    let (_, out) = resolve(args)?;
    let Some(m) = RunManifest::load(&out)? else {
        bail!(DependencyError(format!("no manifest in {}", out.display())));
    };
    let bad = m.audit(&out);
    if bad.is_empty() {
        let files: usize = m.stages.values().map(|s| s.outputs.len()).sum();
        println!("{} stages, {files} artifacts, all digests match", m.stages.len());
        Ok(EXIT_OK)
    } else {
        for b in &bad {
            println!("{b}");
        }
        Err(DependencyError(format!("{} artifacts do not match the manifest", bad.len())).into())
    }
}
