//! Pipeline configuration file.
//!
//! Every section has defaults, so an empty file is a valid configuration.
//! `PipelineConfig::default()` serialized with [`PipelineConfig::to_toml`]
//! lists the complete schema.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use uasml_core::bayes::{DramConfig, SpectralWindow, VarianceMode};
use uasml_core::mc_train::McOptions;
use uasml_core::narx::{LipschitzOptions, NarxConfig};
use uasml_core::neural::TrainConfig;
use uasml_core::reactor::N_PARAMS;
use uasml_core::rng::child_seed;
use uasml_core::tuner::{HyperbandConfig, SearchSpace};
use uasml_core::{Channel, ModelVariant, OdeOptions, ReactorInputs, ReactorParameters};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Desk,
    Paper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub version: u32,
    pub name: String,
    /// Output variables that get a soft sensor.
    pub targets: Vec<String>,
    pub reactor: ReactorSection,
    pub excitation: ExcitationSection,
    pub mcmc: McmcSection,
    pub ensemble: EnsembleSection,
    pub narx: NarxSection,
    pub tuner: TunerSection,
    pub training: TrainingSection,
    pub datasize: DataSizeSection,
    pub validation: ValidationSection,
    pub paths: PathsSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            name: "default".into(),
            targets: vec!["T".into(), "eta".into()],
            reactor: ReactorSection::default(),
            excitation: ExcitationSection::default(),
            mcmc: McmcSection::default(),
            ensemble: EnsembleSection::default(),
            narx: NarxSection::default(),
            tuner: TunerSection::default(),
            training: TrainingSection::default(),
            datasize: DataSizeSection::default(),
            validation: ValidationSection::default(),
            paths: PathsSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReactorSection {
    pub parameters: ReactorParameters,
    pub variant: ModelVariant,
    pub steady_inputs: ReactorInputs,
    pub ode: OdeOptions,
}

impl Default for ReactorSection {
    fn default() -> Self {
        Self {
            parameters: ReactorParameters::nominal(),
            variant: ModelVariant::as_printed(),
            steady_inputs: ReactorInputs::steady_default(),
            ode: OdeOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExcitationSection {
    pub steps: usize,
    /// Hold time of every step, h.
    pub hold: f64,
    /// Half width of the input box relative to the steady flows.
    pub fraction: f64,
    /// Output sampling period, h.
    pub sample_period: f64,
    /// LHS candidates screened for the smallest maximum correlation.
    pub lhs_candidates: usize,
    pub noise_fraction: f64,
    pub noise_channels: Vec<String>,
    /// Length of the steady run in `simulate`, h.
    pub steady_run: f64,
    pub seed: u64,
}

impl Default for ExcitationSection {
    fn default() -> Self {
        Self {
            steps: 30,
            hold: 150.0,
            fraction: 0.15,
            sample_period: 1.0,
            lhs_candidates: 5,
            noise_fraction: 0.1,
            noise_channels: vec!["T".into(), "eta".into()],
            steady_run: 200.0,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McmcSection {
    /// Output channels in the likelihood.
    pub channels: Vec<String>,
    /// Half width of the normalized parameter box.
    pub bounds_fraction: f64,
    pub dram: DramConfig,
    pub geweke_first: f64,
    pub geweke_last: f64,
    pub geweke_window: SpectralWindow,
    pub coverage_level: f64,
    /// Parameter index pairs that get a coverage region.
    pub coverage_pairs: Vec<[usize; 2]>,
    /// Leading schedule steps used as the calibration experiment; 0 uses all.
    pub experiment_steps: usize,
    /// Keep every `data_stride`-th measured sample.
    pub data_stride: usize,
    pub ode: OdeOptions,
}

impl Default for McmcSection {
    fn default() -> Self {
        Self {
            channels: vec!["T".into(), "eta".into()],
            bounds_fraction: 0.05,
            dram: DramConfig { seed: 2, ..DramConfig::default() },
            geweke_first: 0.1,
            geweke_last: 0.5,
            geweke_window: SpectralWindow::ZeroLag,
            coverage_level: 0.95,
            coverage_pairs: (0..9).map(|k| [2 * k, 2 * k + 1]).collect(),
            experiment_steps: 0,
            data_stride: 1,
            ode: OdeOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleSection {
    pub members: usize,
    pub split: [f64; 3],
    pub noise_fraction: f64,
    pub max_failure_fraction: f64,
    pub seed: u64,
}

impl Default for EnsembleSection {
    fn default() -> Self {
        Self { members: 200, split: [0.7, 0.15, 0.15], noise_fraction: 0.1, max_failure_fraction: 0.01, seed: 3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LagMode {
    /// Use `lags` as given.
    Fixed,
    /// Use the lags selected from the Lipschitz surface.
    Auto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NarxSection {
    pub mode: LagMode,
    pub lags: NarxConfig,
    pub max_input_lags: usize,
    pub max_output_lags: usize,
    pub slope_threshold: f64,
    /// Trajectories pooled for the Lipschitz surface.
    pub lipschitz_members: usize,
    pub lipschitz: LipschitzOptions,
}

impl Default for NarxSection {
    fn default() -> Self {
        Self {
            mode: LagMode::Fixed,
            lags: NarxConfig::default(),
            max_input_lags: 6,
            max_output_lags: 4,
            slope_threshold: 0.05,
            lipschitz_members: 3,
            lipschitz: LipschitzOptions { seed: 4, ..LipschitzOptions::default() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TunerSection {
    /// Per target: `search` or a preset name (`reference-t`, `reference-eta`).
    pub architecture: Vec<String>,
    pub space: SearchSpace,
    pub hyperband: HyperbandConfig,
    /// Ensemble member whose trajectory feeds the search.
    pub member: usize,
}

impl Default for TunerSection {
    fn default() -> Self {
        Self {
            architecture: vec!["search".into(), "search".into()],
            space: SearchSpace::default(),
            hyperband: HyperbandConfig { seed: 5, ..HyperbandConfig::default() },
            member: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub train: TrainConfig,
    pub monte_carlo: McOptions,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self { train: TrainConfig { seed: 6, ..TrainConfig::default() }, monte_carlo: McOptions::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSizeSection {
    pub sizes: Vec<usize>,
    pub repeats: usize,
    /// Epoch cap per study run; 0 uses the training settings unchanged.
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for DataSizeSection {
    fn default() -> Self {
        Self { sizes: vec![100, 200, 400, 800, 1600, 3000], repeats: 25, max_epochs: 0, seed: 7 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionMode {
    OneStep,
    FreeRun,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidationSection {
    pub level: f64,
    pub threshold: f64,
    pub prediction: PredictionMode,
    /// Widen the network band with the inverse-gamma error variance.
    pub epistemic: bool,
    pub variance_mode: VarianceMode,
    pub replicas: usize,
    pub seed: u64,
}

impl Default for ValidationSection {
    fn default() -> Self {
        Self {
            level: 0.95,
            threshold: 0.95,
            prediction: PredictionMode::FreeRun,
            epistemic: true,
            variance_mode: VarianceMode::Standard,
            replicas: 10,
            seed: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    /// Run directory, relative to the working directory.
    pub out: String,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self { out: "runs/default".into() }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            bail!("config version {} is not supported (expected {CONFIG_VERSION})", self.version);
        }
        self.target_channels()?;
        self.mcmc_channels()?;
        self.noise_channels()?;
        if self.tuner.architecture.len() != self.targets.len() {
            bail!("tuner.architecture needs one entry per target");
        }
        self.mcmc.dram.validate()?;
        self.training.train.validate()?;
        self.narx.lags.validate()?;
        if self.excitation.steps < 3 || !(self.excitation.hold > 0.0) || !(self.excitation.sample_period > 0.0) {
            bail!("excitation needs at least 3 steps and positive hold and sample period");
        }
        if self.mcmc.data_stride == 0 || self.mcmc.experiment_steps > self.excitation.steps {
            bail!("mcmc.data_stride must be positive and experiment_steps at most excitation.steps");
        }
        if self.mcmc.coverage_pairs.iter().flatten().any(|&i| i >= N_PARAMS) {
            bail!("coverage pair index out of range (parameters are 0..{N_PARAMS})");
        }
        if self.ensemble.members < 2 {
            bail!("the ensemble needs at least two members for prediction bands");
        }
        Ok(())
    }

    pub fn target_channels(&self) -> Result<Vec<Channel>> {
        parse_channels(&self.targets)
    }

    pub fn mcmc_channels(&self) -> Result<Vec<Channel>> {
        parse_channels(&self.mcmc.channels)
    }

    pub fn noise_channels(&self) -> Result<Vec<Channel>> {
        parse_channels(&self.excitation.noise_channels)
    }

    /// Replace every stage seed by one derived from `master`.
    pub fn reseed(&mut self, master: u64) {
        self.excitation.seed = child_seed(master, "excitation", 0);
        self.mcmc.dram.seed = child_seed(master, "mcmc", 0);
        self.ensemble.seed = child_seed(master, "ensemble", 0);
        self.narx.lipschitz.seed = child_seed(master, "lipschitz", 0);
        self.tuner.hyperband.seed = child_seed(master, "tuner", 0);
        self.training.train.seed = child_seed(master, "training", 0);
        self.datasize.seed = child_seed(master, "datasize", 0);
        self.validation.seed = child_seed(master, "validation", 0);
    }

    /// Full-size counts; everything else is kept.
    pub fn apply_scale(&mut self, scale: Scale) {
        if scale == Scale::Paper {
            self.mcmc.dram.n_samples = 30_000;
            self.mcmc.dram.burn_in = 5_000;
            self.ensemble.members = 10_000;
            self.datasize.sizes = (1..=31).map(|k| 100 * k).collect();
            self.datasize.repeats = 25;
            self.training.monte_carlo.members = None;
        }
    }
}

fn parse_channels(names: &[String]) -> Result<Vec<Channel>> {
    if names.is_empty() {
        bail!("channel list is empty");
    }
    names.iter().map(|n| n.parse::<Channel>().map_err(anyhow::Error::from)).collect()
}
