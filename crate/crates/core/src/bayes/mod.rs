//! Bayesian calibration: DRAM sampling, conjugate variance updates,
//! convergence diagnostics and coverage regions.

pub mod coverage;
pub mod diagnostics;
pub mod dram;
pub mod problem;
pub mod variance;

pub use coverage::{coverage_region, coverage_region_xy, CoverageRegion, RegionGeometry, RegionKind};
pub use diagnostics::{chain_stats, geweke, geweke_series, Geweke, ParamStats, SpectralWindow};
pub use dram::{run_dram, Chain, DramConfig, Evaluation, Stage, Target};
pub use problem::{symmetric_bounds, weighted_log_likelihood, InferenceProblem};
pub use variance::{sample_variance_posterior, InverseGamma, VarianceMode, VariancePrior, VarianceState};
