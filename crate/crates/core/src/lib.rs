//! Uncertainty-aware soft sensors for a polymerization reactor.
//!
//! The crate covers the whole chain: the first-principles reactor model,
//! excitation design, Bayesian calibration with DRAM, Monte Carlo propagation
//! of the posterior, NARX lag selection, neural-network ensembles with a
//! Hyperband tuner, and validation of the resulting prediction bands.

pub mod bayes;
pub mod ensemble;
pub mod error;
pub mod excitation;
pub mod io;
pub mod mc_train;
pub mod narx;
pub mod neural;
pub mod ode;
pub mod reactor;
pub mod rng;
pub mod stats;
pub mod tuner;
pub mod uq;

pub use error::{Error, Result};
pub use excitation::{InputSchedule, LhsDesign};
pub use ode::OdeOptions;
pub use reactor::{
    AlgebraicOutputs, Channel, ModelVariant, RateConstants, ReactorInputs, ReactorParameters, ReactorState, Trajectory,
};
