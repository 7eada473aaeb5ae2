//! Calibration of the reactor parameters against measured trajectories.

use super::dram::{Evaluation, Target};
use super::variance::VarianceState;
use crate::error::{invalid, Result};
use crate::excitation::InputSchedule;
use crate::ode::OdeOptions;
use crate::reactor::{self, Channel, ModelVariant, ReactorInputs, ReactorParameters, ReactorState, N_PARAMS};

/// Forward model, data and prior box for one calibration experiment.
///
/// Parameters are handled in nominal-relative units: `eta = theta / theta_nominal`.
/// Each evaluation starts the experiment from the steady state of the candidate
/// parameters at `initial_inputs`.
#[derive(Debug, Clone)]
pub struct InferenceProblem {
    pub nominal: ReactorParameters,
    pub variant: ModelVariant,
    pub schedule: InputSchedule,
    pub grid: Vec<f64>,
    pub initial_inputs: ReactorInputs,
    pub initial_guess: ReactorState,
    pub channels: Vec<Channel>,
    /// `data[c][k]`: observation of `channels[c]` at `grid[k]`.
    pub data: Vec<Vec<f64>>,
    pub bounds: Vec<(f64, f64)>,
    pub ode: OdeOptions,
}

impl InferenceProblem {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.len() != self.data.len() {
            return invalid("each output channel needs one data series");
        }
        if self.data.iter().any(|d| d.len() != self.grid.len()) {
            return invalid("data series must match the experiment grid");
        }
        if self.bounds.len() != N_PARAMS || self.bounds.iter().any(|(lo, hi)| !(lo < hi)) {
            return invalid("bounds must give lo < hi for every parameter");
        }
        Ok(())
    }

    pub fn channel_names(&self) -> Vec<String> {
        self.channels.iter().map(|c| c.name().to_string()).collect()
    }

    /// Model outputs for normalized parameters `eta`, one series per channel.
    pub fn predict(&self, eta: &[f64]) -> Result<Vec<Vec<f64>>> {
        let params = self.nominal.denormalize(eta)?;
        let x0 = reactor::find_steady_state(&params, &self.initial_inputs, &self.variant, &self.initial_guess)?;
        let traj = reactor::integrate(&x0, &self.schedule, &params, &self.variant, &self.grid, self.ode)?;
        Ok(self.channels.iter().map(|c| traj.series(*c)).collect())
    }

    /// Per-channel residual sums of squares; NaN model outputs count as failure.
    pub fn sse(&self, eta: &[f64]) -> Result<Vec<f64>> {
        let pred = self.predict(eta)?;
        Ok(pred
            .iter()
            .zip(&self.data)
            .map(|(p, d)| {
                let s: f64 = p.iter().zip(d).map(|(a, b)| (a - b) * (a - b)).sum();
                if s.is_nan() {
                    f64::INFINITY
                } else {
                    s
                }
            })
            .collect())
    }

    /// Weighted least-squares log-likelihood, `-inf` when the forward model fails.
    pub fn log_likelihood(&self, eta: &[f64], variances: &VarianceState) -> f64 {
        match self.sse(eta) {
            Ok(sse) => weighted_log_likelihood(&sse, &variances.phi),
            Err(e) => {
                log::warn!("forward model failed: {e}");
                f64::NEG_INFINITY
            }
        }
    }
}

/// `-0.5 * sum_j sse_j / phi_j`.
pub fn weighted_log_likelihood(sse: &[f64], phi: &[f64]) -> f64 {
    -0.5 * sse.iter().zip(phi).map(|(s, p)| s / p).sum::<f64>()
}

impl Target for InferenceProblem {
    fn dim(&self) -> usize {
        N_PARAMS
    }

    fn n_data(&self) -> Vec<usize> {
        self.data.iter().map(|d| d.iter().filter(|v| v.is_finite()).count()).collect()
    }

    fn evaluate(&self, x: &[f64]) -> Evaluation {
        match self.sse(x) {
            Ok(sse) => Evaluation { log_density: 0.0, sse },
            Err(e) => {
                log::warn!("forward model failed: {e}");
                Evaluation::failed(self.channels.len())
            }
        }
    }
}

/// Symmetric box `[1 - half_width, 1 + half_width]` for every parameter.
pub fn symmetric_bounds(half_width: f64) -> Result<Vec<(f64, f64)>> {
    if !(half_width > 0.0 && half_width < 1.0) {
        return invalid(format!("bound half width must lie in (0, 1), got {half_width}"));
    }
    Ok(vec![(1.0 - half_width, 1.0 + half_width); N_PARAMS])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn likelihood_arithmetic() {
        assert_eq!(weighted_log_likelihood(&[0.0], &[1.0]), 0.0);
        assert_eq!(weighted_log_likelihood(&[2.0], &[1.0]), -1.0);
        let a = weighted_log_likelihood(&[2.0, 4.0], &[1.0, 1.0]);
        let b = weighted_log_likelihood(&[2.0, 4.0], &[1.0, 2.0]);
        assert_eq!(a - b, -1.0);
    }

    #[test]
    fn exact_data_gives_zero_residual() {
        let nominal = ReactorParameters::nominal();
        let u = ReactorInputs::steady_default();
        let levels = vec![u, ReactorInputs { qc: 500.0, ..u }];
        let schedule = InputSchedule::new(levels, 10.0).unwrap();
        let grid = schedule.grid(1.0).unwrap();
        let mut p = InferenceProblem {
            nominal,
            variant: ModelVariant::physical(),
            schedule,
            grid,
            initial_inputs: u,
            initial_guess: ReactorState { i: 0.067, m: 3.3, t: 323.0, tc: 305.0, d0: 2.7e-4, d1: 16.0, d2: 4600.0 },
            channels: vec![Channel::T, Channel::Eta],
            data: vec![],
            bounds: symmetric_bounds(0.05).unwrap(),
            ode: OdeOptions::default(),
        };
        p.data = p.predict(&[1.0; N_PARAMS]).unwrap();
        p.validate().unwrap();
        let sse = p.sse(&[1.0; N_PARAMS]).unwrap();
        assert_eq!(sse, vec![0.0, 0.0]);
        let mut eta = [1.0; N_PARAMS];
        eta[1] = 1.01;
        assert!(p.sse(&eta).unwrap()[0] > 0.0);
        assert_eq!(p.n_data(), vec![21, 21]);
    }
}
