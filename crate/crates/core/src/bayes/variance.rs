//! Conjugate update of the per-channel observation variance.

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Inverse-gamma distribution with shape `alpha` and scale `scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InverseGamma {
    pub alpha: f64,
    pub scale: f64,
}

impl InverseGamma {
    pub fn new(alpha: f64, scale: f64) -> Result<Self> {
        if !(alpha > 0.0) || !(scale > 0.0) || !alpha.is_finite() || !scale.is_finite() {
            return invalid(format!("inverse gamma needs positive finite shape and scale, got ({alpha}, {scale})"));
        }
        Ok(Self { alpha, scale })
    }

    /// Mean `scale / (alpha - 1)`, infinite for `alpha <= 1`.
    pub fn mean(&self) -> f64 {
        if self.alpha > 1.0 {
            self.scale / (self.alpha - 1.0)
        } else {
            f64::INFINITY
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let g = Gamma::new(self.alpha, 1.0).expect("validated shape");
        self.scale / g.sample(rng)
    }
}

/// How the variance posterior parameters are reported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMode {
    /// `Phi ~ InvGamma((n0 + N)/2, (n0 V0^2 + SSE)/2)`; `beta` holds the scale.
    #[default]
    Standard,
    /// `alpha = N/2`, `beta = 2/SSE`, `Phi = 1 / Gamma(alpha, scale = beta)`.
    AsPrinted,
}

/// Optional conjugate prior: `n0` pseudo-observations with variance `v0_sq`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VariancePrior {
    pub n0: f64,
    pub v0_sq: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceState {
    pub phi: Vec<f64>,
    pub n_data: Vec<usize>,
    pub sse: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl VarianceState {
    /// Fixed variances, no posterior bookkeeping.
    pub fn fixed(phi: Vec<f64>) -> Self {
        let n = phi.len();
        Self { phi, n_data: vec![0; n], sse: vec![0.0; n], alpha: vec![0.0; n], beta: vec![0.0; n] }
    }
}

/// Posterior shape and the mode-specific `beta` for one channel.
pub fn posterior_parameters(sse: f64, n_data: usize, prior: &VariancePrior, mode: VarianceMode) -> Result<(f64, f64)> {
    if !(sse > 0.0) || !sse.is_finite() {
        return invalid(format!("SSE must be positive and finite, got {sse}"));
    }
    if n_data == 0 {
        return invalid("variance posterior needs at least one data point");
    }
    Ok(match mode {
        VarianceMode::Standard => ((prior.n0 + n_data as f64) / 2.0, (prior.n0 * prior.v0_sq + sse) / 2.0),
        VarianceMode::AsPrinted => (n_data as f64 / 2.0, 2.0 / sse),
    })
}

/// Draw one observation variance per channel from its conjugate posterior.
pub fn sample_variance_posterior<R: Rng + ?Sized>(
    sse: &[f64],
    n_data: &[usize],
    prior: &VariancePrior,
    mode: VarianceMode,
    rng: &mut R,
) -> Result<VarianceState> {
    if sse.len() != n_data.len() {
        return invalid("SSE and data counts differ in length");
    }
    let mut state = VarianceState {
        phi: Vec::with_capacity(sse.len()),
        n_data: n_data.to_vec(),
        sse: sse.to_vec(),
        alpha: Vec::with_capacity(sse.len()),
        beta: Vec::with_capacity(sse.len()),
    };
    for (&s, &n) in sse.iter().zip(n_data) {
        let (alpha, beta) = posterior_parameters(s, n, prior, mode)?;
        let phi = match mode {
            VarianceMode::Standard => InverseGamma::new(alpha, beta)?.sample(rng),
            VarianceMode::AsPrinted => {
                let g = Gamma::new(alpha, beta).map_err(|e| crate::Error::InvalidArgument(e.to_string()))?;
                1.0 / g.sample(rng)
            }
        };
        state.phi.push(phi);
        state.alpha.push(alpha);
        state.beta.push(beta);
    }
    Ok(state)
}
