//! Delayed Rejection Adaptive Metropolis.

use std::fmt;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::variance::{sample_variance_posterior, VarianceMode, VariancePrior, VarianceState};
use crate::error::{invalid, Error, Result};
use crate::io;
use crate::rng::stream;

/// Result of one forward evaluation.
///
/// The log posterior at variances `phi` is
/// `log_density - 0.5 * sum_j sse[j] / phi[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub log_density: f64,
    pub sse: Vec<f64>,
}

impl Evaluation {
    pub fn failed(n_channels: usize) -> Self {
        Self { log_density: f64::NEG_INFINITY, sse: vec![f64::INFINITY; n_channels] }
    }

    pub fn is_finite(&self) -> bool {
        self.log_density.is_finite() && self.sse.iter().all(|s| s.is_finite())
    }

    pub fn log_posterior(&self, phi: &[f64]) -> f64 {
        if !self.is_finite() {
            return f64::NEG_INFINITY;
        }
        self.log_density - 0.5 * self.sse.iter().zip(phi).map(|(s, p)| s / p).sum::<f64>()
    }
}

/// Density known up to a constant, optionally with Gaussian residual channels.
pub trait Target {
    fn dim(&self) -> usize;

    /// Data points per residual channel; empty for a plain density.
    fn n_data(&self) -> Vec<usize> {
        Vec::new()
    }

    fn evaluate(&self, x: &[f64]) -> Evaluation;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DramConfig {
    /// Total draws, burn-in included.
    pub n_samples: usize,
    pub burn_in: usize,
    /// Initial proposal standard deviation per coordinate.
    pub initial_sigma: f64,
    pub dr_shrink: f64,
    pub adapt_interval: usize,
    pub epsilon: f64,
    /// Disable the second stage to get plain adaptive Metropolis.
    pub delayed_rejection: bool,
    pub adapt: bool,
    pub variance_mode: VarianceMode,
    pub variance_prior: VariancePrior,
    pub seed: u64,
}

impl Default for DramConfig {
    fn default() -> Self {
        Self {
            n_samples: 5000,
            burn_in: 1000,
            initial_sigma: 0.01,
            dr_shrink: 0.2,
            adapt_interval: 100,
            epsilon: 1e-10,
            delayed_rejection: true,
            adapt: true,
            variance_mode: VarianceMode::Standard,
            variance_prior: VariancePrior::default(),
            seed: 0,
        }
    }
}

impl DramConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples <= self.burn_in {
            return invalid(format!("n_samples ({}) must exceed burn_in ({})", self.n_samples, self.burn_in));
        }
        if !(self.initial_sigma > 0.0) || !(self.dr_shrink > 0.0 && self.dr_shrink < 1.0) {
            return invalid("initial_sigma must be positive and dr_shrink in (0, 1)");
        }
        if self.adapt_interval == 0 || !(self.epsilon >= 0.0) {
            return invalid("adapt_interval must be positive and epsilon non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    First,
    Delayed,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::First => "first",
            Stage::Delayed => "delayed",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    pub param_names: Vec<String>,
    pub channel_names: Vec<String>,
    pub draws: Vec<Vec<f64>>,
    pub log_posteriors: Vec<f64>,
    pub variance_draws: Vec<Vec<f64>>,
    pub accepted: Vec<bool>,
    /// Stage that decided each draw.
    pub stages: Vec<Stage>,
    pub burn_in: usize,
}

impl Chain {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.param_names.len()
    }

    pub fn post_burn_in(&self) -> &[Vec<f64>] {
        &self.draws[self.burn_in.min(self.draws.len())..]
    }

    /// Post-burn-in values of parameter `j`.
    pub fn column(&self, j: usize) -> Vec<f64> {
        self.post_burn_in().iter().map(|d| d[j]).collect()
    }

    pub fn variance_column(&self, j: usize) -> Vec<f64> {
        self.variance_draws[self.burn_in.min(self.draws.len())..].iter().map(|d| d[j]).collect()
    }

    pub fn acceptance_rate(&self) -> f64 {
        let acc = &self.accepted[self.burn_in.min(self.accepted.len())..];
        if acc.is_empty() {
            return 0.0;
        }
        acc.iter().filter(|a| **a).count() as f64 / acc.len() as f64
    }

    pub fn delayed_acceptances(&self) -> usize {
        self.accepted.iter().zip(&self.stages).filter(|(a, s)| **a && **s == Stage::Delayed).count()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut header: Vec<String> =
            ["draw_index", "accepted", "stage", "log_posterior"].iter().map(|s| s.to_string()).collect();
        header.extend(self.param_names.iter().cloned());
        header.extend(self.channel_names.iter().map(|c| format!("phi_{c}")));
        let rows: Vec<Vec<String>> = (0..self.len())
            .map(|k| {
                let mut r = vec![
                    k.to_string(),
                    u8::from(self.accepted[k]).to_string(),
                    self.stages[k].to_string(),
                    io::fmt_f64(self.log_posteriors[k]),
                ];
                r.extend(self.draws[k].iter().map(|v| io::fmt_f64(*v)));
                r.extend(self.variance_draws[k].iter().map(|v| io::fmt_f64(*v)));
                r
            })
            .collect();
        io::write_rows(path, &header, &rows)
    }

    pub fn read_csv(path: &Path, burn_in: usize) -> Result<Self> {
        let (header, rows) = io::read_rows(path)?;
        if header.len() < 4 || header[..4] != ["draw_index", "accepted", "stage", "log_posterior"] {
            return Err(Error::Parse(format!("{}: unexpected chain header", path.display())));
        }
        let channel_names: Vec<String> =
            header[4..].iter().filter_map(|h| h.strip_prefix("phi_").map(str::to_string)).collect();
        let n_params = header.len() - 4 - channel_names.len();
        let param_names = header[4..4 + n_params].to_vec();
        let mut chain = Chain {
            param_names,
            channel_names,
            draws: Vec::with_capacity(rows.len()),
            log_posteriors: Vec::with_capacity(rows.len()),
            variance_draws: Vec::with_capacity(rows.len()),
            accepted: Vec::with_capacity(rows.len()),
            stages: Vec::with_capacity(rows.len()),
            burn_in,
        };
        for r in rows {
            chain.accepted.push(r[1] == "1");
            chain.stages.push(match r[2].as_str() {
                "first" => Stage::First,
                "delayed" => Stage::Delayed,
                other => return Err(Error::Parse(format!("unknown stage {other:?}"))),
            });
            chain.log_posteriors.push(io::parse_f64(&r[3])?);
            let vals: Vec<f64> = r[4..].iter().map(|s| io::parse_f64(s)).collect::<Result<_>>()?;
            chain.draws.push(vals[..n_params].to_vec());
            chain.variance_draws.push(vals[n_params..].to_vec());
        }
        Ok(chain)
    }
}

/// Running mean and covariance of the whole chain history.
struct RunningCov {
    n: f64,
    mean: DVector<f64>,
    m2: DMatrix<f64>,
}

impl RunningCov {
    fn new(d: usize) -> Self {
        Self { n: 0.0, mean: DVector::zeros(d), m2: DMatrix::zeros(d, d) }
    }

    fn push(&mut self, x: &[f64]) {
        self.n += 1.0;
        let x = DVector::from_column_slice(x);
        let delta = &x - &self.mean;
        self.mean += &delta / self.n;
        let delta2 = &x - &self.mean;
        self.m2 += &delta * delta2.transpose();
    }

    fn covariance(&self) -> Option<DMatrix<f64>> {
        (self.n >= 2.0).then(|| &self.m2 / (self.n - 1.0))
    }
}

struct Proposal {
    chol: DMatrix<f64>,
}

impl Proposal {
    fn from_cov(cov: DMatrix<f64>) -> Option<Self> {
        Cholesky::new(cov).map(|c| Self { chol: c.l() })
    }

    fn step<R: Rng + ?Sized>(&self, x: &[f64], scale: f64, rng: &mut R) -> Vec<f64> {
        let d = x.len();
        let z = DVector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let dx = &self.chol * z;
        x.iter().zip(dx.iter()).map(|(a, b)| a + scale * b).collect()
    }

    /// `(b - a)^T C^-1 (b - a)` for the unscaled covariance.
    fn mahalanobis_sq(&self, a: &[f64], b: &[f64]) -> f64 {
        let diff = DVector::from_iterator(a.len(), a.iter().zip(b).map(|(x, y)| y - x));
        let z = self.chol.solve_lower_triangular(&diff).expect("non-singular Cholesky factor");
        z.norm_squared()
    }
}

fn in_bounds(x: &[f64], bounds: &[(f64, f64)]) -> bool {
    x.iter().zip(bounds).all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
}

/// Sample `target` restricted to the box `bounds`, starting from `x0`.
pub fn run_dram<T: Target + ?Sized>(
    target: &T,
    bounds: &[(f64, f64)],
    x0: &[f64],
    param_names: &[String],
    channel_names: &[String],
    config: &DramConfig,
) -> Result<Chain> {
    config.validate()?;
    let d = target.dim();
    if bounds.len() != d || x0.len() != d || param_names.len() != d {
        return invalid("target dimension, bounds, start point and names disagree");
    }
    for &(lo, hi) in bounds {
        if !(lo < hi) {
            return invalid(format!("degenerate parameter bounds ({lo}, {hi})"));
        }
    }
    if !in_bounds(x0, bounds) {
        return invalid("start point lies outside the bounds");
    }
    let n_data = target.n_data();
    if channel_names.len() != n_data.len() {
        return invalid("channel names do not match the target's residual channels");
    }
    let mut rng = stream(config.seed, "dram", 0);
    let mut x = x0.to_vec();
    let mut ex = target.evaluate(&x);
    if !ex.is_finite() {
        return Err(Error::Domain("target is not finite at the start point".into()));
    }
    let mut phi = match n_data.is_empty() {
        true => Vec::new(),
        false => draw_phi(&ex, &n_data, config, &mut rng)?.phi,
    };
    let mut proposal = Proposal::from_cov(DMatrix::from_diagonal_element(d, d, config.initial_sigma.powi(2)))
        .ok_or_else(|| Error::SingularCovariance("initial proposal".into()))?;
    let s_d = 2.4f64.powi(2) / d as f64;
    let gamma = config.dr_shrink;
    let mut history = RunningCov::new(d);

    let mut chain = Chain {
        param_names: param_names.to_vec(),
        channel_names: channel_names.to_vec(),
        draws: Vec::with_capacity(config.n_samples),
        log_posteriors: Vec::with_capacity(config.n_samples),
        variance_draws: Vec::with_capacity(config.n_samples),
        accepted: Vec::with_capacity(config.n_samples),
        stages: Vec::with_capacity(config.n_samples),
        burn_in: config.burn_in,
    };

    for k in 0..config.n_samples {
        let lp_x = ex.log_posterior(&phi);
        let y1 = proposal.step(&x, 1.0, &mut rng);
        let (e1, lp_y1) = if in_bounds(&y1, bounds) {
            let e = target.evaluate(&y1);
            let lp = e.log_posterior(&phi);
            (Some(e), lp)
        } else {
            (None, f64::NEG_INFINITY)
        };
        let log_a1 = (lp_y1 - lp_x).min(0.0);
        let mut accepted = false;
        let mut stage = Stage::First;
        if rng.gen::<f64>().ln() < log_a1 {
            x = y1;
            ex = e1.expect("accepted proposal was evaluated");
            accepted = true;
        } else if config.delayed_rejection {
            stage = Stage::Delayed;
            let y2 = proposal.step(&x, gamma, &mut rng);
            if in_bounds(&y2, bounds) {
                let e2 = target.evaluate(&y2);
                let lp_y2 = e2.log_posterior(&phi);
                if lp_y2.is_finite() {
                    // alpha_1(y2, y1): chance that a first stage from y2 would have moved to y1.
                    let a1_rev = if lp_y1.is_finite() { (lp_y1 - lp_y2).min(0.0).exp() } else { 0.0 };
                    let a1_fwd = log_a1.exp();
                    let log_q_rev = -0.5 * proposal.mahalanobis_sq(&y2, &y1);
                    let log_q_fwd = -0.5 * proposal.mahalanobis_sq(&x, &y1);
                    let num = lp_y2 + log_q_rev + (1.0 - a1_rev).max(0.0).ln();
                    let den = lp_x + log_q_fwd + (1.0 - a1_fwd).max(0.0).ln();
                    let log_a2 = if den == f64::NEG_INFINITY { 0.0 } else { (num - den).min(0.0) };
                    if rng.gen::<f64>().ln() < log_a2 {
                        x = y2;
                        ex = e2;
                        accepted = true;
                    }
                }
            }
        }
        if !n_data.is_empty() {
            phi = draw_phi(&ex, &n_data, config, &mut rng)?.phi;
        }
        history.push(&x);
        chain.draws.push(x.clone());
        chain.log_posteriors.push(ex.log_posterior(&phi));
        chain.variance_draws.push(phi.clone());
        chain.accepted.push(accepted);
        chain.stages.push(stage);

        if config.adapt && (k + 1) % config.adapt_interval == 0 {
            if let Some(cov) = history.covariance() {
                let c = cov * s_d + DMatrix::identity(d, d) * config.epsilon;
                if let Some(p) = Proposal::from_cov(c) {
                    proposal = p;
                } else {
                    log::debug!("adapted proposal covariance not positive definite at draw {k}; keeping previous");
                }
            }
        }
    }
    let rate = chain.acceptance_rate();
    if !(0.01..=0.99).contains(&rate) {
        log::warn!("DRAM acceptance rate after burn-in is {rate:.4}");
    }
    Ok(chain)
}

fn draw_phi<R: Rng + ?Sized>(e: &Evaluation, n_data: &[usize], config: &DramConfig, rng: &mut R) -> Result<VarianceState> {
    let sse: Vec<f64> = e.sse.iter().map(|s| s.max(f64::MIN_POSITIVE)).collect();
    sample_variance_posterior(&sse, n_data, &config.variance_prior, config.variance_mode, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats;

    struct Normal1;
    impl Target for Normal1 {
        fn dim(&self) -> usize {
            1
        }
        fn evaluate(&self, x: &[f64]) -> Evaluation {
            Evaluation { log_density: -0.5 * x[0] * x[0], sse: vec![] }
        }
    }

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i}")).collect()
    }

    #[test]
    fn standard_normal_moments() {
        let cfg = DramConfig { n_samples: 21_000, burn_in: 1000, initial_sigma: 1.0, seed: 4, ..Default::default() };
        let chain = run_dram(&Normal1, &[(-50.0, 50.0)], &[0.0], &names(1), &[], &cfg).unwrap();
        let xs = chain.column(0);
        assert_eq!(xs.len(), 20_000);
        assert!(stats::mean(&xs).abs() < 0.05);
        let sd = stats::std_dev(&xs);
        assert!((0.93..=1.07).contains(&sd), "sd {sd}");
    }

    #[test]
    fn draws_respect_bounds_and_seed() {
        let cfg = DramConfig { n_samples: 3000, burn_in: 500, initial_sigma: 2.0, seed: 9, ..Default::default() };
        let b = [(-0.5, 0.7)];
        let a = run_dram(&Normal1, &b, &[0.0], &names(1), &[], &cfg).unwrap();
        assert!(a.draws.iter().all(|d| d[0] >= -0.5 && d[0] <= 0.7));
        assert!(a.delayed_acceptances() > 0);
        let again = run_dram(&Normal1, &b, &[0.0], &names(1), &[], &cfg).unwrap();
        assert_eq!(a, again);
    }

    #[test]
    fn rejects_inconsistent_configuration() {
        let cfg = DramConfig { n_samples: 10, burn_in: 10, ..Default::default() };
        assert!(run_dram(&Normal1, &[(-1.0, 1.0)], &[0.0], &names(1), &[], &cfg).is_err());
        let cfg = DramConfig::default();
        assert!(run_dram(&Normal1, &[(-1.0, 1.0)], &[2.0], &names(1), &[], &cfg).is_err());
    }

    #[test]
    fn chain_csv_round_trip() {
        struct Lin;
        impl Target for Lin {
            fn dim(&self) -> usize {
                2
            }
            fn n_data(&self) -> Vec<usize> {
                vec![20]
            }
            fn evaluate(&self, x: &[f64]) -> Evaluation {
                let sse = (0..20).map(|i| (x[0] + x[1] * i as f64 - (1.0 + 0.5 * i as f64)).powi(2)).sum::<f64>() + 1.0;
                Evaluation { log_density: 0.0, sse: vec![sse] }
            }
        }
        let cfg = DramConfig { n_samples: 400, burn_in: 100, seed: 2, ..Default::default() };
        let chain = run_dram(&Lin, &[(0.0, 2.0), (0.0, 1.0)], &[1.0, 0.5], &names(2), &["y".into()], &cfg).unwrap();
        assert!(chain.variance_draws.iter().all(|p| p[0] > 0.0));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chain.csv");
        chain.write_csv(&path).unwrap();
        let back = Chain::read_csv(&path, 100).unwrap();
        assert_eq!(back, chain);
    }
}
