//! Hyperband architecture search.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::io::{fmt_f64, write_rows};
use crate::narx::NarxDataset;
use crate::neural::{metric_mae, metric_mse, Activation, AdamConfig, Mlp, MlpModel, MlpSpec, TrainConfig, Trainer};
use crate::rng::{child_seed, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSpace {
    pub min_layers: usize,
    pub max_layers: usize,
    pub widths: Vec<usize>,
    pub activations: Vec<Activation>,
    pub learning_rates: Vec<f64>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            min_layers: 2,
            max_layers: 6,
            widths: vec![30, 50, 70, 90, 100, 120, 130, 160],
            activations: vec![Activation::Relu, Activation::Tanh],
            learning_rates: vec![1e-4, 1e-3, 1e-1],
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        if self.min_layers == 0 || self.min_layers > self.max_layers {
            return invalid(format!("invalid layer range {}..={}", self.min_layers, self.max_layers));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return invalid("search space needs positive widths");
        }
        if self.activations.is_empty() || self.learning_rates.is_empty() {
            return invalid("search space needs at least one activation and learning rate");
        }
        if self.learning_rates.iter().any(|lr| !(*lr > 0.0) || !lr.is_finite()) {
            return invalid("learning rates must be positive");
        }
        Ok(())
    }

    /// Draw one architecture: layer count, an independent width per layer,
    /// one activation for all layers and a learning rate.
    pub fn sample<R: Rng + ?Sized>(&self, input_dim: usize, rng: &mut R) -> MlpSpec {
        let layers = rng.gen_range(self.min_layers..=self.max_layers);
        let hidden = (0..layers).map(|_| *self.widths.choose(rng).unwrap()).collect();
        let act = *self.activations.choose(rng).unwrap();
        let lr = *self.learning_rates.choose(rng).unwrap();
        MlpSpec::uniform(input_dim, hidden, act, lr)
    }
}

/// Named reference architectures: `reference-t` (18-[100,90]-1) and
/// `reference-eta` (18-[150,90,150,90,150,90]-1), both tanh with rate 1e-3.
pub fn preset(name: &str, input_dim: usize) -> Option<MlpSpec> {
    let hidden = match name {
        "reference-t" => vec![100, 90],
        "reference-eta" => vec![150, 90, 150, 90, 150, 90],
        _ => return None,
    };
    Some(MlpSpec::uniform(input_dim, hidden, Activation::Tanh, 1e-3))
}

pub const PRESETS: [&str; 2] = ["reference-t", "reference-eta"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperbandConfig {
    pub max_budget_epochs: usize,
    pub eta: usize,
    pub brackets: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for HyperbandConfig {
    fn default() -> Self {
        Self { max_budget_epochs: 90, eta: 3, brackets: 3, batch_size: 64, adam: AdamConfig::default(), seed: 0 }
    }
}

/// One rung of one bracket: `n` configurations trained up to `budget` epochs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rung {
    pub bracket: usize,
    pub rung: usize,
    pub n: usize,
    pub budget: usize,
}

impl HyperbandConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eta < 2 || self.brackets == 0 || self.batch_size == 0 {
            return invalid("eta must be at least 2, brackets and batch size positive");
        }
        let min_budget = self.max_budget_epochs / self.eta.pow(self.brackets as u32 - 1);
        if min_budget == 0 {
            return invalid(format!(
                "max budget {} is too small for {} brackets at eta {}",
                self.max_budget_epochs, self.brackets, self.eta
            ));
        }
        Ok(())
    }

    /// Bracket `s` (most exploratory first) starts `ceil(B / (s+1) * eta^s)`
    /// configurations at `R / eta^s` epochs and keeps `1/eta` per rung.
    pub fn schedule(&self) -> Vec<Rung> {
        let mut out = Vec::new();
        for s in (0..self.brackets).rev() {
            let n0 = (self.brackets as f64 / (s + 1) as f64 * self.eta.pow(s as u32) as f64).ceil() as usize;
            let r0 = self.max_budget_epochs / self.eta.pow(s as u32);
            for i in 0..=s {
                let n = (n0 / self.eta.pow(i as u32)).max(1);
                let budget = if i == s { self.max_budget_epochs } else { r0 * self.eta.pow(i as u32) };
                out.push(Rung { bracket: s, rung: i, n, budget });
            }
        }
        out
    }

    /// Epochs spent when every trial runs its full rung budgets with warm starts.
    pub fn budget_bound(&self) -> usize {
        let sched = self.schedule();
        sched
            .iter()
            .map(|r| {
                let prev = if r.rung == 0 {
                    0
                } else {
                    sched.iter().find(|p| p.bracket == r.bracket && p.rung == r.rung - 1).unwrap().budget
                };
                r.n * (r.budget - prev)
            })
            .sum()
    }

    fn train_config(&self, trial: usize) -> TrainConfig {
        TrainConfig {
            max_epochs: self.max_budget_epochs,
            patience: self.max_budget_epochs.saturating_sub(1).max(1),
            batch_size: self.batch_size,
            adam: self.adam,
            seed: child_seed(self.seed, "hyperband-train", trial as u64),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub trial: usize,
    pub bracket: usize,
    pub rung: usize,
    pub budget: usize,
    pub spec: MlpSpec,
    /// Best validation metrics within the budget; `NaN` when training diverged.
    pub val_mse: f64,
    pub val_mae: f64,
}

#[derive(Debug, Clone)]
pub struct TunerResult {
    pub best: MlpSpec,
    pub best_trial: usize,
    pub best_val_mse: f64,
    pub best_val_mae: f64,
    pub test_mse: Option<f64>,
    pub test_mae: Option<f64>,
    pub model: MlpModel,
    pub trials: Vec<TrialRecord>,
    pub epochs_spent: usize,
    pub budget_bound: usize,
}

struct Live<'a> {
    id: usize,
    spec: MlpSpec,
    trainer: Option<Trainer<'a>>,
}

/// Successive-halving brackets over `space`; the winner is the configuration
/// with the lowest validation MSE at full budget.  `test` is scored once, for
/// the winner only.
pub fn hyperband_search(
    space: &SearchSpace,
    train: &NarxDataset,
    val: &NarxDataset,
    test: Option<&NarxDataset>,
    cfg: &HyperbandConfig,
) -> Result<TunerResult> {
    space.validate()?;
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return invalid("tuner needs non-empty training and validation sets");
    }
    let input_dim = train.n_features;
    let schedule = cfg.schedule();
    let mut trials = Vec::new();
    let mut finalists: Vec<(f64, f64, usize, MlpModel)> = Vec::new();
    let mut epochs_spent = 0;
    let mut next_id = 0;
    for s in (0..cfg.brackets).rev() {
        let rungs: Vec<&Rung> = schedule.iter().filter(|r| r.bracket == s).collect();
        let mut spec_rng = stream(cfg.seed, "hyperband-spec", s as u64);
        let mut live: Vec<Live> = (0..rungs[0].n)
            .map(|_| {
                let spec = space.sample(input_dim, &mut spec_rng);
                next_id += 1;
                Live { id: next_id - 1, spec, trainer: None }
            })
            .collect();
        for (rank, rung) in rungs.iter().enumerate() {
            live.par_iter_mut().for_each(|l| {
                if l.trainer.is_none() {
                    let mlp = Mlp::init(&l.spec, &mut stream(cfg.seed, "hyperband-init", l.id as u64));
                    l.trainer = mlp.ok().and_then(|m| Trainer::new(m, train, val, cfg.train_config(l.id)).ok());
                }
                if let Some(t) = l.trainer.as_mut() {
                    if t.run_until(rung.budget).is_err() {
                        l.trainer = None;
                    }
                }
            });
            let mut scored: Vec<(f64, f64, usize)> = Vec::new();
            for (k, l) in live.iter().enumerate() {
                let (mse, mae) = match &l.trainer {
                    Some(t) => (t.best_val_mse(), t.best_val_mae()),
                    None => (f64::NAN, f64::NAN),
                };
                trials.push(TrialRecord {
                    trial: l.id,
                    bracket: s,
                    rung: rung.rung,
                    budget: rung.budget,
                    spec: l.spec.clone(),
                    val_mse: mse,
                    val_mae: mae,
                });
                if mse.is_finite() {
                    scored.push((mse, mae, k));
                }
            }
            if rank + 1 == rungs.len() {
                for (mse, mae, k) in scored {
                    let t = live[k].trainer.take().unwrap();
                    epochs_spent += t.epochs();
                    finalists.push((mse, mae, live[k].id, t.finish()));
                }
                for l in &live {
                    if let Some(t) = &l.trainer {
                        epochs_spent += t.epochs();
                    }
                }
            } else {
                scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.2.cmp(&b.2)));
                let keep: Vec<usize> = scored.iter().take(rungs[rank + 1].n).map(|x| x.2).collect();
                let mut next = Vec::new();
                for (k, l) in live.into_iter().enumerate() {
                    if keep.contains(&k) {
                        next.push(l);
                    } else if let Some(t) = &l.trainer {
                        epochs_spent += t.epochs();
                    }
                }
                next.sort_by_key(|l| l.id);
                live = next;
            }
        }
    }
    let (best_val_mse, best_val_mae, best_trial, model) = finalists
        .into_iter()
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.2.cmp(&b.2)))
        .ok_or_else(|| Error::TooManyFailures("every hyperband trial diverged".into()))?;
    let (test_mse, test_mae) = match test {
        Some(t) if !t.is_empty() => {
            let pred = model.mlp.forward(&t.x)?;
            (Some(metric_mse(&pred, &t.y)?), Some(metric_mae(&pred, &t.y)?))
        }
        _ => (None, None),
    };
    Ok(TunerResult {
        best: model.mlp.spec.clone(),
        best_trial,
        best_val_mse,
        best_val_mae,
        test_mse,
        test_mae,
        model,
        trials,
        epochs_spent,
        budget_bound: cfg.budget_bound(),
    })
}

pub const TRIAL_HEADER: [&str; 9] = ["trial", "rung", "budget", "layers", "widths", "activation", "lr", "val_mse", "val_mae"];

/// Trial log; widths are `;`-separated.
pub fn write_trials_csv(path: &Path, trials: &[TrialRecord]) -> Result<()> {
    let header: Vec<String> = TRIAL_HEADER.iter().map(|s| s.to_string()).collect();
    let rows: Vec<Vec<String>> = trials
        .iter()
        .map(|t| {
            vec![
                t.trial.to_string(),
                t.rung.to_string(),
                t.budget.to_string(),
                t.spec.hidden.len().to_string(),
                t.spec.hidden.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(";"),
                t.spec.activations.first().map_or("none", |a| a.name()).to_string(),
                fmt_f64(t.spec.learning_rate),
                fmt_f64(t.val_mse),
                fmt_f64(t.val_mae),
            ]
        })
        .collect();
    write_rows(path, &header, &rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::narx::{NarxConfig, NarxScalers, Scaler};
    use crate::neural::count_params;
    use crate::stats;

    fn dataset(x: Vec<f64>, y: Vec<f64>, d: usize) -> NarxDataset {
        let s = Scaler { min: -1.0, max: 1.0 };
        let mut ds = NarxDataset::empty(
            NarxConfig { input_lags: 1, output_lags: 1, include_current_input: false },
            NarxScalers { inputs: vec![s; 4], output: s },
        );
        ds.n_features = d;
        ds.blocks = vec![0; y.len()];
        ds.sample_index = (0..y.len()).collect();
        ds.x = x;
        ds.y = y;
        ds
    }

    fn planted(seed: u64, n: usize, teacher: &Mlp) -> NarxDataset {
        let mut rng = stream(seed, "planted-x", 0);
        let d = teacher.spec.input_dim;
        let x: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y = teacher.forward(&x).unwrap();
        dataset(x, y, d)
    }

    #[test]
    fn schedule_and_budget() {
        let cfg = HyperbandConfig::default();
        let s = cfg.schedule();
        let b2: Vec<(usize, usize)> = s.iter().filter(|r| r.bracket == 2).map(|r| (r.n, r.budget)).collect();
        assert_eq!(b2, vec![(9, 10), (3, 30), (1, 90)]);
        let b1: Vec<(usize, usize)> = s.iter().filter(|r| r.bracket == 1).map(|r| (r.n, r.budget)).collect();
        assert_eq!(b1, vec![(5, 30), (1, 90)]);
        let b0: Vec<(usize, usize)> = s.iter().filter(|r| r.bracket == 0).map(|r| (r.n, r.budget)).collect();
        assert_eq!(b0, vec![(3, 90)]);
        assert_eq!(cfg.budget_bound(), (90 + 60 + 60) + (150 + 60) + 270);
        assert!(HyperbandConfig { max_budget_epochs: 5, ..cfg }.validate().is_err());
    }

    #[test]
    fn presets_have_reference_sizes() {
        assert_eq!(count_params(&preset("reference-t", 18).unwrap()), 11_081);
        assert_eq!(count_params(&preset("reference-eta", 18).unwrap()), 71_011);
        assert!(preset("other", 18).is_none());
    }

    #[test]
    fn sampled_specs_lie_in_the_space() {
        let space = SearchSpace::default();
        let mut rng = stream(1, "s", 0);
        for _ in 0..200 {
            let s = space.sample(18, &mut rng);
            s.validate().unwrap();
            assert!((2..=6).contains(&s.hidden.len()));
            assert!(s.hidden.iter().all(|w| space.widths.contains(w)));
            assert!(space.learning_rates.contains(&s.learning_rate));
        }
    }

    #[test]
    fn single_spec_space_returns_it() {
        let teacher = Mlp::init(&MlpSpec::uniform(2, vec![3], Activation::Tanh, 1e-3), &mut stream(1, "t", 0)).unwrap();
        let (tr, va) = (planted(1, 200, &teacher), planted(2, 60, &teacher));
        let space = SearchSpace {
            min_layers: 2,
            max_layers: 2,
            widths: vec![5],
            activations: vec![Activation::Tanh],
            learning_rates: vec![1e-2],
        };
        let cfg = HyperbandConfig { max_budget_epochs: 9, brackets: 2, ..Default::default() };
        let res = hyperband_search(&space, &tr, &va, None, &cfg).unwrap();
        assert_eq!(res.best, MlpSpec::uniform(2, vec![5, 5], Activation::Tanh, 1e-2));
        assert!(res.test_mse.is_none());
    }

    #[test]
    fn planted_optimum_is_found() {
        let spec = MlpSpec::uniform(3, vec![8], Activation::Tanh, 1e-2);
        let teacher = Mlp::init(&spec, &mut stream(3, "teacher", 0)).unwrap();
        let (tr, va, te) = (planted(4, 600, &teacher), planted(5, 150, &teacher), planted(6, 150, &teacher));
        let space = SearchSpace {
            min_layers: 1,
            max_layers: 2,
            widths: vec![4, 8],
            activations: vec![Activation::Relu, Activation::Tanh],
            learning_rates: vec![1e-3, 1e-2],
        };
        let cfg = HyperbandConfig { max_budget_epochs: 27, seed: 7, ..Default::default() };
        let res = hyperband_search(&space, &tr, &va, Some(&te), &cfg).unwrap();

        let retrained = {
            let m = Mlp::init(&spec, &mut stream(8, "retrain", 0)).unwrap();
            let tc = TrainConfig { max_epochs: 27, patience: 26, seed: 8, ..Default::default() };
            crate::neural::train(m, &tr, &va, &tc).unwrap().best_val_mse().unwrap()
        };
        assert!(res.best_val_mse <= 2.0 * retrained, "winner {} vs planted {}", res.best_val_mse, retrained);
        assert!(res.test_mse.unwrap().is_finite());

        let finals: Vec<f64> = res.trials.iter().filter(|t| t.budget == 27).map(|t| t.val_mse).collect();
        assert!(res.best_val_mse <= stats::median(&finals));
        assert!(res.epochs_spent <= res.budget_bound);
    }

    #[test]
    fn search_is_reproducible_and_budget_exact() {
        let teacher = Mlp::init(&MlpSpec::uniform(2, vec![4], Activation::Tanh, 1e-3), &mut stream(9, "t", 0)).unwrap();
        let (tr, va) = (planted(10, 120, &teacher), planted(11, 40, &teacher));
        let space = SearchSpace { min_layers: 1, max_layers: 2, widths: vec![3, 6], ..Default::default() };
        let cfg = HyperbandConfig { max_budget_epochs: 9, brackets: 2, seed: 3, ..Default::default() };
        let a = hyperband_search(&space, &tr, &va, None, &cfg).unwrap();
        let b = hyperband_search(&space, &tr, &va, None, &cfg).unwrap();
        assert_eq!(a.trials, b.trials);
        assert_eq!(a.model, b.model);
        let diverged = a.trials.iter().any(|t| t.val_mse.is_nan());
        if !diverged {
            assert_eq!(a.epochs_spent, a.budget_bound);
        }
    }
}
