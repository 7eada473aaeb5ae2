//! Mini-batch ADAM training with early stopping.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::mlp::{metric_mae, metric_mse, Mlp, Workspace};
use crate::error::{invalid, Error, Result};
use crate::narx::{NarxConfig, NarxDataset, NarxScalers};
use crate::rng::{stream, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// First and second moment estimates for every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n_params: usize, config: AdamConfig) -> Self {
        Self { config, m: vec![0.0; n_params], v: vec![0.0; n_params], t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One bias-corrected update of `params` along `grad`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], learning_rate: f64) {
        self.t += 1;
        let AdamConfig { beta1: b1, beta2: b2, epsilon: eps } = self.config;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *p -= learning_rate * mhat / (vhat.sqrt() + eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { max_epochs: 300, patience: 100, batch_size: 64, adam: AdamConfig::default(), seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.batch_size == 0 {
            return invalid("max_epochs and batch_size must be positive");
        }
        if self.patience == 0 || self.patience >= self.max_epochs {
            return invalid(format!("patience {} must lie in 1..max_epochs ({})", self.patience, self.max_epochs));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub train_mse: Vec<f64>,
    pub train_mae: Vec<f64>,
    pub val_mse: Vec<f64>,
    pub val_mae: Vec<f64>,
}

impl History {
    pub fn len(&self) -> usize {
        self.val_mse.len()
    }

    pub fn is_empty(&self) -> bool {
        self.val_mse.is_empty()
    }

    /// Zero-based epoch with the smallest validation MSE (first one on ties).
    pub fn best_epoch(&self) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (e, v) in self.val_mse.iter().enumerate() {
            if best.map_or(true, |(_, b)| *v < b) {
                best = Some((e, *v));
            }
        }
        best.map(|(e, _)| e)
    }
}

/// A trained network together with everything needed to use it on raw data.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub mlp: Mlp,
    pub narx: Option<NarxConfig>,
    pub scalers: Option<NarxScalers>,
    pub history: History,
    pub epochs_trained: usize,
    pub stopped_early: bool,
    pub seed: u64,
}

impl MlpModel {
    pub fn untrained(mlp: Mlp, seed: u64) -> Self {
        Self { mlp, narx: None, scalers: None, history: History::default(), epochs_trained: 0, stopped_early: false, seed }
    }

    pub fn best_val_mse(&self) -> Option<f64> {
        self.history.best_epoch().map(|e| self.history.val_mse[e])
    }
}

/// Resumable training run: `run_epochs` may be called repeatedly with growing budgets.
pub struct Trainer<'a> {
    model: Mlp,
    best: Vec<f64>,
    best_val: f64,
    best_epoch: Option<usize>,
    adam: Adam,
    cfg: TrainConfig,
    train: &'a NarxDataset,
    val: &'a NarxDataset,
    rng: StreamRng,
    order: Vec<usize>,
    history: History,
    stopped_early: bool,
    ws: Workspace,
    grad: Vec<f64>,
    xb: Vec<f64>,
    yb: Vec<f64>,
}

impl<'a> Trainer<'a> {
    pub fn new(model: Mlp, train: &'a NarxDataset, val: &'a NarxDataset, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() || val.is_empty() {
            return invalid("training and validation sets must be non-empty");
        }
        if train.n_features != model.spec.input_dim || val.n_features != model.spec.input_dim {
            return invalid(format!(
                "network expects {} features, data has {}",
                model.spec.input_dim, train.n_features
            ));
        }
        let n = model.n_params();
        Ok(Self {
            best: model.params.clone(),
            best_val: f64::INFINITY,
            best_epoch: None,
            adam: Adam::new(n, cfg.adam),
            rng: stream(cfg.seed, "train-shuffle", 0),
            order: (0..train.len()).collect(),
            history: History::default(),
            stopped_early: false,
            ws: Workspace::default(),
            grad: vec![0.0; n],
            xb: Vec::new(),
            yb: Vec::new(),
            model,
            cfg,
            train,
            val,
        })
    }

    pub fn epochs(&self) -> usize {
        self.history.len()
    }

    pub fn finished(&self) -> bool {
        self.stopped_early || self.epochs() >= self.cfg.max_epochs
    }

    pub fn best_val_mse(&self) -> f64 {
        self.best_val
    }

    /// Validation MAE of the best epoch so far.
    pub fn best_val_mae(&self) -> f64 {
        self.best_epoch.map_or(f64::NAN, |e| self.history.val_mae[e])
    }

    pub fn history(&self) -> &History {
        &self.history
    }

    fn epoch(&mut self) -> Result<()> {
        let epoch = self.epochs();
        let d = self.train.n_features;
        self.order.shuffle(&mut self.rng);
        let lr = self.model.spec.learning_rate;
        let (mut sse, mut sae) = (0.0, 0.0);
        for batch in self.order.chunks(self.cfg.batch_size) {
            self.xb.clear();
            self.yb.clear();
            for &k in batch {
                self.xb.extend_from_slice(self.train.row(k));
                self.yb.push(self.train.y[k]);
            }
            let (mse, mae) = self.model.batch_gradient(&self.xb, &self.yb, &mut self.ws, &mut self.grad);
            if !mse.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            sse += mse * batch.len() as f64;
            sae += mae * batch.len() as f64;
            self.adam.step(&mut self.model.params, &self.grad, lr);
        }
        debug_assert_eq!(self.xb.len() % d, 0);
        let n = self.train.len() as f64;
        let pred = self.model.forward(&self.val.x)?;
        let val_mse = metric_mse(&pred, &self.val.y)?;
        let val_mae = metric_mae(&pred, &self.val.y)?;
        if !val_mse.is_finite() || self.model.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Divergence { epoch });
        }
        self.history.train_mse.push(sse / n);
        self.history.train_mae.push(sae / n);
        self.history.val_mse.push(val_mse);
        self.history.val_mae.push(val_mae);
        if val_mse < self.best_val {
            self.best_val = val_mse;
            self.best_epoch = Some(epoch);
            self.best.copy_from_slice(&self.model.params);
        } else if let Some(b) = self.best_epoch {
            if epoch - b >= self.cfg.patience {
                self.stopped_early = true;
            }
        }
        Ok(())
    }

    /// Train until `total_epochs` have been run in total or the run stops.
    pub fn run_until(&mut self, total_epochs: usize) -> Result<()> {
        let target = total_epochs.min(self.cfg.max_epochs);
        while self.epochs() < target && !self.stopped_early {
            self.epoch()?;
        }
        Ok(())
    }

    /// Restore the best-validation weights and hand back the model.
    pub fn finish(self) -> MlpModel {
        let mut mlp = self.model;
        if self.best_epoch.is_some() {
            mlp.params = self.best;
        }
        MlpModel {
            mlp,
            narx: Some(self.train.config),
            scalers: Some(self.train.scalers.clone()),
            epochs_trained: self.history.len(),
            history: self.history,
            stopped_early: self.stopped_early,
            seed: self.cfg.seed,
        }
    }
}

pub fn train(model: Mlp, train: &NarxDataset, val: &NarxDataset, cfg: &TrainConfig) -> Result<MlpModel> {
    let mut t = Trainer::new(model, train, val, *cfg)?;
    t.run_until(cfg.max_epochs)?;
    Ok(t.finish())
}
