//! Versioned text format for trained networks.
//!
//! A weights file is TOML with the following top-level keys:
//!
//! ```text
//! format = "uasml-mlp"
//! version = 1
//! seed, epochs_trained, stopped_early
//! [spec]        input_dim, hidden, activations, learning_rate
//! [narx]        optional lag configuration
//! [scalers]     optional min/max per input and for the output
//! [metrics]     per-epoch train/val MSE and MAE
//! [[layers]]    fan_in, fan_out, weights (fan_in rows of fan_out values), bias
//! ```
//!
//! Floats are written in shortest round-trip form, so a reload is bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::mlp::{Mlp, MlpSpec};
use super::train::{History, MlpModel};
use crate::error::{Error, Result};
use crate::narx::{NarxConfig, NarxScalers};

pub const WEIGHTS_FORMAT: &str = "uasml-mlp";
pub const WEIGHTS_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerRecord {
    fan_in: usize,
    fan_out: usize,
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightsFile {
    format: String,
    version: u32,
    seed: u64,
    epochs_trained: usize,
    stopped_early: bool,
    spec: MlpSpec,
    #[serde(skip_serializing_if = "Option::is_none")]
    narx: Option<NarxConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    scalers: Option<NarxScalers>,
    metrics: History,
    layers: Vec<LayerRecord>,
}

pub fn weights_to_string(model: &MlpModel) -> Result<String> {
    let mlp = &model.mlp;
    let layers = (0..mlp.n_layers())
        .map(|l| {
            let (fan_in, fan_out) = mlp.layer_shape(l);
            let (w, b) = mlp.layer(l);
            LayerRecord { fan_in, fan_out, weights: w.chunks(fan_out).map(<[f64]>::to_vec).collect(), bias: b.to_vec() }
        })
        .collect();
    let file = WeightsFile {
        format: WEIGHTS_FORMAT.into(),
        version: WEIGHTS_VERSION,
        seed: model.seed,
        epochs_trained: model.epochs_trained,
        stopped_early: model.stopped_early,
        spec: mlp.spec.clone(),
        narx: model.narx,
        scalers: model.scalers.clone(),
        metrics: model.history.clone(),
        layers,
    };
    toml::to_string(&file).map_err(|e| Error::Parse(e.to_string()))
}

pub fn weights_from_str(text: &str) -> Result<MlpModel> {
    let file: WeightsFile = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    if file.format != WEIGHTS_FORMAT || file.version != WEIGHTS_VERSION {
        return Err(Error::Parse(format!("unsupported weights format {} v{}", file.format, file.version)));
    }
    let shapes = file.spec.layer_shapes();
    if shapes.len() != file.layers.len() {
        return Err(Error::Parse(format!("spec has {} layers, file has {}", shapes.len(), file.layers.len())));
    }
    let mut params = Vec::new();
    for ((fi, fo), layer) in shapes.iter().zip(&file.layers) {
        let ok = layer.fan_in == *fi
            && layer.fan_out == *fo
            && layer.weights.len() == *fi
            && layer.weights.iter().all(|r| r.len() == *fo)
            && layer.bias.len() == *fo;
        if !ok {
            return Err(Error::Parse(format!("layer {fi}x{fo} does not match its stored arrays")));
        }
        for row in &layer.weights {
            params.extend_from_slice(row);
        }
        params.extend_from_slice(&layer.bias);
    }
    let mlp = Mlp::from_params(&file.spec, params)?;
    if file.metrics.len() != file.epochs_trained {
        return Err(Error::Parse("history length differs from epochs_trained".into()));
    }
    Ok(MlpModel {
        mlp,
        narx: file.narx,
        scalers: file.scalers,
        history: file.metrics,
        epochs_trained: file.epochs_trained,
        stopped_early: file.stopped_early,
        seed: file.seed,
    })
}

pub fn save_weights(model: &MlpModel, path: &Path) -> Result<()> {
    fs::write(path, weights_to_string(model)?)?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<MlpModel> {
    weights_from_str(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::Activation;
    use crate::rng::stream;

    #[test]
    fn round_trip_is_bit_exact() {
        let spec = MlpSpec::uniform(5, vec![7, 3], Activation::Relu, 1e-3);
        let mlp = Mlp::init(&spec, &mut stream(11, "init", 0)).unwrap();
        let mut model = MlpModel::untrained(mlp, 11);
        model.history.val_mse = vec![0.1, 1.0 / 3.0];
        model.history.val_mae = vec![0.2, 0.3];
        model.history.train_mse = vec![0.5, f64::MIN_POSITIVE];
        model.history.train_mae = vec![0.6, 0.7];
        model.epochs_trained = 2;
        let text = weights_to_string(&model).unwrap();
        assert!(text.starts_with("format = \"uasml-mlp\""));
        let back = weights_from_str(&text).unwrap();
        assert_eq!(back, model);
        let x = [0.3, -0.2, 0.9, 0.1, -0.7];
        assert_eq!(back.mlp.forward(&x).unwrap(), model.mlp.forward(&x).unwrap());
    }

    #[test]
    fn rejects_other_versions_and_shapes() {
        let spec = MlpSpec::uniform(2, vec![2], Activation::Tanh, 1e-3);
        let model = MlpModel::untrained(Mlp::init(&spec, &mut stream(1, "init", 0)).unwrap(), 1);
        let text = weights_to_string(&model).unwrap();
        assert!(weights_from_str(&text.replace("version = 1", "version = 2")).is_err());
        assert!(weights_from_str(&text.replace("input_dim = 2", "input_dim = 3")).is_err());
    }
}
