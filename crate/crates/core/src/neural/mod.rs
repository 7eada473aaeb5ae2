//! Multilayer perceptrons trained from scratch.

mod mlp;
mod train;
mod weights;

pub use mlp::{count_params, loss_and_grads, metric_mae, metric_mse, Activation, Mlp, MlpSpec};
pub use train::{train, Adam, AdamConfig, History, MlpModel, TrainConfig, Trainer};
pub use weights::{load_weights, save_weights, weights_from_str, weights_to_string, WEIGHTS_FORMAT, WEIGHTS_VERSION};
