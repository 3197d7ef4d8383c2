//! Small feed-forward networks with exact gradients: hybrid policy heads,
//! value critics, advantage estimation and parameter checkpoints.

mod adam;
mod critic;
mod gae;
pub mod mlp;
mod params;
mod policy;

pub use adam::Adam;
pub use critic::{huber, huber_grad, td_gradient, td_update, Transition, ValueNet};
pub use gae::{discounted_returns, gae, normalize};
pub use params::{load_checkpoint, save_checkpoint, Checkpoint, Manifest, ParamVector};
pub use policy::{
    fisher_weights, kl_divergence, kl_grad, log_prob, log_prob_grad, sigmoid, DistGrad, HybridPolicy, PolicyDistribution,
    PolicySample, LOGIT_CLAMP, LOG_STD_MAX, LOG_STD_MIN,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("{what}: expected length {expected}, got {got}")]
    Shape { what: &'static str, expected: usize, got: usize },
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
