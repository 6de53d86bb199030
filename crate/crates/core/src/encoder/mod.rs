//! Visual pathway: frozen Conv-4 backbone, correlation-map gating, the
//! embedding MLP and compatibility scoring.

mod backbone;
mod scoring;

pub use backbone::{backbone_forward, Backbone, DEFAULT_CHANNELS};
pub use scoring::{
    argmax_rows, batch_loss, correlation_map, episode_loss, init_params, mlp2_tape, score_all, score_from_nodes, score_tape,
    ModelConfig,
};

use thiserror::Error;

use crate::diffcore::TensorError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncoderError {
    #[error("backbone has not been pretrained")]
    Unpretrained,
    #[error("invalid target distribution: {0}")]
    InvalidDistribution(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
