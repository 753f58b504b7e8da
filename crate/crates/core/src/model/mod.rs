//! The hybrid pointer network.
//!
//! Each decoding step extracts a feature context relative to the current
//! city, encodes it twice (a transformer encoder with a learned start token
//! and a graph embedding layer), advances an LSTM over the current city's
//! embedding, and scores every city with two pointer decoders, one per
//! context. The two logit vectors are combined by an [`Aggregator`] into
//! the distribution over unvisited cities.

mod config;
mod features;
mod io;
mod network;
mod rollout;

use hpn_autograd::checkpoint::CheckpointError;
use hpn_autograd::TensorError;
use thiserror::Error;

use crate::error::TspError;

pub use config::{Aggregator, ClipTarget, ModelConfig};
pub use features::{extract_features, start_features, FeatureContext};
pub use io::config_from_meta;
pub use network::{
    Bound, DecoderLayout, EncoderLayerLayout, EncoderOutputs, GraphLayerLayout, HpnModel, Layout,
    LstmLayout, LstmState, StepOutput, TransformerPass,
};
pub use rollout::{DecodeMode, Rollout, StepDistribution, SAMPLE_FLOOR};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {field}: {message}")]
    Config { field: &'static str, message: String },
    #[error("every city is already visited")]
    AllVisited,
    #[error("checkpoint does not match the model: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Tsp(#[from] TspError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("checkpoint metadata: {0}")]
    Meta(#[from] serde_json::Error),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;
