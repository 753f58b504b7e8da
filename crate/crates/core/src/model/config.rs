use serde::{Deserialize, Serialize};

use super::{ModelError, Result};

/// How the two decoders' logits are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregator {
    Sum,
    Max,
    Mean,
    /// Learned per-city linear map of the two logits.
    Concat,
}

/// Where the `C · tanh(u)` clipping is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipTarget {
    /// Each decoder's logits, before aggregation.
    PerDecoder,
    /// The aggregated logits.
    Aggregated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub transformer_layers: usize,
    pub graph_layers: usize,
    pub feedforward_dim: usize,
    pub heads: usize,
    pub tanh_clip: f64,
    pub aggregator: Aggregator,
    #[serde(default = "default_clip_target")]
    pub clip_target: ClipTarget,
    /// Re-run both context encoders at every decoding step. When false the
    /// contexts are computed once from the start-step features.
    #[serde(default = "default_true")]
    pub context_per_step: bool,
}

fn default_clip_target() -> ClipTarget {
    ClipTarget::PerDecoder
}

fn default_true() -> bool {
    true
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 128,
            transformer_layers: 6,
            graph_layers: 3,
            feedforward_dim: 512,
            heads: 8,
            tanh_clip: 10.0,
            aggregator: Aggregator::Sum,
            clip_target: ClipTarget::PerDecoder,
            context_per_step: true,
        }
    }
}

impl ModelConfig {
    /// Desk-scale network used for smoke training and tests.
    pub fn smoke() -> Self {
        Self {
            hidden_dim: 32,
            transformer_layers: 2,
            graph_layers: 2,
            feedforward_dim: 64,
            heads: 4,
            ..Self::default()
        }
    }

    /// Tiny network for gradient checks.
    pub fn tiny(hidden_dim: usize) -> Self {
        Self {
            hidden_dim,
            transformer_layers: 1,
            graph_layers: 1,
            feedforward_dim: 2 * hidden_dim,
            heads: 2,
            ..Self::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field, message: &str| {
            Err(ModelError::Config {
                field,
                message: message.to_string(),
            })
        };
        for (field, v) in [
            ("hidden_dim", self.hidden_dim),
            ("feedforward_dim", self.feedforward_dim),
            ("heads", self.heads),
        ] {
            if v == 0 {
                return bad(field, "must be positive");
            }
        }
        if self.graph_layers == 0 {
            return bad("graph_layers", "must be at least 1");
        }
        if !self.hidden_dim.is_multiple_of(self.heads) {
            return bad("heads", "must divide hidden_dim");
        }
        if !(self.tanh_clip.is_finite() && self.tanh_clip > 0.0) {
            return bad("tanh_clip", "must be a positive finite number");
        }
        Ok(())
    }
}
