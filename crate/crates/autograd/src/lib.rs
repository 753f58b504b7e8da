//! Minimal dense-matrix autodiff engine.
//!
//! Values are row-major `f64` matrices ([`Tensor`]). Computations are
//! recorded on a [`Tape`] and differentiated in reverse with
//! [`Tape::backward`]. A tape built with [`Tape::no_grad`] evaluates the same
//! operations without recording anything, which is what inference rollouts
//! use.
//!
//! Learnable parameters live in a [`ParamStore`], are bound onto a tape per
//! forward pass, and are updated with [`adam_step`]. Parameter sets can be
//! persisted with the [`checkpoint`] container.

mod adam;
pub mod checkpoint;
mod error;
mod norm;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use error::{Result, TensorError};
pub use norm::{BatchNormMode, RunningStats, BATCH_NORM_EPS, BATCH_NORM_MOMENTUM};
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
