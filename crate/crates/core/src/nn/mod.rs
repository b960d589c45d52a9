//! Minimal dense-tensor toolkit: matrices, parameter storage, a reverse-mode
//! tape, and the attention building blocks used by the MIDS network.

mod layers;
mod matrix;
mod params;
mod tape;

pub use layers::{AttentionOutput, LayerNormParams, MultiHeadAttention};
pub use matrix::{softmax_rows, Matrix};
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var, LAYER_NORM_EPS, LOG_CLAMP};
