//! MIDS: scores how well a (masked) analysis answer matches a face image by
//! predicting the joint (image authenticity, answer verdict) class.

mod checkpoint;
mod encoders;
mod heatmap;
mod network;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_SCHEMA_VERSION};
pub use encoders::{
    patch_features, prepare_image, tokenize, TextEncoder, VisionEncoder, POOL_CELLS,
};
pub use heatmap::{render_overlay, upsample_bilinear, Heatmap, HeatmapStream};
pub use network::{
    cross_entropy, AggStream, Encoded, FusionPair, MidsInput, MidsModel, MidsOutput, Trace,
    HF_SLOTS, NUM_CLASSES,
};

#[derive(Debug, Error)]
pub enum MidsError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid MIDS config: {0}")]
    Config(String),
    #[error("answer text is not a masked analysis: {0}")]
    NotMasked(String),
    #[error("model has not been trained")]
    UntrainedModel,
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: String, reason: String },
    #[error("image {path}: {reason}")]
    Image { path: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Network and toy-encoder hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MidsConfig {
    /// Fusion width (equals the text encoder width).
    pub d: usize,
    pub heads: usize,
    /// Query-aggregation refinement rounds.
    pub agg_rounds: usize,
    /// Self-attention blocks in the classification head.
    pub sa_blocks: usize,
    pub text_len: usize,
    pub text_vocab: usize,
    pub vision_width: usize,
    pub vision_layers: usize,
    /// Patches per image side.
    pub grid: usize,
    pub image_size: u32,
    /// Train the last two vision blocks as well.
    pub unfreeze_vision_tail: bool,
    pub encoder_seed: u64,
    pub init_seed: u64,
    pub text_encoder: String,
    pub vision_encoder: String,
}

pub const TOY_TEXT_ENCODER: &str = "toy-hashed-text-v1";
pub const TOY_VISION_ENCODER: &str = "toy-patch-transformer-v1";

impl Default for MidsConfig {
    fn default() -> Self {
        Self {
            d: 32,
            heads: 4,
            agg_rounds: 2,
            sa_blocks: 3,
            text_len: 64,
            text_vocab: 2048,
            vision_width: 48,
            vision_layers: 4,
            grid: 4,
            image_size: 224,
            unfreeze_vision_tail: true,
            encoder_seed: 17,
            init_seed: 1,
            text_encoder: TOY_TEXT_ENCODER.into(),
            vision_encoder: TOY_VISION_ENCODER.into(),
        }
    }
}

impl MidsConfig {
    pub fn validate(&self) -> Result<(), MidsError> {
        let bad = |m: String| Err(MidsError::Config(m));
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return bad(format!(
                "d={} must be a positive multiple of heads={}",
                self.d, self.heads
            ));
        }
        if self.vision_layers < 2 {
            return bad("vision_layers must be at least 2".into());
        }
        if self.text_len == 0 || self.text_vocab < 2 || self.vision_width == 0 {
            return bad("text_len, text_vocab and vision_width must be positive".into());
        }
        if self.grid == 0 || self.image_size as usize % (self.grid * POOL_CELLS) != 0 {
            return bad(format!(
                "image_size {} must split into {}x{} patches of {POOL_CELLS}x{POOL_CELLS} cells",
                self.image_size, self.grid, self.grid
            ));
        }
        if self.text_encoder != TOY_TEXT_ENCODER || self.vision_encoder != TOY_VISION_ENCODER {
            return bad(format!(
                "unsupported encoders {}/{}; available: {TOY_TEXT_ENCODER}/{TOY_VISION_ENCODER}",
                self.text_encoder, self.vision_encoder
            ));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        self.grid * self.grid
    }
}
