//! Face forgery analysis toolkit: structured analysis answers, LLM-assisted
//! dataset curation with expert review, the MIDS image–answer matching
//! network, the hypothesis-driven answer selection workflow and benchmark
//! metrics.
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root pick `f64`, which is what the training and inference
//! pipelines use.

pub mod bench;
pub mod config;
pub mod dataset;
pub mod decision;
pub mod demo;
pub mod ffacot;
pub mod generator;
pub mod mids;
pub mod model;
pub mod nn;
pub mod review;
pub mod scalar;
pub mod synth;
pub mod trainer;
pub mod util;

pub use model::{
    assign_class_label, load_manifest, save_manifest, Authenticity, FaceRecord, ForgeryType,
    Manifest, Prompt, PromptKind, Split,
};
pub use scalar::Scalar;

/// Double-precision MIDS, used by training and inference.
pub type Mids = mids::MidsModel<f64>;
pub type MidsF32 = mids::MidsModel<f32>;
pub type MidsOutput = mids::MidsOutput<f64>;
pub type Matrix = nn::Matrix<f64>;
