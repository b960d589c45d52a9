//! Answer generators: request assembly, the backend trait, and the three
//! backends (seeded mock, remote HTTP client, local command adapter).

mod local;
mod mock;
mod prompts;
mod remote;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use local::LocalCommandGenerator;
pub use mock::{MockGenerator, MockPolicy, ProbabilityLaw, TruthTable};
pub use prompts::{BuildMode, PromptError, PromptPool};
pub use remote::{RemoteConfig, RemoteGenerator};

use crate::model::Prompt;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorRequest {
    pub system_prompt: String,
    pub forgery_specific_prompt: Option<String>,
    pub reference_prompt: Option<String>,
    pub reference_images: Vec<PathBuf>,
    pub question: Prompt,
    pub image_path: PathBuf,
    /// Retry counter; lets a stochastic backend produce a fresh sample for the same prompt.
    #[serde(default)]
    pub attempt: u32,
}

impl GeneratorRequest {
    /// Every prompt string sent to the backend, in send order.
    pub fn texts(&self) -> Vec<&str> {
        let mut out = vec![self.system_prompt.as_str()];
        out.extend(self.forgery_specific_prompt.as_deref());
        out.extend(self.reference_prompt.as_deref());
        out.push(self.question.text.as_str());
        out
    }

    pub fn retry(&self) -> Self {
        Self {
            attempt: self.attempt + 1,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorReply {
    pub text: String,
    pub backend_id: String,
    pub latency: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeneratorError {
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("rate limited (retry after {retry_after:?}s)")]
    RateLimited { retry_after: Option<f64> },
    #[error("authentication failed: {0}")]
    Auth(String),
}

/// Anything that turns a request into raw answer text.
pub trait Generator: Send + Sync {
    fn backend_id(&self) -> &str;
    fn generate(&self, request: &GeneratorRequest) -> Result<GeneratorReply, GeneratorError>;
}

impl<G: Generator + ?Sized> Generator for Box<G> {
    fn backend_id(&self) -> &str {
        (**self).backend_id()
    }
    fn generate(&self, request: &GeneratorRequest) -> Result<GeneratorReply, GeneratorError> {
        (**self).generate(request)
    }
}

impl<G: Generator + ?Sized> Generator for std::sync::Arc<G> {
    fn backend_id(&self) -> &str {
        (**self).backend_id()
    }
    fn generate(&self, request: &GeneratorRequest) -> Result<GeneratorReply, GeneratorError> {
        (**self).generate(request)
    }
}
