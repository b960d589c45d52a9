use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::Deserialize;
use thiserror::Error;

use super::GeneratorRequest;
use crate::model::{Authenticity, FaceRecord, ForgeryType, Prompt, PromptKind};

const DEFAULT_PROMPTS: &str = include_str!("../../assets/prompts_v1.toml");

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("inference request would leak ground truth: {0}")]
    Leakage(String),
    #[error("hypothetical prompt requires a hypothesis")]
    MissingHypothesis,
    #[error("non-hypothetical prompt cannot carry a hypothesis")]
    UnexpectedHypothesis,
    #[error("invalid prompt file: {0}")]
    InvalidPool(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BuildMode {
    /// Dataset construction: ground truth and references are injected.
    Construction,
    /// Deployment: the generator sees only the image and a question.
    Inference,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConstructionTemplates {
    real: String,
    fake: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReferenceTemplates {
    identity_exchange: String,
    facial_attribute_manipulation: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct HypotheticalTemplates {
    real: Vec<String>,
    fake: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct QuestionTemplates {
    non_hypothetical: Vec<String>,
    hypothetical: HypotheticalTemplates,
}

/// Versioned prompt templates: system prompt, construction priors,
/// reference prompts and the question pool.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptPool {
    pub version: String,
    system: String,
    construction: ConstructionTemplates,
    reference: ReferenceTemplates,
    questions: QuestionTemplates,
}

impl Default for PromptPool {
    fn default() -> Self {
        Self::from_toml(DEFAULT_PROMPTS).expect("bundled prompt file is valid")
    }
}

impl PromptPool {
    pub fn from_toml(text: &str) -> Result<Self, PromptError> {
        let pool: PromptPool =
            toml::from_str(text).map_err(|e| PromptError::InvalidPool(e.to_string()))?;
        pool.validate()?;
        Ok(pool)
    }

    pub fn load(path: &Path) -> Result<Self, PromptError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PromptError::InvalidPool(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    fn validate(&self) -> Result<(), PromptError> {
        let q = &self.questions;
        if q.non_hypothetical.len() < 4 {
            return Err(PromptError::InvalidPool(
                "need at least 4 non-hypothetical questions".into(),
            ));
        }
        for (h, list) in [
            (Authenticity::Real, &q.hypothetical.real),
            (Authenticity::Fake, &q.hypothetical.fake),
        ] {
            if list.len() < 2 {
                return Err(PromptError::InvalidPool(format!(
                    "need at least 2 hypothetical templates for `{h}`"
                )));
            }
            if let Some(bad) = list
                .iter()
                .find(|t| !t.to_ascii_lowercase().contains(h.as_str()))
            {
                return Err(PromptError::InvalidPool(format!(
                    "hypothetical template lacks `{h}` wording: {bad}"
                )));
            }
        }
        if !self.construction.fake.contains("{forgery_type}") {
            return Err(PromptError::InvalidPool(
                "fake construction prompt lacks {forgery_type}".into(),
            ));
        }
        Ok(())
    }

    pub fn system_prompt(&self) -> &str {
        self.system.trim()
    }

    pub fn non_hypothetical_questions(&self) -> &[String] {
        &self.questions.non_hypothetical
    }

    pub fn hypothetical_templates(&self, hypothesis: Authenticity) -> &[String] {
        match hypothesis {
            Authenticity::Real => &self.questions.hypothetical.real,
            Authenticity::Fake => &self.questions.hypothetical.fake,
        }
    }

    /// Ground-truth prior for construction mode.
    pub fn forgery_specific_prompt(
        &self,
        label: Authenticity,
        forgery_type: ForgeryType,
    ) -> String {
        match label {
            Authenticity::Real => self.construction.real.clone(),
            Authenticity::Fake => self
                .construction
                .fake
                .replace("{forgery_type}", forgery_type.phrase()),
        }
    }

    pub fn reference_prompt(&self, forgery_type: ForgeryType) -> Option<&str> {
        match forgery_type {
            ForgeryType::IdentityExchange => Some(&self.reference.identity_exchange),
            ForgeryType::FacialAttributeManipulation => {
                Some(&self.reference.facial_attribute_manipulation)
            }
            _ => None,
        }
    }

    /// Every string a construction request could inject about the ground truth.
    pub fn ground_truth_strings(&self) -> Vec<String> {
        let mut out = vec![self.forgery_specific_prompt(Authenticity::Real, ForgeryType::None)];
        for t in ForgeryType::FORGED {
            out.push(self.forgery_specific_prompt(Authenticity::Fake, t));
        }
        out.push(self.reference.identity_exchange.clone());
        out.push(self.reference.facial_attribute_manipulation.clone());
        out
    }

    pub fn sample_question<R: Rng + ?Sized>(
        &self,
        kind: PromptKind,
        hypothesis: Option<Authenticity>,
        rng: &mut R,
    ) -> Result<Prompt, PromptError> {
        match (kind, hypothesis) {
            (PromptKind::NonHypothetical, None) => Ok(Prompt::non_hypothetical(
                self.questions
                    .non_hypothetical
                    .choose(rng)
                    .expect("validated non-empty")
                    .clone(),
            )),
            (PromptKind::NonHypothetical, Some(_)) => Err(PromptError::UnexpectedHypothesis),
            (PromptKind::Hypothetical, None) => Err(PromptError::MissingHypothesis),
            (PromptKind::Hypothetical, Some(h)) => Ok(Prompt::hypothetical(
                h,
                self.hypothetical_templates(h)
                    .choose(rng)
                    .expect("validated non-empty")
                    .clone(),
            )),
        }
    }

    /// Assembles a generator request for `record`.
    pub fn build_request<R: Rng + ?Sized>(
        &self,
        record: &FaceRecord,
        mode: BuildMode,
        kind: PromptKind,
        hypothesis: Option<Authenticity>,
        rng: &mut R,
    ) -> Result<GeneratorRequest, PromptError> {
        let question = self.sample_question(kind, hypothesis, rng)?;
        let request = match mode {
            BuildMode::Construction => {
                let (reference_prompt, reference_images) = match &record.reference_path {
                    Some(p) if record.forgery_type.takes_reference() => (
                        self.reference_prompt(record.forgery_type)
                            .map(str::to_string),
                        vec![p.clone()],
                    ),
                    _ => (None, Vec::new()),
                };
                GeneratorRequest {
                    system_prompt: self.system_prompt().to_string(),
                    forgery_specific_prompt: Some(
                        self.forgery_specific_prompt(record.authenticity, record.forgery_type),
                    ),
                    reference_prompt,
                    reference_images,
                    question,
                    image_path: record.image_path.clone(),
                    attempt: 0,
                }
            }
            BuildMode::Inference => self.inference_request_with(&record.image_path, question)?,
        };
        Ok(request)
    }

    /// Inference-mode request for a bare image: no priors, no references.
    pub fn inference_request<R: Rng + ?Sized>(
        &self,
        image_path: &Path,
        kind: PromptKind,
        hypothesis: Option<Authenticity>,
        rng: &mut R,
    ) -> Result<GeneratorRequest, PromptError> {
        let question = self.sample_question(kind, hypothesis, rng)?;
        self.inference_request_with(image_path, question)
    }

    fn inference_request_with(
        &self,
        image_path: &Path,
        question: Prompt,
    ) -> Result<GeneratorRequest, PromptError> {
        let request = GeneratorRequest {
            system_prompt: self.system_prompt().to_string(),
            forgery_specific_prompt: None,
            reference_prompt: None,
            reference_images: Vec::new(),
            question,
            image_path: image_path.to_path_buf(),
            attempt: 0,
        };
        self.check_no_leakage(&request)?;
        Ok(request)
    }

    /// Rejects an inference request that carries construction-only material.
    pub fn check_no_leakage(&self, request: &GeneratorRequest) -> Result<(), PromptError> {
        if request.forgery_specific_prompt.is_some()
            || request.reference_prompt.is_some()
            || !request.reference_images.is_empty()
        {
            return Err(PromptError::Leakage(
                "construction-only fields present".into(),
            ));
        }
        let truth = self.ground_truth_strings();
        for text in request.texts() {
            if let Some(hit) = truth.iter().find(|t| text.contains(t.as_str())) {
                return Err(PromptError::Leakage(format!("found `{hit}`")));
            }
        }
        Ok(())
    }
}
