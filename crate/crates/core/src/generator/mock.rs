use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Generator, GeneratorError, GeneratorReply, GeneratorRequest};
use crate::ffacot::{AnalysisResult, FfaCotAnswer};
use crate::model::{Authenticity, ForgeryType, Manifest, PromptKind};

/// Distribution of the probability the mock writes into its answers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProbabilityLaw {
    Fixed {
        value: f64,
    },
    Uniform {
        low: f64,
        high: f64,
    },
    /// Beta(alpha, beta) rescaled onto `[low, high]`.
    Beta {
        alpha: f64,
        beta: f64,
        low: f64,
        high: f64,
    },
}

impl ProbabilityLaw {
    pub fn is_valid(&self) -> bool {
        let in_unit = |x: f64| (0.0..=1.0).contains(&x);
        match *self {
            ProbabilityLaw::Fixed { value } => in_unit(value),
            ProbabilityLaw::Uniform { low, high } => in_unit(low) && in_unit(high) && low <= high,
            ProbabilityLaw::Beta {
                alpha,
                beta,
                low,
                high,
            } => alpha > 0.0 && beta > 0.0 && in_unit(low) && in_unit(high) && low <= high,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let p = match *self {
            ProbabilityLaw::Fixed { value } => value,
            ProbabilityLaw::Uniform { low, high } => low + (high - low) * rng.random::<f64>(),
            ProbabilityLaw::Beta {
                alpha,
                beta,
                low,
                high,
            } => {
                let b = Beta::new(alpha, beta).expect("validated beta parameters");
                low + (high - low) * b.sample(rng)
            }
        };
        p.clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockPolicy {
    pub seed: u64,
    pub flip_rate_non_hypothetical: f64,
    pub follow_hypothesis_rate: f64,
    pub malformed_rate: f64,
    /// Chance that a correct fake verdict names the wrong forgery type.
    pub type_confusion_rate: f64,
    pub probability_law: ProbabilityLaw,
}

impl Default for MockPolicy {
    fn default() -> Self {
        Self {
            seed: 0,
            flip_rate_non_hypothetical: 0.0,
            follow_hypothesis_rate: 0.0,
            malformed_rate: 0.0,
            type_confusion_rate: 0.0,
            probability_law: ProbabilityLaw::Uniform {
                low: 0.6,
                high: 1.0,
            },
        }
    }
}

impl MockPolicy {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            (
                "flip_rate_non_hypothetical",
                self.flip_rate_non_hypothetical,
            ),
            ("follow_hypothesis_rate", self.follow_hypothesis_rate),
            ("malformed_rate", self.malformed_rate),
            ("type_confusion_rate", self.type_confusion_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("{name} = {v} outside [0, 1]"));
            }
        }
        if !self.probability_law.is_valid() {
            return Err("probability_law out of range".into());
        }
        Ok(())
    }
}

/// Ground truth the mock consults, keyed by image path.
pub type TruthTable = HashMap<PathBuf, (Authenticity, ForgeryType)>;

/// Seeded stand-in for a multimodal model. Output is a pure function of the
/// policy seed and the request (image content included, not its location).
#[derive(Debug, Clone)]
pub struct MockGenerator {
    policy: MockPolicy,
    truth: TruthTable,
    id: String,
}

impl MockGenerator {
    pub fn new(policy: MockPolicy, truth: TruthTable) -> Self {
        let id = format!("mock:seed={}", policy.seed);
        Self { policy, truth, id }
    }

    pub fn from_manifests<'a>(
        policy: MockPolicy,
        manifests: impl IntoIterator<Item = &'a Manifest>,
    ) -> Self {
        let truth = manifests
            .into_iter()
            .flat_map(|m| m.records.iter())
            .map(|r| (r.image_path.clone(), (r.authenticity, r.forgery_type)))
            .collect();
        Self::new(policy, truth)
    }

    pub fn policy(&self) -> &MockPolicy {
        &self.policy
    }

    fn request_rng(&self, request: &GeneratorRequest) -> Result<ChaCha8Rng, GeneratorError> {
        let mut h = Sha256::new();
        h.update(self.policy.seed.to_le_bytes());
        for text in request.texts() {
            h.update((text.len() as u64).to_le_bytes());
            h.update(text.as_bytes());
        }
        h.update([request.question.kind as u8]);
        h.update([request.question.hypothesis.map_or(2, |a| a.code())]);
        h.update(request.attempt.to_le_bytes());
        h.update(file_digest(&request.image_path)?);
        for r in &request.reference_images {
            h.update(file_digest(r)?);
        }
        let seed: [u8; 32] = h.finalize().into();
        Ok(ChaCha8Rng::from_seed(seed))
    }
}

fn file_digest(path: &Path) -> Result<[u8; 32], GeneratorError> {
    let bytes = std::fs::read(path).map_err(|e| {
        GeneratorError::BackendUnavailable(format!("cannot read {}: {e}", path.display()))
    })?;
    Ok(Sha256::digest(&bytes).into())
}

const DESCRIPTION_POSE: [&str; 4] = [
    "a frontal face",
    "a face turned slightly to the left",
    "a face turned slightly to the right",
    "a face tilted upward",
];
const DESCRIPTION_PERSON: [&str; 4] = [
    "a young adult",
    "a middle-aged person",
    "an older person",
    "a teenager",
];
const DESCRIPTION_LIGHT: [&str; 4] = [
    "soft indoor lighting",
    "bright daylight",
    "uneven studio lighting",
    "dim evening light",
];
const DESCRIPTION_QUALITY: [&str; 3] = [
    "The image is moderately sharp.",
    "The image shows mild compression.",
    "The image resolution is low.",
];

const REASONS_REAL: [&str; 6] = [
    "Skin texture looks natural with visible pores and fine wrinkles.",
    "Lighting and shadows fall consistently across the forehead, cheeks and neck.",
    "The jawline blends smoothly into the neck without seams.",
    "Both eyes show matching reflections and natural symmetry.",
    "Hair strands separate cleanly from the background.",
    "Teeth and lips have coherent detail and colour.",
];
const REASONS_IE: [&str; 4] = [
    "A faint blending seam runs along the jawline and cheeks.",
    "Skin tone inside the face region differs from the neck and ears.",
    "The facial region appears pasted with a slightly mismatched resolution.",
    "Edges around the face boundary flicker with colour inconsistencies.",
];
const REASONS_FAM: [&str; 4] = [
    "The mouth region shows warping that does not match the expression.",
    "The eyes look edited with unnatural sharpness compared to the cheeks.",
    "Local texture around the lips is smeared and overly smooth.",
    "Expression muscles do not move coherently with the edited attributes.",
];
const REASONS_EFS: [&str; 4] = [
    "The background contains distorted shapes typical of generated images.",
    "The skin is unnaturally smooth with a synthetic plastic sheen.",
    "Accessories and hair merge into the background in impossible ways.",
    "Symmetry is too perfect and fine details repeat in a generated pattern.",
];

const MALFORMED: [&str; 4] = [
    "I'm sorry, but I can't determine whether this face is real.",
    "Image description: A face.\nAnalysis result: unclear",
    "The face seems fake with probability high.",
    "Forgery reasoning: skin texture only.\nImage description: A face.",
];

fn reasons_for(verdict: Authenticity, ft: ForgeryType) -> &'static [&'static str] {
    match (verdict, ft) {
        (Authenticity::Real, _) => &REASONS_REAL,
        (_, ForgeryType::IdentityExchange) => &REASONS_IE,
        (_, ForgeryType::FacialAttributeManipulation) => &REASONS_FAM,
        _ => &REASONS_EFS,
    }
}

fn format_probability<R: Rng + ?Sized>(p: f64, rng: &mut R) -> (f64, String) {
    let pct = (p * 100.0).round();
    if rng.random_bool(0.3) {
        (pct / 100.0, format!("{pct}%"))
    } else {
        let v = (p * 100.0).round() / 100.0;
        (v, format!("{v}"))
    }
}

impl Generator for MockGenerator {
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn generate(&self, request: &GeneratorRequest) -> Result<GeneratorReply, GeneratorError> {
        let (truth, truth_type) = *self.truth.get(&request.image_path).ok_or_else(|| {
            GeneratorError::BackendUnavailable(format!(
                "mock has no ground truth for {}",
                request.image_path.display()
            ))
        })?;
        let mut rng = self.request_rng(request)?;
        let p = &self.policy;
        let reply = |text: String| GeneratorReply {
            text,
            backend_id: self.id.clone(),
            latency: 0.0,
        };

        if rng.random::<f64>() < p.malformed_rate {
            return Ok(reply(MALFORMED.choose(&mut rng).unwrap().to_string()));
        }

        let unprompted = |rng: &mut ChaCha8Rng| {
            if rng.random::<f64>() < p.flip_rate_non_hypothetical {
                truth.negate()
            } else {
                truth
            }
        };
        let verdict = match (request.question.kind, request.question.hypothesis) {
            (PromptKind::Hypothetical, Some(h)) => {
                if rng.random::<f64>() < p.follow_hypothesis_rate {
                    h
                } else {
                    unprompted(&mut rng)
                }
            }
            _ => unprompted(&mut rng),
        };

        let forgery_type = match verdict {
            Authenticity::Real => ForgeryType::None,
            Authenticity::Fake => {
                let confused = rng.random::<f64>() < p.type_confusion_rate;
                if truth_type != ForgeryType::None && !confused {
                    truth_type
                } else {
                    let pool: Vec<ForgeryType> = ForgeryType::FORGED
                        .into_iter()
                        .filter(|t| *t != truth_type)
                        .collect();
                    *pool.choose(&mut rng).unwrap()
                }
            }
        };

        let (prob, prob_text) = format_probability(p.probability_law.sample(&mut rng), &mut rng);

        let description = format!(
            "The image shows {} of {} under {}. {}",
            DESCRIPTION_POSE.choose(&mut rng).unwrap(),
            DESCRIPTION_PERSON.choose(&mut rng).unwrap(),
            DESCRIPTION_LIGHT.choose(&mut rng).unwrap(),
            DESCRIPTION_QUALITY.choose(&mut rng).unwrap(),
        );
        let bank = reasons_for(verdict, forgery_type);
        let n = rng.random_range(2..=3);
        let reasoning = bank
            .choose_multiple(&mut rng, n)
            .copied()
            .collect::<Vec<_>>()
            .join(" ");

        let answer = FfaCotAnswer::new(
            description,
            reasoning,
            AnalysisResult::new(verdict, prob, forgery_type).expect("mock result is consistent"),
        )
        .expect("mock answer is canonical");
        // Written with the sampled probability wording (decimal or percentage).
        let text = answer.raw_text.replace(
            &format!("probability: {prob}"),
            &format!("probability: {prob_text}"),
        );
        Ok(reply(text))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ffacot;
    use crate::model::Prompt;

    fn setup(policy: MockPolicy) -> (tempfile::TempDir, MockGenerator, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("a.png");
        image::RgbImage::from_pixel(8, 8, image::Rgb([10, 20, 30]))
            .save(&img)
            .unwrap();
        let mut truth = TruthTable::new();
        truth.insert(
            img.clone(),
            (Authenticity::Fake, ForgeryType::IdentityExchange),
        );
        (dir, MockGenerator::new(policy, truth), img)
    }

    fn request(img: &Path, question: Prompt) -> GeneratorRequest {
        GeneratorRequest {
            system_prompt: "sys".into(),
            forgery_specific_prompt: None,
            reference_prompt: None,
            reference_images: vec![],
            question,
            image_path: img.to_path_buf(),
            attempt: 0,
        }
    }

    #[test]
    fn deterministic_for_same_request() {
        let (_d, g, img) = setup(MockPolicy {
            seed: 7,
            flip_rate_non_hypothetical: 0.5,
            malformed_rate: 0.2,
            ..Default::default()
        });
        let req = request(&img, Prompt::non_hypothetical("Is it real or fake?"));
        assert_eq!(g.generate(&req).unwrap(), g.generate(&req).unwrap());
    }

    #[test]
    fn faithful_policy_reports_truth() {
        let (_d, g, img) = setup(MockPolicy::default());
        for q in ["q1", "q2", "q3"] {
            let reply = g
                .generate(&request(&img, Prompt::non_hypothetical(q)))
                .unwrap();
            let a = ffacot::parse(&reply.text).unwrap();
            assert_eq!(a.result.label, Authenticity::Fake);
            assert_eq!(a.result.forgery_type, ForgeryType::IdentityExchange);
        }
    }

    #[test]
    fn full_follow_obeys_hypothesis() {
        let (_d, g, img) = setup(MockPolicy {
            follow_hypothesis_rate: 1.0,
            ..Default::default()
        });
        let q = Prompt::hypothetical(Authenticity::Real, "Suppose it is real.");
        let a = ffacot::parse(&g.generate(&request(&img, q)).unwrap().text).unwrap();
        assert_eq!(a.result.label, Authenticity::Real);
        assert_eq!(a.result.forgery_type, ForgeryType::None);
    }

    #[test]
    fn always_malformed() {
        let (_d, g, img) = setup(MockPolicy {
            malformed_rate: 1.0,
            ..Default::default()
        });
        for i in 0..5 {
            let mut req = request(&img, Prompt::non_hypothetical("q"));
            req.attempt = i;
            assert!(ffacot::parse(&g.generate(&req).unwrap().text).is_err());
        }
    }

    #[test]
    fn unknown_image_is_unavailable() {
        let (_d, g, _img) = setup(MockPolicy::default());
        let req = request(Path::new("/nonexistent.png"), Prompt::non_hypothetical("q"));
        assert!(matches!(
            g.generate(&req),
            Err(GeneratorError::BackendUnavailable(_))
        ));
    }

    #[test]
    fn law_sampling_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let law = ProbabilityLaw::Beta {
            alpha: 2.0,
            beta: 5.0,
            low: 0.3,
            high: 0.9,
        };
        for _ in 0..1000 {
            let p = law.sample(&mut rng);
            assert!((0.3..=0.9).contains(&p));
        }
    }
}
