//! Answer-triplet generation, match scoring and answer selection.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::item_seed;
use crate::ffacot::{parse, AnswerError, FfaCotAnswer};
use crate::generator::{Generator, GeneratorError, PromptError, PromptPool};
use crate::mids::{MidsError, MidsModel, MidsOutput};
use crate::model::{Authenticity, Manifest, Prompt, PromptKind};
use crate::scalar::Scalar;
use crate::util;

/// Guards the ratio in [`match_score`] against a zero denominator.
pub const MATCH_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum DecisionError {
    #[error("generator failed on {id}: {source}")]
    Generator {
        id: String,
        #[source]
        source: GeneratorError,
    },
    #[error("{role} answer for {id} did not parse after a retry: {source}")]
    Parse {
        id: String,
        role: AnswerRole,
        #[source]
        source: AnswerError,
    },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Mids(#[from] MidsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl DecisionError {
    /// Transport-level failures, as opposed to a bad answer for one image.
    pub fn is_backend(&self) -> bool {
        matches!(self, DecisionError::Generator { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerRole {
    Anchor,
    Positive,
    Negative,
}

impl std::fmt::Display for AnswerRole {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AnswerRole::Anchor => "anchor",
            AnswerRole::Positive => "positive",
            AnswerRole::Negative => "negative",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Difficulty {
    Easy,
    Hard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleAnswer {
    pub role: AnswerRole,
    pub prompt: Prompt,
    pub answer: FfaCotAnswer,
}

/// Anchor, positive and negative answers, in that order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerSet {
    pub image_id: String,
    pub answers: [RoleAnswer; 3],
}

impl AnswerSet {
    /// Easy iff all three verdicts agree.
    pub fn difficulty(&self) -> Difficulty {
        let v = self.answers[0].answer.verdict();
        if self.answers.iter().all(|a| a.answer.verdict() == v) {
            Difficulty::Easy
        } else {
            Difficulty::Hard
        }
    }

    pub fn anchor_verdict(&self) -> Authenticity {
        self.answers[0].answer.verdict()
    }
}

/// Queries the generator for the anchor / positive / negative answers of
/// one image under inference-mode prompts.
pub struct TripletGenerator<'a> {
    pub generator: &'a dyn Generator,
    pub pool: &'a PromptPool,
    pub seed: u64,
}

impl TripletGenerator<'_> {
    fn ask(
        &self,
        image_id: &str,
        image_path: &Path,
        role: AnswerRole,
        hypothesis: Option<Authenticity>,
        rng: &mut ChaCha8Rng,
    ) -> Result<RoleAnswer, DecisionError> {
        let kind = if hypothesis.is_some() {
            PromptKind::Hypothetical
        } else {
            PromptKind::NonHypothetical
        };
        let mut request = self
            .pool
            .inference_request(image_path, kind, hypothesis, rng)?;
        let mut last = None;
        for _ in 0..2 {
            let reply =
                self.generator
                    .generate(&request)
                    .map_err(|source| DecisionError::Generator {
                        id: image_id.to_string(),
                        source,
                    })?;
            match parse(&reply.text) {
                Ok(answer) => {
                    return Ok(RoleAnswer {
                        role,
                        prompt: request.question,
                        answer,
                    })
                }
                Err(e) => last = Some(e),
            }
            request = request.retry();
        }
        Err(DecisionError::Parse {
            id: image_id.to_string(),
            role,
            source: last.expect("at least one attempt"),
        })
    }

    pub fn generate(&self, image_id: &str, image_path: &Path) -> Result<AnswerSet, DecisionError> {
        let mut rng = ChaCha8Rng::from_seed(item_seed(self.seed, "triplet", image_id));
        let anchor = self.ask(image_id, image_path, AnswerRole::Anchor, None, &mut rng)?;
        let v = anchor.answer.verdict();
        let positive = self.ask(
            image_id,
            image_path,
            AnswerRole::Positive,
            Some(v),
            &mut rng,
        )?;
        let negative = self.ask(
            image_id,
            image_path,
            AnswerRole::Negative,
            Some(v.negate()),
            &mut rng,
        )?;
        Ok(AnswerSet {
            image_id: image_id.to_string(),
            answers: [anchor, positive, negative],
        })
    }
}

/// How strongly the joint posterior supports an answer with `verdict`:
/// real → m₀ / (m₀ + m₂), fake → m₃ / (m₃ + m₁).
pub fn match_score<T: Scalar>(m: &[T; 4], verdict: Authenticity) -> T {
    let eps = T::of(MATCH_EPS);
    match verdict {
        Authenticity::Real => m[0] / (m[0] + m[2] + eps),
        Authenticity::Fake => m[3] / (m[3] + m[1] + eps),
    }
}

/// Index of the highest score; ties go to the earliest entry.
pub fn select_best(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredAnswer {
    pub role: AnswerRole,
    pub prompt: Prompt,
    pub answer: FfaCotAnswer,
    pub m: [f64; 4],
    pub match_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub image_id: String,
    pub label: Authenticity,
    pub best_role: AnswerRole,
    pub best_answer: FfaCotAnswer,
    pub match_score: f64,
    pub difficulty: Difficulty,
    /// Anchor, positive, negative.
    pub per_answer: Vec<ScoredAnswer>,
}

impl Verdict {
    pub fn anchor_label(&self) -> Authenticity {
        self.per_answer[0].answer.verdict()
    }

    /// Fake-ness score: S_m of the chosen answer if it says fake, else 1 − S_m.
    pub fn fake_score(&self) -> f64 {
        match self.label {
            Authenticity::Fake => self.match_score,
            Authenticity::Real => 1.0 - self.match_score,
        }
    }
}

/// Scores each answer against the image and picks the best one.
pub fn decide(set: &AnswerSet, outputs: &[MidsOutput<f64>; 3]) -> Verdict {
    let per_answer: Vec<ScoredAnswer> = set
        .answers
        .iter()
        .zip(outputs)
        .map(|(a, o)| ScoredAnswer {
            role: a.role,
            prompt: a.prompt.clone(),
            answer: a.answer.clone(),
            m: o.m,
            match_score: match_score(&o.m, a.answer.verdict()),
        })
        .collect();
    let scores: Vec<f64> = per_answer.iter().map(|s| s.match_score).collect();
    let best = &per_answer[select_best(&scores)];
    Verdict {
        image_id: set.image_id.clone(),
        label: best.answer.verdict(),
        best_role: best.role,
        best_answer: best.answer.clone(),
        match_score: best.match_score,
        difficulty: set.difficulty(),
        per_answer,
    }
}

pub fn score_answers<T: Scalar>(
    model: &MidsModel<T>,
    image_path: &Path,
    set: &AnswerSet,
) -> Result<[MidsOutput<f64>; 3], DecisionError> {
    let image = model.load_image(image_path)?;
    let mut out = [MidsOutput {
        m: [0.0; 4],
        logits: [0.0; 4],
    }; 3];
    for (o, a) in out.iter_mut().zip(&set.answers) {
        let r = model.predict(&model.input_for_answer(&image, &a.answer)?)?;
        *o = MidsOutput {
            m: r.m.map(|v| v.to_f64_lossy()),
            logits: r.logits.map(|v| v.to_f64_lossy()),
        };
    }
    Ok(out)
}

/// The full workflow for one image.
pub fn analyze<T: Scalar>(
    image_id: &str,
    image_path: &Path,
    triplets: &TripletGenerator<'_>,
    model: &MidsModel<T>,
) -> Result<Verdict, DecisionError> {
    let set = triplets.generate(image_id, image_path)?;
    let outputs = score_answers(model, image_path, &set)?;
    Ok(decide(&set, &outputs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictLine {
    pub image_id: String,
    pub verdict: Option<Verdict>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutcome {
    /// One line per manifest record, in manifest order.
    pub lines: Vec<VerdictLine>,
}

impl BatchOutcome {
    pub fn verdicts(&self) -> HashMap<String, Verdict> {
        self.lines
            .iter()
            .filter_map(|l| l.verdict.clone().map(|v| (l.image_id.clone(), v)))
            .collect()
    }

    pub fn failures(&self) -> Vec<&VerdictLine> {
        self.lines.iter().filter(|l| l.verdict.is_none()).collect()
    }
}

/// Runs [`analyze`] over a manifest. Progress goes to `<out>.partial` line by
/// line; on resume, finished images are kept and failed ones retried. The
/// final file lists every image in manifest order.
pub fn batch_analyze<T: Scalar>(
    manifest: &Manifest,
    triplets: &TripletGenerator<'_>,
    model: &MidsModel<T>,
    out: &Path,
    resume: bool,
    width: usize,
) -> Result<BatchOutcome, DecisionError> {
    let mut partial = out.as_os_str().to_owned();
    partial.push(".partial");
    let partial = std::path::PathBuf::from(partial);
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    if !resume {
        let _ = std::fs::remove_file(&partial);
    }
    util::repair_jsonl(&partial)?;
    let mut done: HashMap<String, VerdictLine> = util::read_jsonl::<VerdictLine>(&partial)?
        .into_iter()
        .filter(|l| l.verdict.is_some())
        .map(|l| (l.image_id.clone(), l))
        .collect();
    let todo: Vec<_> = manifest
        .records
        .iter()
        .filter(|r| !done.contains_key(&r.id))
        .collect();
    for chunk in todo.chunks(width.max(1)) {
        let results = util::fan_out(chunk, width, |r| {
            analyze(&r.id, &r.image_path, triplets, model)
        });
        for (r, res) in chunk.iter().zip(results) {
            let line = match res {
                Ok(v) => VerdictLine {
                    image_id: r.id.clone(),
                    verdict: Some(v),
                    error: None,
                },
                Err(e) => VerdictLine {
                    image_id: r.id.clone(),
                    verdict: None,
                    error: Some(e.to_string()),
                },
            };
            util::append_jsonl(&partial, &line)?;
            done.insert(r.id.clone(), line);
        }
    }
    let lines: Vec<VerdictLine> = manifest
        .records
        .iter()
        .map(|r| done.remove(&r.id).expect("every record processed"))
        .collect();
    util::write_jsonl(out, &lines)?;
    Ok(BatchOutcome { lines })
}

pub fn read_verdicts(path: &Path) -> Result<Vec<VerdictLine>, DecisionError> {
    Ok(util::read_jsonl(path)?)
}
