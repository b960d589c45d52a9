use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CandidateRecord, CandidateStatus, DatasetError, VqaRecord};
use crate::ffacot::{parse, serialize};
use crate::generator::PromptPool;
use crate::model::{self, Manifest, PromptKind};
use crate::review::{Decision, ReviewDecision};
use crate::util;

/// Applies the effective expert decision to every candidate that reached
/// review and returns the approved ones as VQA records (log order) together
/// with the updated candidate log.
pub fn finalize_dataset(
    candidates: &[CandidateRecord],
    decisions: &BTreeMap<String, ReviewDecision>,
) -> Result<(Vec<VqaRecord>, Vec<CandidateRecord>), DatasetError> {
    let mut updated = Vec::with_capacity(candidates.len());
    let mut vqa = Vec::new();
    for c in candidates {
        let mut c = c.clone();
        let reviewed = c
            .history
            .iter()
            .any(|h| h.status == CandidateStatus::PendingReview);
        if reviewed {
            let d = decisions
                .get(&c.candidate_id)
                .ok_or_else(|| DatasetError::MissingDecision(c.candidate_id.clone()))?;
            let (status, reason) = match d.decision {
                Decision::Approve => (CandidateStatus::Approved, None),
                Decision::Reject => (CandidateStatus::RejectedByExpert, d.reason.clone()),
            };
            if c.status != status || c.reject_reason != reason {
                c.transition(status, reason);
            }
            if status == CandidateStatus::Approved {
                let answer = c
                    .parsed
                    .as_ref()
                    .ok_or_else(|| DatasetError::InvalidRecord {
                        id: c.candidate_id.clone(),
                        reason: "approved candidate has no parsed answer".into(),
                    })?;
                vqa.push(VqaRecord {
                    image_id: c.record.id.clone(),
                    prompt: c.question.clone(),
                    answer_text: serialize(answer),
                });
            }
        }
        updated.push(c);
    }
    Ok((vqa, updated))
}

/// `x` rounded to the nearest integer, ties to even.
pub fn round_half_even(x: f64) -> usize {
    x.round_ties_even().max(0.0) as usize
}

/// Rewrites a seeded uniform subset of ⌊fraction·n⌉ records to hypothetical
/// prompts whose hypothesis is the record's true authenticity (taken from
/// the approved answer, which matched ground truth). Answers are untouched.
pub fn inject_hypothetical(
    records: &[VqaRecord],
    fraction: f64,
    seed: u64,
    pool: &PromptPool,
) -> Result<Vec<VqaRecord>, DatasetError> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(DatasetError::Config(format!(
            "fraction {fraction} outside [0, 1]"
        )));
    }
    let n = records.len();
    let k = round_half_even(fraction * n as f64).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = rand::seq::index::sample(&mut rng, n, k).into_vec();
    chosen.sort_unstable();
    let mut out = records.to_vec();
    for i in chosen {
        let r = &mut out[i];
        let truth = parse(&r.answer_text)
            .map_err(|e| DatasetError::InvalidRecord {
                id: r.image_id.clone(),
                reason: e.to_string(),
            })?
            .verdict();
        r.prompt = pool.sample_question(PromptKind::Hypothetical, Some(truth), &mut rng)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConversation {
    pub image: PathBuf,
    pub user: String,
    pub assistant: String,
}

/// Conversation-format JSONL for an external fine-tuning job. Image paths
/// are written relative to the output file.
pub fn export_finetune(
    records: &[VqaRecord],
    manifest: &Manifest,
    path: &Path,
) -> Result<Vec<FinetuneConversation>, DatasetError> {
    let base = model::parent_dir(path);
    let rows = records
        .iter()
        .map(|r| {
            let rec = manifest
                .get(&r.image_id)
                .ok_or_else(|| DatasetError::InvalidRecord {
                    id: r.image_id.clone(),
                    reason: "not in manifest".into(),
                })?;
            Ok(FinetuneConversation {
                image: model::relativize(&base, &rec.image_path),
                user: r.prompt.text.clone(),
                assistant: r.answer_text.clone(),
            })
        })
        .collect::<Result<Vec<_>, DatasetError>>()?;
    util::write_jsonl(path, &rows)?;
    Ok(rows)
}

pub fn read_finetune(path: &Path) -> Result<Vec<FinetuneConversation>, DatasetError> {
    Ok(util::read_jsonl(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ffacot::{AnalysisResult, FfaCotAnswer};
    use crate::model::{Authenticity, ForgeryType, Prompt};

    fn vqa(i: usize) -> VqaRecord {
        let (label, ft) = if i % 2 == 0 {
            (Authenticity::Real, ForgeryType::None)
        } else {
            (Authenticity::Fake, ForgeryType::EntireFaceSynthesis)
        };
        let a = FfaCotAnswer::new(
            format!("Face number {i}."),
            "Texture looks consistent.",
            AnalysisResult::new(label, 0.9, ft).unwrap(),
        )
        .unwrap();
        VqaRecord {
            image_id: format!("img{i:05}"),
            prompt: Prompt::non_hypothetical("Is this face real or fake?"),
            answer_text: a.raw_text,
        }
    }

    #[test]
    fn rounding_is_half_even() {
        assert_eq!(round_half_even(9999.0 / 3.0), 3333);
        assert_eq!(round_half_even(9000.0 / 3.0), 3000);
        assert_eq!(round_half_even(2.5), 2);
        assert_eq!(round_half_even(3.5), 4);
        assert_eq!(round_half_even(9000.0 * 0.3333), 3000);
    }

    #[test]
    fn injection_counts_and_hypotheses() {
        let pool = PromptPool::default();
        let recs: Vec<VqaRecord> = (0..9000).map(vqa).collect();
        let out = inject_hypothetical(&recs, 1.0 / 3.0, 4, &pool).unwrap();
        let hyp: Vec<_> = out
            .iter()
            .filter(|r| r.prompt.kind == PromptKind::Hypothetical)
            .collect();
        assert_eq!(hyp.len(), 3000);
        for (a, b) in recs.iter().zip(&out) {
            assert_eq!(a.answer_text, b.answer_text);
            if b.prompt.kind == PromptKind::Hypothetical {
                let truth = parse(&b.answer_text).unwrap().verdict();
                assert_eq!(b.prompt.hypothesis, Some(truth));
                assert!(b.prompt.is_consistent());
            }
        }
        assert_eq!(
            out,
            inject_hypothetical(&recs, 1.0 / 3.0, 4, &pool).unwrap()
        );
        assert_eq!(
            inject_hypothetical(&recs[..10], 0.0, 4, &pool).unwrap(),
            recs[..10].to_vec()
        );
        assert!(inject_hypothetical(&recs, 1.5, 4, &pool).is_err());
    }
}
