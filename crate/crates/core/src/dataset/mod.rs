//! Dataset construction: candidate generation with the bias-mitigation
//! filters, expert-review finalisation, hypothetical-prompt injection,
//! fine-tune export and triplet mining.

mod build;
mod export;
mod mine;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use build::{
    apply_filters, build_dataset, BuildConfig, BuildOutcome, FilterOutcome, CANDIDATE_LOG_FILE,
    QUERIED_SET_FILE,
};
pub use export::{
    export_finetune, finalize_dataset, inject_hypothetical, read_finetune, round_half_even,
    FinetuneConversation,
};
pub use mine::{mine_triplets, MineOutcome, MinedEntry, MINED_LOG_FILE};

use crate::decision::DecisionError;
use crate::ffacot::FfaCotAnswer;
use crate::generator::{GeneratorError, PromptError};
use crate::model::{self, FaceRecord, ManifestError, Prompt};
use crate::util;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("generator failed on {id}: {source}")]
    Generator {
        id: String,
        #[source]
        source: GeneratorError,
    },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Decision(#[from] DecisionError),
    #[error("candidate {0} is pending review but has no decision")]
    MissingDecision(String),
    #[error("record {id}: {reason}")]
    InvalidRecord { id: String, reason: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{0} already holds a run; resume it or pick another directory")]
    AlreadyExists(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CandidateStatus {
    PendingFilter,
    RejectedFormat,
    RejectedWrongResult,
    RejectedLowProb,
    PendingReview,
    Approved,
    RejectedByExpert,
}

impl CandidateStatus {
    /// Position along the pipeline; status changes never move backwards.
    pub fn stage(self) -> u8 {
        match self {
            CandidateStatus::PendingFilter => 0,
            CandidateStatus::RejectedFormat
            | CandidateStatus::RejectedWrongResult
            | CandidateStatus::RejectedLowProb
            | CandidateStatus::PendingReview => 1,
            CandidateStatus::Approved | CandidateStatus::RejectedByExpert => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CandidateStatus::PendingFilter => "PENDING_FILTER",
            CandidateStatus::RejectedFormat => "REJECTED_FORMAT",
            CandidateStatus::RejectedWrongResult => "REJECTED_WRONG_RESULT",
            CandidateStatus::RejectedLowProb => "REJECTED_LOW_PROB",
            CandidateStatus::PendingReview => "PENDING_REVIEW",
            CandidateStatus::Approved => "APPROVED",
            CandidateStatus::RejectedByExpert => "REJECTED_BY_EXPERT",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        use CandidateStatus::*;
        [
            PendingFilter,
            RejectedFormat,
            RejectedWrongResult,
            RejectedLowProb,
            PendingReview,
            Approved,
            RejectedByExpert,
        ]
        .into_iter()
        .find(|st| st.as_str().eq_ignore_ascii_case(s.trim()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatusChange {
    pub status: CandidateStatus,
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub candidate_id: String,
    pub record: FaceRecord,
    pub question: Prompt,
    pub raw_reply: String,
    pub parsed: Option<FfaCotAnswer>,
    pub status: CandidateStatus,
    pub reject_reason: Option<String>,
    pub backend_id: String,
    /// Every status the candidate has held, oldest first.
    pub history: Vec<StatusChange>,
}

impl CandidateRecord {
    pub(crate) fn transition(&mut self, status: CandidateStatus, reason: Option<String>) {
        debug_assert!(
            status.stage() >= self.status.stage(),
            "status moved backwards"
        );
        self.status = status;
        self.reject_reason = reason.clone();
        self.history.push(StatusChange { status, reason });
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqaRecord {
    pub image_id: String,
    pub prompt: Prompt,
    /// Canonical analysis text.
    pub answer_text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletRecord {
    pub image_id: String,
    pub anchor: FfaCotAnswer,
    pub positive: FfaCotAnswer,
    pub negative: FfaCotAnswer,
    pub anchor_prompt: Prompt,
    pub positive_prompt: Prompt,
    pub negative_prompt: Prompt,
}

impl TripletRecord {
    pub fn answers(&self) -> [&FfaCotAnswer; 3] {
        [&self.anchor, &self.positive, &self.negative]
    }

    /// Positive follows the anchor verdict, negative opposes it.
    pub fn is_consistent(&self) -> bool {
        let v = self.anchor.verdict();
        self.positive_prompt.hypothesis == Some(v)
            && self.negative_prompt.hypothesis == Some(v.negate())
            && self.anchor_prompt.hypothesis.is_none()
    }
}

/// Reads a candidate log, resolving record paths against the log's directory.
pub fn read_candidate_log(path: &Path) -> Result<Vec<CandidateRecord>, DatasetError> {
    let base = model::parent_dir(path);
    let mut out: Vec<CandidateRecord> = util::read_jsonl(path)?;
    for c in &mut out {
        c.record.image_path = model::absolutize(&base, &c.record.image_path);
        c.record.reference_path = c
            .record
            .reference_path
            .as_deref()
            .map(|p| model::absolutize(&base, p));
    }
    Ok(out)
}

fn portable(c: &CandidateRecord, log_path: &Path) -> CandidateRecord {
    let base = model::parent_dir(log_path);
    let mut c = c.clone();
    c.record.image_path = model::relativize(&base, &c.record.image_path);
    c.record.reference_path = c
        .record
        .reference_path
        .as_deref()
        .map(|p| model::relativize(&base, p));
    c
}

pub fn append_candidate(path: &Path, c: &CandidateRecord) -> Result<(), DatasetError> {
    Ok(util::append_jsonl(path, &portable(c, path))?)
}

pub fn write_candidate_log(path: &Path, cs: &[CandidateRecord]) -> Result<(), DatasetError> {
    let rows: Vec<CandidateRecord> = cs.iter().map(|c| portable(c, path)).collect();
    Ok(util::write_jsonl(path, &rows)?)
}

pub fn read_vqa(path: &Path) -> Result<Vec<VqaRecord>, DatasetError> {
    Ok(util::read_jsonl(path)?)
}

pub fn write_vqa(path: &Path, records: &[VqaRecord]) -> Result<(), DatasetError> {
    Ok(util::write_jsonl(path, records)?)
}

pub fn read_triplets(path: &Path) -> Result<Vec<TripletRecord>, DatasetError> {
    Ok(util::read_jsonl(path)?)
}

pub fn write_triplets(path: &Path, records: &[TripletRecord]) -> Result<(), DatasetError> {
    Ok(util::write_jsonl(path, records)?)
}

/// Seed mixed with an id, for per-item RNG streams independent of order.
pub fn item_seed(seed: u64, tag: &str, id: &str) -> [u8; 32] {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    h.update([0]);
    h.update(id.as_bytes());
    h.finalize().into()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn status_strings_round_trip() {
        for s in [
            CandidateStatus::PendingFilter,
            CandidateStatus::RejectedFormat,
            CandidateStatus::RejectedWrongResult,
            CandidateStatus::RejectedLowProb,
            CandidateStatus::PendingReview,
            CandidateStatus::Approved,
            CandidateStatus::RejectedByExpert,
        ] {
            assert_eq!(CandidateStatus::parse(s.as_str()), Some(s));
            let json = serde_json::to_string(&s).unwrap();
            assert_eq!(json, format!("\"{}\"", s.as_str()));
        }
        assert_eq!(
            CandidateStatus::parse("pending_review"),
            Some(CandidateStatus::PendingReview)
        );
        assert_eq!(CandidateStatus::parse("bogus"), None);
    }
}
