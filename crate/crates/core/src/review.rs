//! Expert review store: candidates from a build run plus an append-only
//! decision log. Replaying the log always reconstructs the current state.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{
    finalize_dataset, read_candidate_log, CandidateRecord, CandidateStatus, DatasetError, VqaRecord,
};
use crate::model::{Authenticity, ForgeryType, Prompt};
use crate::util;

pub const DECISION_LOG: &str = "decisions.jsonl";
pub const STATUS_SNAPSHOT: &str = "status_snapshot.json";
pub const DEFAULT_PAGE_SIZE: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Decision {
    Approve,
    Reject,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewDecision {
    pub candidate_id: String,
    pub reviewer: String,
    pub decision: Decision,
    pub reason: Option<String>,
    pub timestamp: String,
    /// Explicit correction of an earlier decision.
    #[serde(default)]
    pub revision: bool,
}

impl ReviewDecision {
    fn same_intent(&self, other: &ReviewDecision) -> bool {
        self.candidate_id == other.candidate_id
            && self.reviewer == other.reviewer
            && self.decision == other.decision
    }
}

/// Effective decision per candidate: the first entry is terminal, later
/// entries count only when they are explicit revisions.
pub fn effective_decisions(log: &[ReviewDecision]) -> BTreeMap<String, ReviewDecision> {
    let mut out: BTreeMap<String, ReviewDecision> = BTreeMap::new();
    for d in log {
        match out.get(&d.candidate_id) {
            None => {
                out.insert(d.candidate_id.clone(), d.clone());
            }
            Some(_) if d.revision => {
                out.insert(d.candidate_id.clone(), d.clone());
            }
            Some(_) => {}
        }
    }
    out
}

fn status_of(c: &CandidateRecord, decisions: &BTreeMap<String, ReviewDecision>) -> CandidateStatus {
    match decisions.get(&c.candidate_id) {
        Some(d) if c.status == CandidateStatus::PendingReview || c.status.stage() == 2 => {
            match d.decision {
                Decision::Approve => CandidateStatus::Approved,
                Decision::Reject => CandidateStatus::RejectedByExpert,
            }
        }
        _ => c.status,
    }
}

/// Current status of every candidate from the two logs alone.
pub fn replay(data_dir: &Path) -> Result<BTreeMap<String, CandidateStatus>, ReviewError> {
    let candidates = read_candidate_log(&data_dir.join(crate::dataset::CANDIDATE_LOG_FILE))?;
    let log: Vec<ReviewDecision> = util::read_jsonl(&data_dir.join(DECISION_LOG))?;
    let eff = effective_decisions(&log);
    Ok(candidates
        .iter()
        .map(|c| (c.candidate_id.clone(), status_of(c, &eff)))
        .collect())
}

#[derive(Debug, Error)]
pub enum ReviewError {
    #[error("candidate {0} not found")]
    NotFound(String),
    #[error("candidate {id} is {status:?}, not pending review")]
    NotPending { id: String, status: CandidateStatus },
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSummary {
    pub candidate_id: String,
    pub status: CandidateStatus,
    pub authenticity: Authenticity,
    pub forgery_type: ForgeryType,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Page {
    pub items: Vec<CandidateSummary>,
    pub page: usize,
    pub page_size: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerSections {
    pub description: String,
    pub reasoning: String,
    pub label: Authenticity,
    pub probability: f64,
    pub forgery_type: ForgeryType,
}

/// Everything an expert needs to judge one candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateDetail {
    pub candidate_id: String,
    pub status: CandidateStatus,
    pub reject_reason: Option<String>,
    pub authenticity: Authenticity,
    pub forgery_type: ForgeryType,
    pub source: String,
    pub question: Prompt,
    pub raw_reply: String,
    pub answer: Option<AnswerSections>,
    pub image_mime: String,
    pub image_b64: String,
    pub reference_mime: Option<String>,
    pub reference_b64: Option<String>,
    pub decisions: Vec<ReviewDecision>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecideOutcome {
    pub candidate_id: String,
    pub status: CandidateStatus,
    /// True when an identical earlier decision was found and nothing was appended.
    pub duplicate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub total: usize,
    pub by_status: BTreeMap<CandidateStatus, usize>,
    pub decisions_logged: usize,
}

struct State {
    decisions: Vec<ReviewDecision>,
    effective: BTreeMap<String, ReviewDecision>,
    status: HashMap<String, CandidateStatus>,
}

pub struct ReviewStore {
    dir: PathBuf,
    /// Sorted by candidate id.
    candidates: Vec<CandidateRecord>,
    index: HashMap<String, usize>,
    state: Mutex<State>,
}

fn mime_for(path: &Path) -> &'static str {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .as_deref()
    {
        Some("jpg") | Some("jpeg") => "image/jpeg",
        _ => "image/png",
    }
}

impl ReviewStore {
    /// Opens `dir`, which holds a build run's candidate log; the decision
    /// log is created there on the first decision.
    pub fn open(dir: &Path) -> Result<Self, ReviewError> {
        let mut candidates = read_candidate_log(&dir.join(crate::dataset::CANDIDATE_LOG_FILE))?;
        candidates.sort_by(|a, b| a.candidate_id.cmp(&b.candidate_id));
        let index = candidates
            .iter()
            .enumerate()
            .map(|(i, c)| (c.candidate_id.clone(), i))
            .collect();
        let log_path = dir.join(DECISION_LOG);
        util::repair_jsonl(&log_path)?;
        let decisions: Vec<ReviewDecision> = util::read_jsonl(&log_path)?;
        let effective = effective_decisions(&decisions);
        let status = candidates
            .iter()
            .map(|c| (c.candidate_id.clone(), status_of(c, &effective)))
            .collect();
        Ok(Self {
            dir: dir.to_path_buf(),
            candidates,
            index,
            state: Mutex::new(State {
                decisions,
                effective,
                status,
            }),
        })
    }

    fn candidate(&self, id: &str) -> Result<&CandidateRecord, ReviewError> {
        self.index
            .get(id)
            .map(|&i| &self.candidates[i])
            .ok_or_else(|| ReviewError::NotFound(id.to_string()))
    }

    pub fn list(&self, status: Option<CandidateStatus>, page: usize, page_size: usize) -> Page {
        let st = self.state.lock().unwrap();
        let matching: Vec<CandidateSummary> = self
            .candidates
            .iter()
            .filter_map(|c| {
                let s = st.status[&c.candidate_id];
                (status.is_none() || status == Some(s)).then(|| CandidateSummary {
                    candidate_id: c.candidate_id.clone(),
                    status: s,
                    authenticity: c.record.authenticity,
                    forgery_type: c.record.forgery_type,
                    source: c.record.source.clone(),
                })
            })
            .collect();
        let page_size = page_size.max(1);
        let total = matching.len();
        let items = matching
            .into_iter()
            .skip(page.saturating_mul(page_size))
            .take(page_size)
            .collect();
        Page {
            items,
            page,
            page_size,
            total,
        }
    }

    pub fn get(&self, id: &str) -> Result<CandidateDetail, ReviewError> {
        let c = self.candidate(id)?;
        let b64 = |p: &Path| -> Result<String, ReviewError> {
            Ok(base64::engine::general_purpose::STANDARD.encode(std::fs::read(p)?))
        };
        let (status, decisions) = {
            let st = self.state.lock().unwrap();
            (
                st.status[id],
                st.decisions
                    .iter()
                    .filter(|d| d.candidate_id == id)
                    .cloned()
                    .collect(),
            )
        };
        let reject_reason = match status {
            CandidateStatus::RejectedByExpert => {
                let st = self.state.lock().unwrap();
                st.effective.get(id).and_then(|d| d.reason.clone())
            }
            _ => c.reject_reason.clone(),
        };
        Ok(CandidateDetail {
            candidate_id: c.candidate_id.clone(),
            status,
            reject_reason,
            authenticity: c.record.authenticity,
            forgery_type: c.record.forgery_type,
            source: c.record.source.clone(),
            question: c.question.clone(),
            raw_reply: c.raw_reply.clone(),
            answer: c.parsed.as_ref().map(|a| AnswerSections {
                description: a.description.clone(),
                reasoning: a.reasoning.clone(),
                label: a.result.label,
                probability: a.result.probability,
                forgery_type: a.result.forgery_type,
            }),
            image_mime: mime_for(&c.record.image_path).into(),
            image_b64: b64(&c.record.image_path)?,
            reference_mime: c
                .record
                .reference_path
                .as_deref()
                .map(|p| mime_for(p).into()),
            reference_b64: c.record.reference_path.as_deref().map(b64).transpose()?,
            decisions,
        })
    }

    fn commit(&self, st: &mut State, d: ReviewDecision) -> Result<CandidateStatus, ReviewError> {
        util::append_jsonl(&self.dir.join(DECISION_LOG), &d)?;
        let status = match d.decision {
            Decision::Approve => CandidateStatus::Approved,
            Decision::Reject => CandidateStatus::RejectedByExpert,
        };
        st.status.insert(d.candidate_id.clone(), status);
        st.effective.insert(d.candidate_id.clone(), d.clone());
        st.decisions.push(d);
        self.write_snapshot(st)?;
        Ok(status)
    }

    fn write_snapshot(&self, st: &State) -> Result<(), ReviewError> {
        let snap: BTreeMap<&String, CandidateStatus> =
            st.status.iter().map(|(k, v)| (k, *v)).collect();
        let bytes = serde_json::to_vec_pretty(&snap).map_err(std::io::Error::other)?;
        util::write_atomic(&self.dir.join(STATUS_SNAPSHOT), &bytes)?;
        Ok(())
    }

    /// Records a terminal decision. Repeating a decision already in the log
    /// (same candidate, reviewer and decision) is a no-op.
    pub fn decide(&self, d: ReviewDecision) -> Result<DecideOutcome, ReviewError> {
        if d.revision {
            return Err(ReviewError::Invalid("use revise() for revisions".into()));
        }
        if d.reviewer.trim().is_empty() {
            return Err(ReviewError::Invalid("reviewer must be set".into()));
        }
        self.candidate(&d.candidate_id)?;
        let mut st = self.state.lock().unwrap();
        let id = d.candidate_id.clone();
        if st.decisions.iter().any(|e| e.same_intent(&d)) {
            return Ok(DecideOutcome {
                status: st.status[&id],
                candidate_id: id,
                duplicate: true,
            });
        }
        let current = st.status[&id];
        if current != CandidateStatus::PendingReview {
            return Err(ReviewError::NotPending {
                id,
                status: current,
            });
        }
        let status = self.commit(&mut st, d)?;
        Ok(DecideOutcome {
            candidate_id: id,
            status,
            duplicate: false,
        })
    }

    /// Supersedes the decision on an already-decided candidate.
    pub fn revise(&self, mut d: ReviewDecision) -> Result<DecideOutcome, ReviewError> {
        let c = self.candidate(&d.candidate_id)?;
        let mut st = self.state.lock().unwrap();
        let id = d.candidate_id.clone();
        let current = st.status[&id];
        if current.stage() != 2 {
            return Err(ReviewError::NotPending {
                id,
                status: current,
            });
        }
        debug_assert!(c
            .history
            .iter()
            .any(|h| h.status == CandidateStatus::PendingReview));
        d.revision = true;
        let status = self.commit(&mut st, d)?;
        Ok(DecideOutcome {
            candidate_id: id,
            status,
            duplicate: false,
        })
    }

    pub fn statuses(&self) -> BTreeMap<String, CandidateStatus> {
        let st = self.state.lock().unwrap();
        st.status.iter().map(|(k, v)| (k.clone(), *v)).collect()
    }

    pub fn stats(&self) -> Stats {
        let st = self.state.lock().unwrap();
        let mut by_status = BTreeMap::new();
        for s in st.status.values() {
            *by_status.entry(*s).or_insert(0) += 1;
        }
        Stats {
            total: self.candidates.len(),
            by_status,
            decisions_logged: st.decisions.len(),
        }
    }

    /// Approved candidates as VQA records, plus the candidate log with every
    /// decided candidate's final status and reason. Undecided candidates stay
    /// pending.
    pub fn export(&self) -> Result<(Vec<VqaRecord>, Vec<CandidateRecord>), ReviewError> {
        let eff = self.state.lock().unwrap().effective.clone();
        let mut log_order = read_candidate_log(&self.dir.join(crate::dataset::CANDIDATE_LOG_FILE))?;
        let reviewed = |c: &CandidateRecord| {
            c.history
                .iter()
                .any(|h| h.status == CandidateStatus::PendingReview)
        };
        let decided: Vec<CandidateRecord> = log_order
            .iter()
            .filter(|c| !reviewed(c) || eff.contains_key(&c.candidate_id))
            .cloned()
            .collect();
        let (vqa, updated) = finalize_dataset(&decided, &eff)?;
        let mut by_id: HashMap<String, CandidateRecord> = updated
            .into_iter()
            .map(|c| (c.candidate_id.clone(), c))
            .collect();
        for c in &mut log_order {
            if let Some(u) = by_id.remove(&c.candidate_id) {
                *c = u;
            }
        }
        Ok((vqa, log_order))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}
