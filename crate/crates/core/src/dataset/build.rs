use std::collections::{BTreeMap, HashSet};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    append_candidate, item_seed, read_candidate_log, CandidateRecord, CandidateStatus,
    DatasetError, StatusChange,
};
use crate::ffacot::{parse, FfaCotAnswer};
use crate::generator::{BuildMode, Generator, PromptPool};
use crate::model::{FaceRecord, ForgeryType, Manifest, PromptKind};
use crate::util;

pub const CANDIDATE_LOG_FILE: &str = "candidate_log.jsonl";
pub const QUERIED_SET_FILE: &str = "queried.txt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BuildConfig {
    /// Minimum stated probability for a candidate to reach review.
    pub delta: f64,
    /// Total candidates (generator queries) allowed in the output directory.
    pub budget: usize,
    pub seed: u64,
    /// Optional cap on review-bound survivors per forgery type (`none` = real).
    pub class_caps: BTreeMap<ForgeryType, usize>,
    pub max_concurrency: usize,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self {
            delta: 0.6,
            budget: 1000,
            seed: 0,
            class_caps: BTreeMap::new(),
            max_concurrency: 4,
        }
    }
}

impl BuildConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(DatasetError::Config(format!(
                "delta {} outside [0, 1]",
                self.delta
            )));
        }
        if self.max_concurrency == 0 {
            return Err(DatasetError::Config("max_concurrency must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuildOutcome {
    /// The whole candidate log (earlier runs included).
    pub candidates: Vec<CandidateRecord>,
    pub queried_this_run: usize,
    /// Final size of the queried set.
    pub queried_total: usize,
}

impl BuildOutcome {
    pub fn status_counts(&self) -> BTreeMap<CandidateStatus, usize> {
        let mut m = BTreeMap::new();
        for c in &self.candidates {
            *m.entry(c.status).or_insert(0) += 1;
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    pub status: CandidateStatus,
    pub parsed: Option<FfaCotAnswer>,
    pub reason: Option<String>,
}

/// The filter chain, in order: format, result vs. ground truth, stated
/// probability. A candidate failing one filter is not evaluated further.
pub fn apply_filters(record: &FaceRecord, reply: &str, delta: f64) -> FilterOutcome {
    let parsed = match parse(reply) {
        Ok(a) => a,
        Err(e) => {
            return FilterOutcome {
                status: CandidateStatus::RejectedFormat,
                parsed: None,
                reason: Some(e.to_string()),
            }
        }
    };
    let r = &parsed.result;
    if r.label != record.authenticity || r.forgery_type != record.forgery_type {
        let reason = format!(
            "answer says {} / {}, ground truth is {} / {}",
            r.label, r.forgery_type, record.authenticity, record.forgery_type
        );
        return FilterOutcome {
            status: CandidateStatus::RejectedWrongResult,
            parsed: Some(parsed),
            reason: Some(reason),
        };
    }
    if r.probability < delta {
        let reason = format!("probability {} below {delta}", r.probability);
        return FilterOutcome {
            status: CandidateStatus::RejectedLowProb,
            parsed: Some(parsed),
            reason: Some(reason),
        };
    }
    FilterOutcome {
        status: CandidateStatus::PendingReview,
        parsed: Some(parsed),
        reason: None,
    }
}

fn read_queried(path: &Path) -> Result<Vec<String>, DatasetError> {
    match std::fs::read_to_string(path) {
        Ok(s) => Ok(s
            .lines()
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
        Err(e) => Err(e.into()),
    }
}

fn append_queried(path: &Path, id: &str) -> Result<(), DatasetError> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{id}")?;
    f.sync_data()?;
    Ok(())
}

/// Samples unqueried images in a seeded order, queries the generator in
/// construction mode and filters the replies into `out_dir`'s candidate log.
///
/// Everything is persisted per candidate, so an interrupted run resumes to
/// the same log. `stop_after` bounds the queries of this call (used to
/// emulate interruptions).
pub fn build_dataset(
    manifest: &Manifest,
    generator: &dyn Generator,
    pool: &PromptPool,
    config: &BuildConfig,
    out_dir: &Path,
    resume: bool,
    stop_after: Option<usize>,
) -> Result<BuildOutcome, DatasetError> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let log_path = out_dir.join(CANDIDATE_LOG_FILE);
    let q_path = out_dir.join(QUERIED_SET_FILE);
    if !resume && (log_path.exists() || q_path.exists()) {
        return Err(DatasetError::AlreadyExists(out_dir.display().to_string()));
    }
    util::repair_jsonl(&log_path)?;
    let mut candidates = read_candidate_log(&log_path)?;
    let mut queried: HashSet<String> = read_queried(&q_path)?.into_iter().collect();
    queried.extend(candidates.iter().map(|c| c.candidate_id.clone()));

    let mut survivors: BTreeMap<ForgeryType, usize> = BTreeMap::new();
    for c in &candidates {
        if c.history
            .iter()
            .any(|h| h.status == CandidateStatus::PendingReview)
        {
            *survivors.entry(c.record.forgery_type).or_insert(0) += 1;
        }
    }
    let capped = |t: ForgeryType, extra: usize, survivors: &BTreeMap<ForgeryType, usize>| {
        config
            .class_caps
            .get(&t)
            .is_some_and(|&cap| survivors.get(&t).copied().unwrap_or(0) + extra >= cap)
    };

    let mut order: Vec<usize> = (0..manifest.records.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));
    let mut pending = order
        .into_iter()
        .map(|i| &manifest.records[i])
        .filter(|r| !queried.contains(&r.id))
        .collect::<Vec<_>>()
        .into_iter();

    let mut this_run = 0usize;
    loop {
        let room = config.budget.saturating_sub(candidates.len());
        let room = stop_after.map_or(room, |s| room.min(s.saturating_sub(this_run)));
        if room == 0 {
            break;
        }
        // Pick the next chunk, never letting in-flight work overshoot a cap.
        let width = config.max_concurrency.min(room);
        let mut chunk: Vec<&FaceRecord> = Vec::with_capacity(width);
        let mut inflight: BTreeMap<ForgeryType, usize> = BTreeMap::new();
        while chunk.len() < width {
            let Some(r) = pending.next() else { break };
            let extra = inflight.get(&r.forgery_type).copied().unwrap_or(0);
            if capped(r.forgery_type, extra, &survivors) {
                continue;
            }
            *inflight.entry(r.forgery_type).or_insert(0) += 1;
            chunk.push(r);
        }
        if chunk.is_empty() {
            break;
        }
        let replies = util::fan_out(&chunk, config.max_concurrency, |r| {
            let mut rng = ChaCha8Rng::from_seed(item_seed(config.seed, "build", &r.id));
            let req = pool.build_request(
                r,
                BuildMode::Construction,
                PromptKind::NonHypothetical,
                None,
                &mut rng,
            )?;
            let reply = generator
                .generate(&req)
                .map_err(|source| DatasetError::Generator {
                    id: r.id.clone(),
                    source,
                })?;
            Ok::<_, DatasetError>((req.question, reply))
        });
        for (r, res) in chunk.iter().zip(replies) {
            let (question, reply) = res?;
            append_queried(&q_path, &r.id)?;
            queried.insert(r.id.clone());
            let f = apply_filters(r, &reply.text, config.delta);
            let mut c = CandidateRecord {
                candidate_id: r.id.clone(),
                record: (*r).clone(),
                question,
                raw_reply: reply.text,
                parsed: None,
                status: CandidateStatus::PendingFilter,
                reject_reason: None,
                backend_id: reply.backend_id,
                history: vec![StatusChange {
                    status: CandidateStatus::PendingFilter,
                    reason: None,
                }],
            };
            c.parsed = f.parsed;
            c.transition(f.status, f.reason);
            if c.status == CandidateStatus::PendingReview {
                *survivors.entry(r.forgery_type).or_insert(0) += 1;
            }
            append_candidate(&log_path, &c)?;
            candidates.push(c);
            this_run += 1;
        }
    }
    Ok(BuildOutcome {
        candidates,
        queried_this_run: this_run,
        queried_total: queried.len(),
    })
}
