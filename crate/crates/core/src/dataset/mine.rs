use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DatasetError, TripletRecord};
use crate::decision::{AnswerSet, Difficulty, TripletGenerator};
use crate::model::Manifest;
use crate::util;

pub const MINED_LOG_FILE: &str = "mined.jsonl";

/// One line of the mining progress log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinedEntry {
    pub image_id: String,
    pub difficulty: Option<Difficulty>,
    pub triplet: Option<TripletRecord>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MineOutcome {
    /// Emitted triplets in manifest order (Easy images dropped if requested).
    pub triplets: Vec<TripletRecord>,
    pub easy: usize,
    pub hard: usize,
    /// Images whose answers never parsed.
    pub failed: Vec<(String, String)>,
}

fn to_triplet(set: AnswerSet) -> TripletRecord {
    let [a, p, n] = set.answers;
    TripletRecord {
        image_id: set.image_id,
        anchor: a.answer,
        positive: p.answer,
        negative: n.answer,
        anchor_prompt: a.prompt,
        positive_prompt: p.prompt,
        negative_prompt: n.prompt,
    }
}

/// Queries answer triplets for every manifest image. Progress is appended
/// to `out_dir/mined.jsonl`; a resumed run skips images already mined and
/// retries failed ones. Backend (transport) errors abort the run.
pub fn mine_triplets(
    manifest: &Manifest,
    triplets: &TripletGenerator<'_>,
    exclude_easy: bool,
    out_dir: &Path,
    resume: bool,
    width: usize,
) -> Result<MineOutcome, DatasetError> {
    std::fs::create_dir_all(out_dir)?;
    let log = out_dir.join(MINED_LOG_FILE);
    if !resume && log.exists() {
        return Err(DatasetError::AlreadyExists(out_dir.display().to_string()));
    }
    util::repair_jsonl(&log)?;
    let mut done: HashMap<String, MinedEntry> = util::read_jsonl::<MinedEntry>(&log)?
        .into_iter()
        .filter(|e| e.triplet.is_some())
        .map(|e| (e.image_id.clone(), e))
        .collect();
    let todo: Vec<_> = manifest
        .records
        .iter()
        .filter(|r| !done.contains_key(&r.id))
        .collect();
    for chunk in todo.chunks(width.max(1)) {
        let results = util::fan_out(chunk, width, |r| triplets.generate(&r.id, &r.image_path));
        for (r, res) in chunk.iter().zip(results) {
            let entry = match res {
                Ok(set) => MinedEntry {
                    image_id: r.id.clone(),
                    difficulty: Some(set.difficulty()),
                    triplet: Some(to_triplet(set)),
                    error: None,
                },
                Err(e) if e.is_backend() => return Err(e.into()),
                Err(e) => MinedEntry {
                    image_id: r.id.clone(),
                    difficulty: None,
                    triplet: None,
                    error: Some(e.to_string()),
                },
            };
            util::append_jsonl(&log, &entry)?;
            done.insert(r.id.clone(), entry);
        }
    }
    let mut outcome = MineOutcome {
        triplets: Vec::new(),
        easy: 0,
        hard: 0,
        failed: Vec::new(),
    };
    for r in &manifest.records {
        let e = done.remove(&r.id).expect("every record processed");
        match (e.difficulty, e.triplet) {
            (Some(d), Some(t)) => {
                match d {
                    Difficulty::Easy => outcome.easy += 1,
                    Difficulty::Hard => outcome.hard += 1,
                }
                if !(exclude_easy && d == Difficulty::Easy) {
                    outcome.triplets.push(t);
                }
            }
            _ => outcome
                .failed
                .push((e.image_id, e.error.unwrap_or_default())),
        }
    }
    Ok(outcome)
}
