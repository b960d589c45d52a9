//! Scaled-down end-to-end run on a synthetic corpus with the mock backend:
//! dataset build → scripted review → export, triplet mining → MIDS
//! training, batch inference on three test sets → benchmark report.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bench::{self, BenchError, BenchReport};
use crate::dataset::{
    self, build_dataset, export_finetune, inject_hypothetical, mine_triplets, write_candidate_log,
    write_triplets, write_vqa, BuildConfig, DatasetError,
};
use crate::decision::{batch_analyze, DecisionError, Difficulty, TripletGenerator, Verdict};
use crate::generator::{MockGenerator, MockPolicy, ProbabilityLaw, PromptPool};
use crate::mids::{MidsConfig, MidsError, MidsModel};
use crate::model::{assign_class_label, Manifest, ManifestError, Split};
use crate::review::{Decision, ReviewDecision, ReviewError, ReviewStore};
use crate::synth::{write_corpus, ClassCounts};
use crate::trainer::{self, TrainConfig, TrainError};
use crate::util;

#[derive(Debug, Error)]
pub enum DemoError {
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Review(#[from] ReviewError),
    #[error(transparent)]
    Decision(#[from] DecisionError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Mids(#[from] MidsError),
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoOptions {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Images processed concurrently during build, mining and inference.
    pub width: usize,
    pub policy: MockPolicy,
    pub train: TrainConfig,
    pub mids: MidsConfig,
}

impl DemoOptions {
    /// Settings for the toy encoders: a mock that errs unprompted one time
    /// in five and adopts a hypothesis half the time; batch 8, lr 1e-3.
    pub fn new(seed: u64, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            seed,
            out_dir: out_dir.into(),
            width: 4,
            policy: MockPolicy {
                seed,
                flip_rate_non_hypothetical: 0.2,
                follow_hypothesis_rate: 0.5,
                malformed_rate: 0.05,
                type_confusion_rate: 0.1,
                probability_law: ProbabilityLaw::Uniform {
                    low: 0.45,
                    high: 1.0,
                },
            },
            train: TrainConfig {
                learning_rate: 1e-3,
                batch_size: 8,
                epochs: 5,
                seed,
                ..TrainConfig::default()
            },
            mids: MidsConfig {
                init_seed: seed,
                ..MidsConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoSummary {
    pub seed: u64,
    pub corpus: BTreeMap<String, usize>,
    pub candidate_status: BTreeMap<String, usize>,
    pub vqa_records: usize,
    pub hypothetical_records: usize,
    pub mined_easy: usize,
    pub mined_hard: usize,
    pub train_examples: usize,
    pub label_histogram: [usize; 4],
    pub best_val_acc: Option<f64>,
    /// Four-class accuracy over every (test image, answer) pair.
    pub heldout_examples: usize,
    pub heldout_acc: f64,
    pub hard_images: usize,
    pub mids_acc_hard: Option<f64>,
    pub anchor_acc_hard: Option<f64>,
    pub report: BenchReport,
    /// SHA-256 of each produced artifact, relative path → hex digest.
    pub artifacts: BTreeMap<String, String>,
}

pub const SUMMARY_FILE: &str = "summary.json";

const TEST_SETS: [(&str, ClassCounts); 3] = [
    (
        "test_balanced",
        ClassCounts {
            real: 30,
            identity_exchange: 10,
            attribute_manipulation: 10,
            entire_synthesis: 10,
        },
    ),
    (
        "test_fake_heavy",
        ClassCounts {
            real: 15,
            identity_exchange: 15,
            attribute_manipulation: 15,
            entire_synthesis: 15,
        },
    ),
    (
        "test_real_heavy",
        ClassCounts {
            real: 45,
            identity_exchange: 5,
            attribute_manipulation: 5,
            entire_synthesis: 5,
        },
    ),
];

/// Scripted expert: approves an answer iff its verdict and forgery type match
/// ground truth.
fn scripted_review(store: &ReviewStore) -> Result<(), DemoError> {
    let pending: Vec<String> = store
        .statuses()
        .into_iter()
        .filter(|(_, s)| *s == dataset::CandidateStatus::PendingReview)
        .map(|(id, _)| id)
        .collect();
    for id in pending {
        let c = store.get(&id)?;
        let ok = c
            .answer
            .as_ref()
            .is_some_and(|a| a.label == c.authenticity && a.forgery_type == c.forgery_type);
        store.decide(ReviewDecision {
            candidate_id: id,
            reviewer: "demo-reviewer".into(),
            decision: if ok {
                Decision::Approve
            } else {
                Decision::Reject
            },
            reason: (!ok).then(|| "forgery type does not match".to_string()),
            timestamp: "2000-01-01T00:00:00Z".into(),
            revision: false,
        })?;
    }
    Ok(())
}

fn digest(path: &Path) -> std::io::Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

/// Runs the whole pipeline under `opts.out_dir` (which must not hold an
/// earlier run) and writes `summary.json`.
pub fn run_demo(opts: &DemoOptions) -> Result<DemoSummary, DemoError> {
    let out = std::path::absolute(&opts.out_dir)?;
    if out.join(SUMMARY_FILE).exists() || out.join("corpus").exists() {
        return Err(DatasetError::AlreadyExists(out.display().to_string()).into());
    }
    let seed = opts.seed;
    let corpus = out.join("corpus");

    let vqa_src = write_corpus(
        &corpus,
        "vqa_source",
        ClassCounts {
            real: 60,
            identity_exchange: 20,
            attribute_manipulation: 20,
            entire_synthesis: 20,
        },
        Split::Train,
        seed,
    )?;
    let mids_train = write_corpus(
        &corpus,
        "mids_train",
        ClassCounts {
            real: 150,
            identity_exchange: 50,
            attribute_manipulation: 50,
            entire_synthesis: 50,
        },
        Split::Train,
        seed,
    )?;
    let mut tests = Vec::new();
    for (name, counts) in TEST_SETS {
        tests.push(write_corpus(&corpus, name, counts, Split::Test, seed)?);
    }
    let mut corpus_sizes = BTreeMap::new();
    for m in [&vqa_src, &mids_train].into_iter().chain(&tests) {
        corpus_sizes.insert(m.name.clone(), m.len());
    }

    let all = || [&vqa_src, &mids_train].into_iter().chain(&tests);
    let generator = MockGenerator::from_manifests(opts.policy.clone(), all());
    // Malformed replies exercise the build filters; mining and inference
    // run on a well-formed backend so every test image gets a verdict.
    let answering = MockGenerator::from_manifests(
        MockPolicy {
            malformed_rate: 0.0,
            ..opts.policy.clone()
        },
        all(),
    );
    let pool = PromptPool::default();

    // Dataset construction and review.
    let ds_dir = out.join("dataset");
    let build_cfg = BuildConfig {
        budget: vqa_src.len(),
        seed,
        max_concurrency: opts.width,
        ..BuildConfig::default()
    };
    build_dataset(
        &vqa_src, &generator, &pool, &build_cfg, &ds_dir, false, None,
    )?;
    let store = ReviewStore::open(&ds_dir)?;
    scripted_review(&store)?;
    let (vqa, log) = store.export()?;
    write_candidate_log(&ds_dir.join("candidate_log.final.jsonl"), &log)?;
    write_vqa(&ds_dir.join("vqa.jsonl"), &vqa)?;
    let injected = inject_hypothetical(&vqa, 1.0 / 3.0, seed, &pool)?;
    write_vqa(&ds_dir.join("vqa_injected.jsonl"), &injected)?;
    export_finetune(&injected, &vqa_src, &ds_dir.join("finetune.jsonl"))?;
    let mut candidate_status = BTreeMap::new();
    for c in &log {
        *candidate_status
            .entry(c.status.as_str().to_string())
            .or_insert(0) += 1;
    }
    let hypothetical_records = injected
        .iter()
        .filter(|r| r.prompt.kind == crate::model::PromptKind::Hypothetical)
        .count();

    // Triplet mining on unused images, Hard ones only.
    let tg = TripletGenerator {
        generator: &answering,
        pool: &pool,
        seed,
    };
    let mine_dir = out.join("mining");
    let mined = mine_triplets(&mids_train, &tg, true, &mine_dir, false, opts.width)?;
    write_triplets(&mine_dir.join("triplets.jsonl"), &mined.triplets)?;

    // MIDS training.
    let mut model = MidsModel::<f64>::new(opts.mids.clone())?;
    let examples = trainer::expand_triplets(&mined.triplets, &mids_train)?;
    let images = trainer::load_images(&model, &mids_train, &examples)?;
    let train_report = trainer::train(&mut model, &examples, &images, &opts.train)?;
    let ckpt_dir = out.join("mids");
    trainer::save_training_outputs(&ckpt_dir, &model, &train_report)?;

    // Inference and benchmark.
    let verdict_dir = out.join("verdicts");
    let mut sets: Vec<(Manifest, HashMap<String, Verdict>)> = Vec::new();
    for m in &tests {
        let outcome = batch_analyze(
            m,
            &tg,
            &model,
            &verdict_dir.join(format!("{}.jsonl", m.name)),
            false,
            opts.width,
        )?;
        sets.push((m.clone(), outcome.verdicts()));
    }
    let report = bench::evaluate(&sets)?;
    let bench_dir = out.join("bench");
    std::fs::create_dir_all(&bench_dir)?;
    let json = serde_json::to_vec_pretty(&report).map_err(std::io::Error::other)?;
    util::write_atomic(&bench_dir.join("report.json"), &json)?;
    util::write_atomic(
        &bench_dir.join("report.md"),
        bench::render_markdown(&report).as_bytes(),
    )?;

    let (mut hits, mut total) = (0usize, 0usize);
    for (m, verdicts) in &sets {
        for rec in &m.records {
            let Some(v) = verdicts.get(&rec.id) else {
                continue;
            };
            for a in &v.per_answer {
                let y = assign_class_label(rec.authenticity, a.answer.verdict());
                let pred = (0..4).fold(0, |b, k| if a.m[k] > a.m[b] { k } else { b });
                hits += usize::from(pred == y);
                total += 1;
            }
        }
    }
    let hard_images = sets
        .iter()
        .flat_map(|(_, v)| v.values())
        .filter(|v| v.difficulty == Difficulty::Hard)
        .count();

    let mut artifacts = BTreeMap::new();
    for rel in [
        "dataset/candidate_log.jsonl",
        "dataset/decisions.jsonl",
        "dataset/candidate_log.final.jsonl",
        "dataset/vqa.jsonl",
        "dataset/vqa_injected.jsonl",
        "dataset/finetune.jsonl",
        "mining/triplets.jsonl",
        "mids/mids.ckpt",
        "mids/metrics.csv",
        "bench/report.json",
    ]
    .into_iter()
    .map(String::from)
    .chain(TEST_SETS.iter().map(|(n, _)| format!("verdicts/{n}.jsonl")))
    {
        artifacts.insert(rel.clone(), digest(&out.join(&rel))?);
    }

    let summary = DemoSummary {
        seed,
        corpus: corpus_sizes,
        candidate_status,
        vqa_records: vqa.len(),
        hypothetical_records,
        mined_easy: mined.easy,
        mined_hard: mined.hard,
        train_examples: examples.len(),
        label_histogram: train_report.label_histogram,
        best_val_acc: train_report.best_val_acc,
        heldout_examples: total,
        heldout_acc: if total == 0 {
            0.0
        } else {
            hits as f64 / total as f64
        },
        hard_images,
        mids_acc_hard: report.overall.acc_hard,
        anchor_acc_hard: report.overall.anchor_acc_hard,
        report,
        artifacts,
    };
    let json = serde_json::to_vec_pretty(&summary).map_err(std::io::Error::other)?;
    util::write_atomic(&out.join(SUMMARY_FILE), &json)?;
    Ok(summary)
}
