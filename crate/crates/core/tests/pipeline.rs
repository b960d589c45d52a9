//! Resume, capping and persistence behaviour of the pipeline stages.

use std::collections::BTreeMap;
use std::path::Path;

use ffaa_core::dataset::{
    build_dataset, mine_triplets, BuildConfig, CandidateStatus, CANDIDATE_LOG_FILE,
};
use ffaa_core::decision::{batch_analyze, TripletGenerator};
use ffaa_core::generator::{MockGenerator, MockPolicy, ProbabilityLaw, PromptPool};
use ffaa_core::mids::{MidsConfig, MidsModel};
use ffaa_core::model::{ForgeryType, Manifest, Split};
use ffaa_core::synth::{write_corpus, ClassCounts};
use ffaa_core::trainer::{self, TrainConfig};

fn corpus(dir: &Path, n: usize) -> Manifest {
    write_corpus(
        dir,
        "pipe",
        ClassCounts {
            real: n,
            identity_exchange: n,
            attribute_manipulation: n,
            entire_synthesis: n,
        },
        Split::Train,
        11,
    )
    .unwrap()
}

fn mock(m: &Manifest) -> MockGenerator {
    MockGenerator::from_manifests(
        MockPolicy {
            seed: 3,
            flip_rate_non_hypothetical: 0.2,
            follow_hypothesis_rate: 0.5,
            malformed_rate: 0.1,
            type_confusion_rate: 0.1,
            probability_law: ProbabilityLaw::Uniform {
                low: 0.4,
                high: 1.0,
            },
        },
        [m],
    )
}

fn build_cfg(m: &Manifest) -> BuildConfig {
    BuildConfig {
        budget: m.len(),
        seed: 5,
        max_concurrency: 3,
        ..BuildConfig::default()
    }
}

fn truncated(m: &Manifest, n: usize) -> Manifest {
    Manifest::new(m.name.clone(), m.records[..n].to_vec())
}

#[test]
fn interrupted_build_resumes_to_the_same_log() {
    let tmp = tempfile::tempdir().unwrap();
    let m = corpus(&tmp.path().join("corpus"), 8);
    let g = mock(&m);
    let pool = PromptPool::default();
    let cfg = build_cfg(&m);

    let once = tmp.path().join("once");
    build_dataset(&m, &g, &pool, &cfg, &once, false, None).unwrap();

    let twice = tmp.path().join("twice");
    let first = build_dataset(&m, &g, &pool, &cfg, &twice, false, Some(10)).unwrap();
    assert_eq!(first.queried_this_run, 10);
    assert!(build_dataset(&m, &g, &pool, &cfg, &twice, false, None).is_err());
    let second = build_dataset(&m, &g, &pool, &cfg, &twice, true, None).unwrap();
    assert_eq!(second.queried_this_run, m.len() - 10);
    assert_eq!(second.queried_total, m.len());

    let read = |d: &Path| std::fs::read(d.join(CANDIDATE_LOG_FILE)).unwrap();
    assert_eq!(read(&once), read(&twice));
}

#[test]
fn class_cap_bounds_review_bound_survivors() {
    let tmp = tempfile::tempdir().unwrap();
    let m = corpus(&tmp.path().join("corpus"), 10);
    let g = mock(&m);
    let cfg = BuildConfig {
        class_caps: BTreeMap::from([(ForgeryType::IdentityExchange, 2)]),
        ..build_cfg(&m)
    };
    let out = build_dataset(
        &m,
        &g,
        &PromptPool::default(),
        &cfg,
        &tmp.path().join("b"),
        false,
        None,
    )
    .unwrap();
    let ie_pending = out
        .candidates
        .iter()
        .filter(|c| {
            c.record.forgery_type == ForgeryType::IdentityExchange
                && c.status == CandidateStatus::PendingReview
        })
        .count();
    assert_eq!(ie_pending, 2);
    let others = out
        .candidates
        .iter()
        .filter(|c| c.record.forgery_type != ForgeryType::IdentityExchange)
        .count();
    assert_eq!(others, 30, "uncapped classes are all queried");
}

#[test]
fn mining_and_inference_resume_without_rework() {
    let tmp = tempfile::tempdir().unwrap();
    let m = corpus(&tmp.path().join("corpus"), 3);
    let g = MockGenerator::from_manifests(
        MockPolicy {
            malformed_rate: 0.0,
            ..mock(&m).policy().clone()
        },
        [&m],
    );
    let pool = PromptPool::default();
    let tg = TripletGenerator {
        generator: &g,
        pool: &pool,
        seed: 9,
    };

    let full = mine_triplets(&m, &tg, false, &tmp.path().join("m1"), false, 2).unwrap();
    let part_dir = tmp.path().join("m2");
    mine_triplets(&truncated(&m, 5), &tg, false, &part_dir, false, 2).unwrap();
    let resumed = mine_triplets(&m, &tg, false, &part_dir, true, 2).unwrap();
    assert_eq!(full, resumed);
    assert_eq!(full.easy + full.hard, m.len());

    let model = MidsModel::<f64>::new(MidsConfig::default()).unwrap();
    let once = tmp.path().join("v1.jsonl");
    let a = batch_analyze(&m, &tg, &model, &once, false, 2).unwrap();
    let twice = tmp.path().join("v2.jsonl");
    batch_analyze(&truncated(&m, 4), &tg, &model, &twice, false, 2).unwrap();
    let b = batch_analyze(&m, &tg, &model, &twice, true, 2).unwrap();
    assert_eq!(a, b);
    assert_eq!(
        std::fs::read(&once).unwrap(),
        std::fs::read(&twice).unwrap()
    );
    assert!(a.failures().is_empty());
}

#[test]
fn training_lowers_loss_and_checkpoint_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let m = corpus(&tmp.path().join("corpus"), 4);
    let g = MockGenerator::from_manifests(
        MockPolicy {
            malformed_rate: 0.0,
            ..mock(&m).policy().clone()
        },
        [&m],
    );
    let pool = PromptPool::default();
    let tg = TripletGenerator {
        generator: &g,
        pool: &pool,
        seed: 2,
    };
    let mined = mine_triplets(&m, &tg, false, &tmp.path().join("mine"), false, 4).unwrap();
    let mut model = MidsModel::<f64>::new(MidsConfig::default()).unwrap();
    let frozen = model.frozen_checksum();
    let examples = trainer::expand_triplets(&mined.triplets, &m).unwrap();
    let images = trainer::load_images(&model, &m, &examples).unwrap();
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        batch_size: 8,
        epochs: 4,
        val_fraction: 0.0,
        ..TrainConfig::default()
    };
    let report = trainer::train(&mut model, &examples, &images, &cfg).unwrap();
    let first = report.metrics.first().unwrap().loss;
    let last = report.metrics.last().unwrap().loss;
    assert!(last < first, "loss {first} -> {last}");
    assert_eq!(model.frozen_checksum(), frozen, "frozen encoders untouched");
    assert!(model.is_trained());

    let out = tmp.path().join("ckpt");
    trainer::save_training_outputs(&out, &model, &report).unwrap();
    let loaded = MidsModel::<f64>::load(&out.join(trainer::CHECKPOINT_FILE)).unwrap();
    let img = &images[&examples[0].image_id];
    let input = model
        .input(img, &ffaa_core::ffacot::mask_result(&examples[0].answer))
        .unwrap();
    let reloaded = loaded
        .input(img, &ffaa_core::ffacot::mask_result(&examples[0].answer))
        .unwrap();
    assert_eq!(
        model.predict(&input).unwrap(),
        loaded.predict(&reloaded).unwrap()
    );
}

#[test]
fn f32_and_f64_models_agree_closely() {
    let tmp = tempfile::tempdir().unwrap();
    let m = corpus(&tmp.path().join("corpus"), 1);
    let wide = MidsModel::<f64>::new(MidsConfig::default()).unwrap();
    let narrow = MidsModel::<f32>::new(MidsConfig::default()).unwrap();
    let text = "Image description: A face.\nForgery reasoning: Skin looks smooth.\nAnalysis result: [MASKED]";
    for r in &m.records {
        let img = wide.load_image(&r.image_path).unwrap();
        let a = wide.predict(&wide.input(&img, text).unwrap()).unwrap();
        let b = narrow.predict(&narrow.input(&img, text).unwrap()).unwrap();
        for k in 0..4 {
            assert!(
                (a.m[k] - b.m[k] as f64).abs() < 1e-4,
                "{:?} vs {:?}",
                a.m,
                b.m
            );
        }
    }
}
