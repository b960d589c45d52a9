use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

use ffaa_core::config::DEFAULT_CONFIG;
use ffaa_core::synth::{write_corpus, ClassCounts};
use ffaa_core::Split;

fn ffaa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ffaa"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout_json(o: &Output) -> Value {
    assert!(
        o.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    serde_json::from_slice(o.stdout.trim_ascii()).expect("stdout is one JSON object")
}

fn stderr_json(o: &Output) -> Value {
    serde_json::from_slice(o.stderr.trim_ascii()).expect("stderr is one JSON object")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn unknown_flag_is_usage_error() {
    let o = ffaa(&["bench", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["error"], "usage");
    assert_eq!(ffaa(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(ffaa(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_config_key_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, DEFAULT_CONFIG.replace("delta = 0.6\n", "")).unwrap();
    let o = ffaa(&[
        "inject-hypothetical",
        "--config",
        p(&cfg),
        "--input",
        "x",
        "--out",
        "y",
    ]);
    assert_eq!(o.status.code(), Some(1));
    let e = stderr_json(&o);
    assert_eq!(e["error"], "config");
    assert!(e["message"].as_str().unwrap().contains("`delta`"), "{e}");
}

#[test]
fn config_init_writes_loadable_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("ffaa.toml");
    stdout_json(&ffaa(&["config", "init", "--out", p(&cfg), "--seed", "3"]));
    assert_eq!(std::fs::read_to_string(&cfg).unwrap(), DEFAULT_CONFIG);
    assert_eq!(
        ffaa(&["config", "init", "--out", p(&cfg)]).status.code(),
        Some(1)
    );
    stdout_json(&ffaa(&["config", "init", "--out", p(&cfg), "--force"]));
}

/// build → export → inject → mine → train → infer → bench on a tiny corpus.
#[test]
fn pipeline_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let counts = ClassCounts {
        real: 12,
        identity_exchange: 4,
        attribute_manipulation: 4,
        entire_synthesis: 4,
    };
    write_corpus(&d.join("corpus"), "train", counts, Split::Train, 5).unwrap();
    write_corpus(&d.join("sets"), "heldout", counts, Split::Test, 6).unwrap();
    let train_m = d.join("corpus/train.jsonl");
    let test_m = d.join("sets/heldout.jsonl");

    let cfg = d.join("c.toml");
    let text = DEFAULT_CONFIG
        .replace(
            "follow_hypothesis_rate = 0.0",
            "follow_hypothesis_rate = 0.5",
        )
        .replace("batch_size = 48", "batch_size = 8")
        .replace("epochs = 2", "epochs = 1")
        .replace("learning_rate = 1e-4", "learning_rate = 1e-3");
    std::fs::write(&cfg, text).unwrap();
    let c = p(&cfg);

    let built = stdout_json(&ffaa(&[
        "build-dataset",
        "--config",
        c,
        "--manifest",
        p(&train_m),
        "--out",
        p(&d.join("ds")),
        "--seed",
        "1",
    ]));
    assert_eq!(built["queried_total"], 24);

    let exported = stdout_json(&ffaa(&[
        "review",
        "export",
        "--data",
        p(&d.join("ds")),
        "--out",
        p(&d.join("vqa.jsonl")),
    ]));
    assert_eq!(exported["approved"], 0, "nothing approved before review");

    let mined = stdout_json(&ffaa(&[
        "mine-triplets",
        "--config",
        c,
        "--manifest",
        p(&train_m),
        "--out",
        p(&d.join("mine")),
        "--seed",
        "1",
    ]));
    assert_eq!(mined["triplets"], 24);

    let trained = stdout_json(&ffaa(&[
        "train-mids",
        "--config",
        c,
        "--data",
        p(&d.join("mine/triplets.jsonl")),
        "--manifest",
        p(&train_m),
        "--out",
        p(&d.join("ckpt")),
        "--seed",
        "1",
    ]));
    assert!(trained["steps"].as_u64().unwrap() > 0);
    let metrics = std::fs::read_to_string(d.join("ckpt/metrics.csv")).unwrap();
    assert!(metrics.starts_with("step,loss,val_acc\n"));

    let image = d.join("sets/images/heldout-0000.png");
    let single = stdout_json(&ffaa(&[
        "infer",
        "--config",
        c,
        "--image",
        p(&image),
        "--truth",
        "real",
        "--mids",
        p(&d.join("ckpt")),
        "--out",
        p(&d.join("one.json")),
        "--heatmap",
        p(&d.join("one.png")),
    ]));
    assert_eq!(single["image_id"], "heldout-0000");
    let v: Value = serde_json::from_slice(&std::fs::read(d.join("one.json")).unwrap()).unwrap();
    assert_eq!(v["per_answer"].as_array().unwrap().len(), 3);
    assert_eq!(
        image::image_dimensions(d.join("one.png")).unwrap(),
        (224, 224)
    );

    // Mock without ground truth for a lone image is a usage error.
    let o = ffaa(&[
        "infer",
        "--image",
        p(&image),
        "--mids",
        p(&d.join("ckpt")),
        "--out",
        p(&d.join("x.json")),
    ]);
    assert_eq!(o.status.code(), Some(2));

    std::fs::create_dir_all(d.join("verdicts")).unwrap();
    let batch = stdout_json(&ffaa(&[
        "infer",
        "--config",
        c,
        "--manifest",
        p(&test_m),
        "--mids",
        p(&d.join("ckpt/mids.ckpt")),
        "--out",
        p(&d.join("verdicts/heldout.jsonl")),
    ]));
    assert_eq!(batch["images"], 24);
    assert_eq!(batch["failures"], 0);

    let report = stdout_json(&ffaa(&[
        "bench",
        "--config",
        c,
        "--manifests",
        p(&d.join("sets")),
        "--verdicts",
        p(&d.join("verdicts")),
        "--out",
        p(&d.join("report.json")),
    ]));
    assert!(report["acc_pooled"].as_f64().unwrap() >= 0.0);
    assert!(report["sacc"].is_null(), "single set has no spread");
    let md = std::fs::read_to_string(d.join("report.md")).unwrap();
    assert!(md.contains("heldout ACC"));
}
