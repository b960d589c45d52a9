//! `ffaa` — dataset curation, MIDS training, inference and benchmarking.
//!
//! Errors are printed to stderr as one JSON object; the exit code is 2 for
//! usage errors and 1 for everything else.

use std::collections::HashMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use ffaa_core::bench;
use ffaa_core::config::{BackendKind, Config, DEFAULT_CONFIG};
use ffaa_core::dataset::{self, CANDIDATE_LOG_FILE};
use ffaa_core::decision::{self, TripletGenerator};
use ffaa_core::demo::{run_demo, DemoOptions};
use ffaa_core::mids::{render_overlay, HeatmapStream};
use ffaa_core::review::ReviewStore;
use ffaa_core::trainer::{self, CHECKPOINT_FILE};
use ffaa_core::{load_manifest, Authenticity, FaceRecord, ForgeryType, Manifest, Mids, Split};

#[derive(Parser)]
#[command(name = "ffaa", version, about = "Face forgery analysis toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Config file (defaults to the built-in configuration).
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Query the generator over a manifest and filter answers into a candidate log.
    BuildDataset {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: bool,
        /// Stop after this many queries in this invocation.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Rewrite a fraction of VQA records with hypothetical questions.
    InjectHypothetical {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to dataset.hypothetical_fraction.
        #[arg(long)]
        fraction: Option<f64>,
    },
    /// Convert VQA records to conversation JSONL for fine-tuning.
    ExportFinetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Query answer triplets per image and write triplets.jsonl.
    MineTriplets {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Keep only images whose answers disagree.
        #[arg(long)]
        exclude_easy: bool,
        #[arg(long)]
        resume: bool,
    },
    /// Train MIDS on mined triplets.
    TrainMids {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Analyse one image or a whole manifest.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(
            long,
            conflicts_with = "manifest",
            required_unless_present = "manifest"
        )]
        image: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Ground truth for the mock backend when analysing a single image.
        #[arg(long)]
        truth: Option<Truth>,
        /// Overrides backend.kind.
        #[arg(long)]
        backend: Option<Backend>,
        /// Checkpoint file or training output directory.
        #[arg(long)]
        mids: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Grad-CAM overlay for the selected answer (single image only).
        #[arg(long, requires = "image")]
        heatmap: Option<PathBuf>,
        #[arg(long, default_value = "global")]
        heatmap_stream: Stream,
        #[arg(long)]
        resume: bool,
    },
    /// Score verdicts against manifests.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Directory of manifests (`<set>.jsonl`).
        #[arg(long)]
        manifests: PathBuf,
        /// Directory of verdict files named like the manifests.
        #[arg(long)]
        verdicts: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        markdown: Option<PathBuf>,
    },
    /// Expert review service.
    Review {
        #[command(subcommand)]
        action: ReviewAction,
    },
    /// Configuration helpers.
    Config {
        #[command(subcommand)]
        action: ConfigAction,
    },
    /// End-to-end run on a synthetic corpus with the mock backend.
    Demo {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum ReviewAction {
    /// Serve the review HTTP API over a dataset directory.
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        data: PathBuf,
    },
    /// Write approved records and the updated candidate log.
    Export {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum ConfigAction {
    /// Write the default configuration.
    Init {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Backend {
    Mock,
    Remote,
    Local,
}

#[derive(Clone, Copy, ValueEnum)]
enum Stream {
    Local,
    Global,
}

#[derive(Clone, Copy, ValueEnum)]
enum Truth {
    Real,
    IdentityExchange,
    FacialAttributeManipulation,
    EntireFaceSynthesis,
}

struct CliError {
    kind: &'static str,
    message: String,
    code: u8,
}

trait Kind<T> {
    fn kind(self, kind: &'static str) -> Result<T, CliError>;
}

impl<T, E: Display> Kind<T> for Result<T, E> {
    fn kind(self, kind: &'static str) -> Result<T, CliError> {
        self.map_err(|e| CliError {
            kind,
            message: e.to_string(),
            code: 1,
        })
    }
}

fn usage(message: impl Into<String>) -> CliError {
    CliError {
        kind: "usage",
        message: message.into(),
        code: 2,
    }
}

fn load_config(c: &Common) -> Result<(Config, PathBuf), CliError> {
    let (mut cfg, base) = match &c.config {
        Some(p) => (
            Config::load(p).kind("config")?,
            p.parent().map(Path::to_path_buf).unwrap_or_default(),
        ),
        None => (Config::default(), PathBuf::from(".")),
    };
    if let Some(s) = c.seed {
        cfg.dataset.seed = s;
        cfg.backend.mock.seed = s;
        cfg.train.seed = s;
    }
    Ok((cfg, base))
}

fn manifest(p: &Path) -> Result<Manifest, CliError> {
    load_manifest(p).kind("manifest")
}

fn print(v: Value) {
    println!("{}", serde_json::to_string(&v).expect("json"));
}

fn checkpoint_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(CHECKPOINT_FILE)
    } else {
        p.to_path_buf()
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::BuildDataset {
            common,
            manifest: mpath,
            out,
            resume,
            stop_after,
        } => {
            let (cfg, base) = load_config(&common)?;
            let m = manifest(&mpath)?;
            let generator = cfg.generator([&m]).kind("backend")?;
            let pool = cfg.prompt_pool(&base).kind("prompts")?;
            let outcome = dataset::build_dataset(
                &m,
                generator.as_ref(),
                &pool,
                &cfg.build_config(),
                &out,
                resume,
                stop_after,
            )
            .kind("dataset")?;
            let counts: HashMap<&str, usize> = outcome
                .status_counts()
                .into_iter()
                .map(|(s, n)| (s.as_str(), n))
                .collect();
            print(json!({
                "candidate_log": out.join(CANDIDATE_LOG_FILE),
                "queried_this_run": outcome.queried_this_run,
                "queried_total": outcome.queried_total,
                "status_counts": counts,
            }));
        }
        Command::InjectHypothetical {
            common,
            input,
            out,
            fraction,
        } => {
            let (cfg, base) = load_config(&common)?;
            let fraction = fraction.unwrap_or(cfg.dataset.hypothetical_fraction);
            let records = dataset::read_vqa(&input).kind("dataset")?;
            let pool = cfg.prompt_pool(&base).kind("prompts")?;
            let injected =
                dataset::inject_hypothetical(&records, fraction, cfg.dataset.seed, &pool)
                    .kind("dataset")?;
            dataset::write_vqa(&out, &injected).kind("io")?;
            let k = injected
                .iter()
                .zip(&records)
                .filter(|(a, b)| a.prompt != b.prompt)
                .count();
            print(json!({"records": injected.len(), "hypothetical": k, "out": out}));
        }
        Command::ExportFinetune {
            common,
            input,
            manifest: mpath,
            out,
        } => {
            load_config(&common)?;
            let records = dataset::read_vqa(&input).kind("dataset")?;
            let rows =
                dataset::export_finetune(&records, &manifest(&mpath)?, &out).kind("dataset")?;
            print(json!({"conversations": rows.len(), "out": out}));
        }
        Command::MineTriplets {
            common,
            manifest: mpath,
            out,
            exclude_easy,
            resume,
        } => {
            let (cfg, base) = load_config(&common)?;
            let m = manifest(&mpath)?;
            let generator = cfg.generator([&m]).kind("backend")?;
            let pool = cfg.prompt_pool(&base).kind("prompts")?;
            let tg = TripletGenerator {
                generator: generator.as_ref(),
                pool: &pool,
                seed: cfg.dataset.seed,
            };
            let mined = dataset::mine_triplets(
                &m,
                &tg,
                exclude_easy,
                &out,
                resume,
                cfg.backend.max_concurrency,
            )
            .kind("dataset")?;
            let path = out.join("triplets.jsonl");
            dataset::write_triplets(&path, &mined.triplets).kind("io")?;
            print(json!({
                "triplets": mined.triplets.len(),
                "easy": mined.easy,
                "hard": mined.hard,
                "failed": mined.failed.len(),
                "out": path,
            }));
        }
        Command::TrainMids {
            common,
            data,
            manifest: mpath,
            out,
        } => {
            let (cfg, _) = load_config(&common)?;
            let m = manifest(&mpath)?;
            let triplets = dataset::read_triplets(&data).kind("dataset")?;
            let examples = trainer::expand_triplets(&triplets, &m).kind("train")?;
            let mut model = Mids::new(cfg.mids.clone()).kind("mids")?;
            let images = trainer::load_images(&model, &m, &examples).kind("train")?;
            let report =
                trainer::train(&mut model, &examples, &images, &cfg.train).kind("train")?;
            trainer::save_training_outputs(&out, &model, &report).kind("train")?;
            print(json!({
                "checkpoint": out.join(CHECKPOINT_FILE),
                "steps": report.steps,
                "train_examples": report.train_examples,
                "val_examples": report.val_examples,
                "best_val_acc": report.best_val_acc,
                "final_loss": report.metrics.last().map(|r| r.loss),
            }));
        }
        Command::Infer {
            common,
            image,
            manifest: mpath,
            truth,
            backend,
            mids,
            out,
            heatmap,
            heatmap_stream,
            resume,
        } => {
            let (mut cfg, base) = load_config(&common)?;
            if let Some(b) = backend {
                cfg.backend.kind = match b {
                    Backend::Mock => BackendKind::Mock,
                    Backend::Remote => BackendKind::Remote,
                    Backend::Local => BackendKind::Local,
                };
            }
            let model = Mids::load(&checkpoint_path(&mids)).kind("mids")?;
            let pool = cfg.prompt_pool(&base).kind("prompts")?;
            if let Some(image) = image {
                let image = std::path::absolute(&image).kind("io")?;
                let id = image
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "image".into());
                let truth_manifest = truth.map(|t| {
                    let (a, f) = match t {
                        Truth::Real => (Authenticity::Real, ForgeryType::None),
                        Truth::IdentityExchange => {
                            (Authenticity::Fake, ForgeryType::IdentityExchange)
                        }
                        Truth::FacialAttributeManipulation => {
                            (Authenticity::Fake, ForgeryType::FacialAttributeManipulation)
                        }
                        Truth::EntireFaceSynthesis => {
                            (Authenticity::Fake, ForgeryType::EntireFaceSynthesis)
                        }
                    };
                    Manifest::new(
                        "cli",
                        vec![FaceRecord {
                            id: id.clone(),
                            image_path: image.clone(),
                            authenticity: a,
                            forgery_type: f,
                            source: "cli".into(),
                            split: Split::Test,
                            reference_path: None,
                        }],
                    )
                });
                if cfg.backend.kind == BackendKind::Mock && truth_manifest.is_none() {
                    return Err(usage("the mock backend needs --truth for a single image"));
                }
                let generator = cfg.generator(truth_manifest.as_ref()).kind("backend")?;
                let tg = TripletGenerator {
                    generator: generator.as_ref(),
                    pool: &pool,
                    seed: cfg.dataset.seed,
                };
                let v = decision::analyze(&id, &image, &tg, &model).kind("decision")?;
                let text = serde_json::to_vec_pretty(&v).kind("io")?;
                ffaa_core::util::write_atomic(&out, &text).kind("io")?;
                if let Some(hpath) = heatmap {
                    let img = model.load_image(&image).kind("mids")?;
                    let input = model.input_for_answer(&img, &v.best_answer).kind("mids")?;
                    let best = &v.per_answer[v.best_role as usize];
                    let target = (0..4).fold(0, |b, k| if best.m[k] > best.m[b] { k } else { b });
                    let stream = match heatmap_stream {
                        Stream::Local => HeatmapStream::Local,
                        Stream::Global => HeatmapStream::Global,
                    };
                    let (w, h) = img.dimensions();
                    let map = model
                        .heatmap(&input, stream, target, w as usize, h as usize)
                        .kind("mids")?;
                    render_overlay(&img, &map).save(&hpath).kind("io")?;
                }
                print(json!({
                    "image_id": v.image_id,
                    "label": v.label,
                    "match_score": v.match_score,
                    "difficulty": v.difficulty,
                    "out": out,
                }));
            } else {
                let m = manifest(mpath.as_deref().expect("clap enforces image or manifest"))?;
                let generator = cfg.generator([&m]).kind("backend")?;
                let tg = TripletGenerator {
                    generator: generator.as_ref(),
                    pool: &pool,
                    seed: cfg.dataset.seed,
                };
                let outcome = decision::batch_analyze(
                    &m,
                    &tg,
                    &model,
                    &out,
                    resume,
                    cfg.backend.max_concurrency,
                )
                .kind("decision")?;
                print(json!({
                    "images": outcome.lines.len(),
                    "failures": outcome.failures().len(),
                    "out": out,
                }));
            }
        }
        Command::Bench {
            common,
            manifests,
            verdicts,
            out,
            markdown,
        } => {
            let (cfg, _) = load_config(&common)?;
            let mut paths: Vec<PathBuf> = std::fs::read_dir(&manifests)
                .kind("io")?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e == "jsonl"))
                .collect();
            paths.sort();
            if paths.is_empty() {
                return Err(usage(format!(
                    "no *.jsonl manifests in {}",
                    manifests.display()
                )));
            }
            let mut sets = Vec::new();
            for p in paths {
                let m = manifest(&p)?;
                let vpath = verdicts.join(p.file_name().expect("file"));
                let lines = decision::read_verdicts(&vpath).kind("decision")?;
                let map: HashMap<_, _> = lines
                    .into_iter()
                    .filter_map(|l| l.verdict.map(|v| (l.image_id, v)))
                    .collect();
                sets.push((m, map));
            }
            let report = bench::evaluate(&sets).kind("bench")?;
            let text = serde_json::to_vec_pretty(&report).kind("io")?;
            ffaa_core::util::write_atomic(&out, &text).kind("io")?;
            let md = markdown.or_else(|| cfg.bench.markdown.then(|| out.with_extension("md")));
            if let Some(md) = &md {
                ffaa_core::util::write_atomic(md, bench::render_markdown(&report).as_bytes())
                    .kind("io")?;
            }
            print(json!({
                "acc_pooled": report.overall.acc_pooled,
                "auc_pooled": report.overall.auc_pooled,
                "sacc": report.sacc,
                "out": out,
                "markdown": md,
            }));
        }
        Command::Review { action } => match action {
            ReviewAction::Serve { common, port, data } => {
                let (cfg, _) = load_config(&common)?;
                let token = std::env::var(&cfg.review.token_env).map_err(|_| {
                    usage(format!(
                        "set the reviewer token in ${}",
                        cfg.review.token_env
                    ))
                })?;
                let store = ReviewStore::open(&data).kind("review")?;
                let mut state = ffaa_review::ApiState::new(store, &token, &cfg.review.token_header)
                    .kind("config")?;
                state.default_page_size = cfg.review.page_size;
                let addr =
                    std::net::SocketAddr::from(([127, 0, 0, 1], port.unwrap_or(cfg.review.port)));
                eprintln!("review API listening on http://{addr}");
                let rt = tokio::runtime::Runtime::new().kind("io")?;
                rt.block_on(ffaa_review::serve(state, addr)).kind("io")?;
            }
            ReviewAction::Export { common, data, out } => {
                load_config(&common)?;
                let store = ReviewStore::open(&data).kind("review")?;
                let (vqa, log) = store.export().kind("review")?;
                dataset::write_vqa(&out, &vqa).kind("io")?;
                let log_path = data.join("candidate_log.final.jsonl");
                dataset::write_candidate_log(&log_path, &log).kind("io")?;
                print(json!({"approved": vqa.len(), "out": out, "candidate_log": log_path}));
            }
        },
        Command::Config { action } => match action {
            ConfigAction::Init {
                common: _,
                out,
                force,
            } => {
                if out.exists() && !force {
                    return Err(CliError {
                        kind: "io",
                        message: format!("{} exists (use --force)", out.display()),
                        code: 1,
                    });
                }
                std::fs::write(&out, DEFAULT_CONFIG).kind("io")?;
                print(json!({"out": out}));
            }
        },
        Command::Demo { common, out } => {
            let opts = DemoOptions::new(common.seed.unwrap_or(0), out.clone());
            let start = std::time::Instant::now();
            let s = run_demo(&opts).kind("demo")?;
            print(json!({
                "seed": s.seed,
                "heldout_acc": s.heldout_acc,
                "best_val_acc": s.best_val_acc,
                "hard_images": s.hard_images,
                "mids_acc_hard": s.mids_acc_hard,
                "anchor_acc_hard": s.anchor_acc_hard,
                "acc_pooled": s.report.overall.acc_pooled,
                "auc_pooled": s.report.overall.auc_pooled,
                "sacc": s.report.sacc,
                "elapsed_secs": start.elapsed().as_secs_f64(),
                "summary": out.join(ffaa_core::demo::SUMMARY_FILE),
            }));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ");
            eprintln!("{}", json!({"error": "usage", "message": first}));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({"error": e.kind, "message": e.message}));
            ExitCode::from(e.code)
        }
    }
}
