//! MIDS training: triplet expansion into labelled pairs, AdamW with global
//! gradient clipping, held-out selection of the best checkpoint.

mod augment;

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use augment::{augment, AugmentConfig};

use crate::dataset::{item_seed, TripletRecord};
use crate::ffacot::FfaCotAnswer;
use crate::mids::{MidsError, MidsInput, MidsModel};
use crate::model::{assign_class_label, Manifest};
use crate::nn::{Matrix, ParamId, Tape};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("triplet references unknown image {0}")]
    UnknownImage(String),
    #[error("loss became non-finite at step {step}")]
    Divergence { step: usize },
    #[error("no training examples")]
    Empty,
    #[error("invalid train config: {0}")]
    Config(String),
    #[error(transparent)]
    Mids(#[from] MidsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainExample {
    pub image_id: String,
    pub answer: FfaCotAnswer,
    pub y: usize,
}

/// Three labelled examples per triplet (anchor, positive, negative).
pub fn expand_triplets(
    triplets: &[TripletRecord],
    manifest: &Manifest,
) -> Result<Vec<TrainExample>, TrainError> {
    let mut out = Vec::with_capacity(triplets.len() * 3);
    for t in triplets {
        let rec = manifest
            .get(&t.image_id)
            .ok_or_else(|| TrainError::UnknownImage(t.image_id.clone()))?;
        for a in t.answers() {
            out.push(TrainExample {
                image_id: t.image_id.clone(),
                answer: a.clone(),
                y: assign_class_label(rec.authenticity, a.verdict()),
            });
        }
    }
    Ok(out)
}

pub fn label_histogram(examples: &[TrainExample]) -> [usize; 4] {
    let mut h = [0; 4];
    for e in examples {
        h[e.y] += 1;
    }
    h
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Fraction of image ids held out for checkpoint selection.
    pub val_fraction: f64,
    pub seed: u64,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 48,
            epochs: 2,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            val_fraction: 0.1,
            seed: 0,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 {
            return bad("learning_rate must be positive and weight_decay non-negative");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be >= 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.val_fraction) || self.grad_clip < 0.0 {
            return bad("val_fraction must lie in [0, 1) and grad_clip be non-negative");
        }
        self.augment.validate().map_err(TrainError::Config)
    }
}

/// AdamW with decoupled weight decay over the trainable tensors.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    lr: T,
    beta1: T,
    beta2: T,
    eps: T,
    weight_decay: T,
    step: i32,
    moments: HashMap<ParamId, (Matrix<T>, Matrix<T>)>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr: T::of(cfg.learning_rate),
            beta1: T::of(cfg.beta1),
            beta2: T::of(cfg.beta2),
            eps: T::of(cfg.adam_eps),
            weight_decay: T::of(cfg.weight_decay),
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn step(&mut self, model: &mut MidsModel<T>, grads: &[(ParamId, Matrix<T>)]) {
        self.step += 1;
        let bc1 = T::one() - self.beta1.powi(self.step);
        let bc2 = T::one() - self.beta2.powi(self.step);
        let one = T::one();
        for (id, g) in grads {
            let (rows, cols) = g.shape();
            let (m, v) = self
                .moments
                .entry(*id)
                .or_insert_with(|| (Matrix::zeros(rows, cols), Matrix::zeros(rows, cols)));
            let p = model.params_mut().get_mut(*id);
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = self.beta1 * *mv + (one - self.beta1) * gv;
                *vv = self.beta2 * *vv + (one - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *pv);
            }
        }
    }
}

/// Scales gradients in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [(ParamId, Matrix<T>)], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|(_, g)| g.sum_sq().to_f64_lossy())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::of(max_norm / norm);
        for (_, g) in grads.iter_mut() {
            *g = g.scaled(s);
        }
    }
    norm
}

/// Mean loss and summed-then-averaged gradients over a batch of inputs.
pub fn batch_gradients<T: Scalar>(
    model: &MidsModel<T>,
    batch: &[(&MidsInput<T>, usize)],
) -> Result<(f64, Vec<(ParamId, Matrix<T>)>), MidsError> {
    let mut acc: Vec<Option<Matrix<T>>> = vec![None; model.params().len()];
    let mut loss = 0.0;
    for (input, y) in batch {
        let mut tape = Tape::new();
        let trace = model.forward(&mut tape, input)?;
        let l = tape.neg_log_pick(trace.m, *y);
        loss += tape.scalar(l).to_f64_lossy();
        let grads = tape.backward(l);
        for (id, g) in grads.params() {
            match &mut acc[id.index()] {
                Some(a) => a.add_assign(g),
                slot => *slot = Some(g.clone()),
            }
        }
    }
    let inv = T::of(1.0 / batch.len() as f64);
    let grads = model
        .params()
        .ids()
        .filter_map(|id| acc[id.index()].take().map(|g| (id, g.scaled(inv))))
        .collect();
    Ok((loss / batch.len() as f64, grads))
}

/// Four-class accuracy (argmax of m) over labelled inputs.
pub fn accuracy_on<T: Scalar>(
    model: &MidsModel<T>,
    data: &[(&MidsInput<T>, usize)],
) -> Result<f64, MidsError> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for (input, y) in data {
        let m = model.predict(input)?.m;
        let mut best = 0;
        for k in 1..4 {
            if m[k] > m[best] {
                best = k;
            }
        }
        correct += usize::from(best == *y);
    }
    Ok(correct as f64 / data.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub loss: f64,
    /// Present on the last step of each epoch.
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub metrics: Vec<MetricRow>,
    pub steps: usize,
    pub train_examples: usize,
    pub val_examples: usize,
    pub val_image_ids: Vec<String>,
    pub best_val_acc: Option<f64>,
    pub best_step: usize,
    pub label_histogram: [usize; 4],
}

/// Held-out image ids: a seeded `val_fraction` of the distinct ids (at least
/// one when there are two or more images).
pub fn split_image_ids(examples: &[TrainExample], fraction: f64, seed: u64) -> BTreeSet<String> {
    let ids: BTreeSet<&str> = examples.iter().map(|e| e.image_id.as_str()).collect();
    let mut ids: Vec<&str> = ids.into_iter().collect();
    if ids.len() < 2 || fraction <= 0.0 {
        return BTreeSet::new();
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_7a1d));
    let n_val = ((ids.len() as f64 * fraction).round() as usize).clamp(1, ids.len() - 1);
    ids[..n_val].iter().map(|s| s.to_string()).collect()
}

/// Trains `model` in place. When a held-out split exists, the parameters
/// with the best held-out accuracy (earliest on ties) are restored at the end.
pub fn train<T: Scalar>(
    model: &mut MidsModel<T>,
    examples: &[TrainExample],
    images: &HashMap<String, RgbImage>,
    cfg: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(TrainError::Empty);
    }
    let val_ids = split_image_ids(examples, cfg.val_fraction, cfg.seed);
    let image_of = |id: &str| {
        images
            .get(id)
            .ok_or_else(|| TrainError::UnknownImage(id.to_string()))
    };
    let mut train_idx = Vec::new();
    let mut val_inputs = Vec::new();
    // Text features are frozen, so they are computed once per example.
    let mut texts = Vec::with_capacity(examples.len());
    for (i, e) in examples.iter().enumerate() {
        let input = model.input_for_answer(image_of(&e.image_id)?, &e.answer)?;
        if val_ids.contains(&e.image_id) {
            val_inputs.push((input, e.y));
            texts.push(None);
        } else {
            train_idx.push(i);
            texts.push(Some(input));
        }
    }
    if train_idx.is_empty() {
        return Err(TrainError::Empty);
    }

    let mut opt = AdamW::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut metrics = Vec::new();
    let mut best: Option<(f64, usize, crate::nn::ParamStore<T>)> = None;
    let mut step = 0usize;
    for _epoch in 0..cfg.epochs {
        train_idx.shuffle(&mut rng);
        for batch_idx in train_idx.chunks(cfg.batch_size) {
            let inputs: Vec<MidsInput<T>> = batch_idx
                .iter()
                .map(|&i| {
                    let base = texts[i].as_ref().expect("train example input");
                    if !cfg.augment.enabled {
                        return Ok(base.clone());
                    }
                    let e = &examples[i];
                    let seed = u64::from_le_bytes(
                        item_seed(cfg.seed, &format!("augment:{step}"), &format!("{i}"))[..8]
                            .try_into()
                            .unwrap(),
                    );
                    let img = augment(image_of(&e.image_id)?, &cfg.augment, seed);
                    Ok(MidsInput {
                        text: base.text.clone(),
                        patches: crate::mids::patch_features(&img, model.config().grid)?,
                    })
                })
                .collect::<Result<_, TrainError>>()?;
            let batch: Vec<(&MidsInput<T>, usize)> = inputs
                .iter()
                .zip(batch_idx)
                .map(|(inp, &i)| (inp, examples[i].y))
                .collect();
            let (loss, mut grads) = batch_gradients(model, &batch)?;
            if !loss.is_finite() {
                return Err(TrainError::Divergence { step });
            }
            clip_global_norm(&mut grads, cfg.grad_clip);
            opt.step(model, &grads);
            step += 1;
            metrics.push(MetricRow {
                step,
                loss,
                val_acc: None,
            });
        }
        if !val_inputs.is_empty() {
            let data: Vec<(&MidsInput<T>, usize)> =
                val_inputs.iter().map(|(i, y)| (i, *y)).collect();
            let acc = accuracy_on(model, &data)?;
            metrics.last_mut().expect("at least one step").val_acc = Some(acc);
            if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
                best = Some((acc, step, model.params().clone()));
            }
        }
    }
    let (best_val_acc, best_step) = match best {
        Some((acc, s, params)) => {
            *model.params_mut() = params;
            (Some(acc), s)
        }
        None => (None, step),
    };
    model.mark_trained();
    Ok(TrainReport {
        metrics,
        steps: step,
        train_examples: train_idx.len(),
        val_examples: val_inputs.len(),
        val_image_ids: val_ids.into_iter().collect(),
        best_val_acc,
        best_step,
        label_histogram: label_histogram(examples),
    })
}

pub const CHECKPOINT_FILE: &str = "mids.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const REPORT_FILE: &str = "train_report.json";

#[derive(Serialize)]
struct CsvRow {
    step: usize,
    loss: f64,
    val_acc: Option<f64>,
}

/// Writes the checkpoint, `metrics.csv` (step, loss, val_acc) and the report.
pub fn save_training_outputs<T: Scalar>(
    out_dir: &Path,
    model: &MidsModel<T>,
    report: &TrainReport,
) -> Result<(), TrainError> {
    std::fs::create_dir_all(out_dir)?;
    model.save(&out_dir.join(CHECKPOINT_FILE))?;
    let mut w = csv::Writer::from_path(out_dir.join(METRICS_FILE))?;
    for r in &report.metrics {
        w.serialize(CsvRow {
            step: r.step,
            loss: r.loss,
            val_acc: r.val_acc,
        })?;
    }
    w.flush()?;
    let json = serde_json::to_vec_pretty(report).map_err(std::io::Error::other)?;
    crate::util::write_atomic(&out_dir.join(REPORT_FILE), &json)?;
    Ok(())
}

/// Loads every image referenced by `examples`, resized for `model`.
pub fn load_images<T: Scalar>(
    model: &MidsModel<T>,
    manifest: &Manifest,
    examples: &[TrainExample],
) -> Result<HashMap<String, RgbImage>, TrainError> {
    let mut out = HashMap::new();
    for e in examples {
        if out.contains_key(&e.image_id) {
            continue;
        }
        let rec = manifest
            .get(&e.image_id)
            .ok_or_else(|| TrainError::UnknownImage(e.image_id.clone()))?;
        out.insert(e.image_id.clone(), model.load_image(&rec.image_path)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ffacot::AnalysisResult;
    use crate::mids::MidsConfig;
    use crate::model::{Authenticity, FaceRecord, ForgeryType, Prompt, Split};

    fn ans(v: Authenticity) -> FfaCotAnswer {
        let ft = match v {
            Authenticity::Real => ForgeryType::None,
            Authenticity::Fake => ForgeryType::IdentityExchange,
        };
        FfaCotAnswer::new(
            "A face.",
            "Reasoning.",
            AnalysisResult::new(v, 0.9, ft).unwrap(),
        )
        .unwrap()
    }

    fn triplet(id: &str, vs: [Authenticity; 3]) -> TripletRecord {
        TripletRecord {
            image_id: id.into(),
            anchor: ans(vs[0]),
            positive: ans(vs[1]),
            negative: ans(vs[2]),
            anchor_prompt: Prompt::non_hypothetical("q"),
            positive_prompt: Prompt::hypothetical(vs[0], "real or fake"),
            negative_prompt: Prompt::hypothetical(vs[0].negate(), "real or fake"),
        }
    }

    fn manifest() -> Manifest {
        let rec = |id: &str, a: Authenticity| FaceRecord {
            id: id.into(),
            image_path: format!("/x/{id}.png").into(),
            authenticity: a,
            forgery_type: if a == Authenticity::Real {
                ForgeryType::None
            } else {
                ForgeryType::IdentityExchange
            },
            source: "t".into(),
            split: Split::Train,
            reference_path: None,
        };
        Manifest::new(
            "m",
            vec![rec("f", Authenticity::Fake), rec("r", Authenticity::Real)],
        )
    }

    #[test]
    fn expansion_labels() {
        use Authenticity::*;
        let ex = expand_triplets(
            &[
                triplet("f", [Fake, Fake, Real]),
                triplet("r", [Real, Real, Real]),
            ],
            &manifest(),
        )
        .unwrap();
        assert_eq!(
            ex.iter().map(|e| e.y).collect::<Vec<_>>(),
            vec![3, 3, 2, 0, 0, 0]
        );
        assert_eq!(label_histogram(&ex), [3, 0, 1, 2]);
        assert!(matches!(
            expand_triplets(&[triplet("nope", [Real; 3])], &manifest()),
            Err(TrainError::UnknownImage(_))
        ));
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut g = vec![
            (ParamId(0), Matrix::from_vec(1, 2, vec![3.0f64, 0.0])),
            (ParamId(1), Matrix::from_vec(1, 1, vec![4.0])),
        ];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        let n: f64 = g.iter().map(|(_, m)| m.sum_sq()).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
        let mut small = vec![(ParamId(0), Matrix::from_vec(1, 1, vec![0.5f64]))];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].1.get(0, 0), 0.5);
    }

    /// One AdamW step against a hand-computed update.
    #[test]
    fn adamw_first_step() {
        let mut model = MidsModel::<f64>::new(MidsConfig::default()).unwrap();
        let (_, bc) = model.classifier_ids();
        *model.params_mut().get_mut(bc) = Matrix::from_vec(1, 4, vec![1.0, -1.0, 0.5, 0.0]);
        let cfg = TrainConfig {
            learning_rate: 0.1,
            weight_decay: 0.01,
            ..TrainConfig::default()
        };
        let mut opt = AdamW::new(&cfg);
        let g = Matrix::from_vec(1, 4, vec![0.2, -0.4, 0.0, 1e-3]);
        opt.step(&mut model, &[(bc, g.clone())]);
        let p = model.params().get(bc);
        for (k, &p0) in [1.0, -1.0, 0.5, 0.0].iter().enumerate() {
            let gk: f64 = g.get(0, k);
            // first step: m̂ = g, v̂ = g²
            let upd = if gk == 0.0 {
                0.0
            } else {
                gk / (gk.abs() + 1e-8)
            };
            let expect = p0 - 0.1 * (upd + 0.01 * p0);
            assert!((p.get(0, k) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn split_never_divides_an_image() {
        let ex: Vec<TrainExample> = (0..60)
            .map(|i| TrainExample {
                image_id: format!("img{}", i / 3),
                answer: ans(Authenticity::Real),
                y: 0,
            })
            .collect();
        let val = split_image_ids(&ex, 0.1, 7);
        assert_eq!(val.len(), 2);
        assert_eq!(val, split_image_ids(&ex, 0.1, 7));
        let n_val = ex.iter().filter(|e| val.contains(&e.image_id)).count();
        assert_eq!(n_val, 6);
    }
}
