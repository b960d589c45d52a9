use std::path::Path;

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::encoders::{encoder_rng, VisionTokens};
use super::{patch_features, prepare_image, MidsConfig, MidsError, TextEncoder, VisionEncoder};
use crate::ffacot::{mask_result, parse_masked, FfaCotAnswer};
use crate::nn::{LayerNormParams, Matrix, MultiHeadAttention, ParamId, ParamStore, Tape, Var};
use crate::scalar::Scalar;

pub const NUM_CLASSES: usize = 4;
/// Tokens fed to the classification head.
pub const HF_SLOTS: usize = 6;

/// Which vision stream a cross-attention pair fuses with the text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionPair {
    Local = 0,
    Global = 1,
}

/// The four fused sequences that get a learnable aggregation query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggStream {
    /// Text queries over local vision tokens.
    TextToLocal = 0,
    /// Local vision queries over text tokens.
    LocalToText = 1,
    TextToGlobal = 2,
    GlobalToText = 3,
}

impl AggStream {
    pub const ALL: [AggStream; 4] = [
        AggStream::TextToLocal,
        AggStream::LocalToText,
        AggStream::TextToGlobal,
        AggStream::GlobalToText,
    ];

    fn tag(self) -> &'static str {
        match self {
            AggStream::TextToLocal => "t2vl",
            AggStream::LocalToText => "vl2t",
            AggStream::TextToGlobal => "t2vg",
            AggStream::GlobalToText => "vg2t",
        }
    }
}

/// Pre-computed network inputs for one (image, masked answer) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct MidsInput<T> {
    /// Frozen text features, `text_len × d`.
    pub text: Matrix<T>,
    /// Pooled patch features, `grid² × 48`.
    pub patches: Matrix<T>,
}

/// Joint class posterior; index `2·image + answer` (0 = real/real … 3 = fake/fake).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MidsOutput<T> {
    pub m: [T; NUM_CLASSES],
    pub logits: [T; NUM_CLASSES],
}

#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    pub f_t: Var,
    pub f_vl: Var,
    pub f_vg: Var,
    pub cls_vl: Var,
    pub cls_vg: Var,
}

/// Every intermediate a caller may want to inspect or differentiate.
#[derive(Debug, Clone)]
pub struct Trace {
    pub encoded: Encoded,
    /// Fused sequences indexed by [`AggStream`].
    pub fused: [Var; 4],
    /// Aggregated vectors indexed by [`AggStream`].
    pub aggregated: [Var; 4],
    pub h_f: Var,
    pub logits: Var,
    pub m: Var,
}

#[derive(Debug, Clone, Copy)]
struct CrossParams {
    /// Vision queries over text.
    v2t: MultiHeadAttention,
    v2t_ln: LayerNormParams,
    /// Text queries over vision.
    t2v: MultiHeadAttention,
    t2v_ln: LayerNormParams,
}

#[derive(Debug, Clone, Copy)]
struct AggParams {
    query: ParamId,
    attn: MultiHeadAttention,
    ln: LayerNormParams,
}

#[derive(Debug, Clone, Copy)]
struct HeadBlock {
    attn: MultiHeadAttention,
    ln: LayerNormParams,
}

#[derive(Debug, Clone)]
pub struct MidsModel<T> {
    config: MidsConfig,
    pub(crate) store: ParamStore<T>,
    text: TextEncoder,
    vision: VisionEncoder,
    proj_vl: ParamId,
    proj_vg: ParamId,
    proj_vl_cls: ParamId,
    proj_vg_cls: ParamId,
    cross: [CrossParams; 2],
    agg: [AggParams; 4],
    slots: ParamId,
    head: Vec<HeadBlock>,
    wc: ParamId,
    bc: ParamId,
    pub(crate) trained: bool,
}

impl<T: Scalar> MidsModel<T> {
    /// Builds a freshly initialised model. Encoder weights depend only on
    /// `encoder_seed`; everything else on `init_seed`.
    pub fn new(config: MidsConfig) -> Result<Self, MidsError> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut erng = encoder_rng(&config);
        let text = TextEncoder::new(&mut store, &config, &mut erng);
        let vision = VisionEncoder::new(&mut store, &config, &mut erng);

        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let (d, h, vw) = (config.d, config.heads, config.vision_width);
        let proj_vl = store.add_linear("proj.vl", vw, d, true, &mut rng);
        let proj_vg = store.add_linear("proj.vg", vw, d, true, &mut rng);
        let proj_vl_cls = store.add_linear("proj.vl_cls", vw, d, true, &mut rng);
        let proj_vg_cls = store.add_linear("proj.vg_cls", vw, d, true, &mut rng);

        let mut cross_for = |name: &str, store: &mut ParamStore<T>| CrossParams {
            v2t: MultiHeadAttention::new(
                store,
                &format!("cross.{name}.v2t"),
                d,
                d,
                d,
                h,
                true,
                &mut rng,
            ),
            v2t_ln: LayerNormParams::new(store, &format!("cross.{name}.v2t.ln"), d, true),
            t2v: MultiHeadAttention::new(
                store,
                &format!("cross.{name}.t2v"),
                d,
                d,
                d,
                h,
                true,
                &mut rng,
            ),
            t2v_ln: LayerNormParams::new(store, &format!("cross.{name}.t2v.ln"), d, true),
        };
        let cross = [
            cross_for("local", &mut store),
            cross_for("global", &mut store),
        ];

        let agg = AggStream::ALL.map(|s| {
            let p = format!("agg.{}", s.tag());
            AggParams {
                query: store.add_normal(format!("{p}.query"), 1, d, 1.0, true, &mut rng),
                attn: MultiHeadAttention::new(
                    &mut store,
                    &format!("{p}.attn"),
                    d,
                    d,
                    d,
                    h,
                    true,
                    &mut rng,
                ),
                ln: LayerNormParams::new(&mut store, &format!("{p}.ln"), d, true),
            }
        });

        let slots = store.add_normal("head.slots", HF_SLOTS, d, 0.1, true, &mut rng);
        let head = (0..config.sa_blocks)
            .map(|i| HeadBlock {
                attn: MultiHeadAttention::new(
                    &mut store,
                    &format!("head.block{i}.attn"),
                    d,
                    d,
                    d,
                    h,
                    true,
                    &mut rng,
                ),
                ln: LayerNormParams::new(&mut store, &format!("head.block{i}.ln"), d, true),
            })
            .collect();
        let wc = store.add_linear("head.wc", HF_SLOTS * d, NUM_CLASSES, true, &mut rng);
        let bc = store.add("head.bc", Matrix::zeros(1, NUM_CLASSES), true);

        Ok(Self {
            config,
            store,
            text,
            vision,
            proj_vl,
            proj_vg,
            proj_vl_cls,
            proj_vg_cls,
            cross,
            agg,
            slots,
            head,
            wc,
            bc,
            trained: false,
        })
    }

    pub fn config(&self) -> &MidsConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn mark_trained(&mut self) {
        self.trained = true;
    }

    /// Classifier weight and bias ids.
    pub fn classifier_ids(&self) -> (ParamId, ParamId) {
        (self.wc, self.bc)
    }

    /// Checksum of the (always frozen) text encoder.
    pub fn text_encoder_checksum(&self) -> String {
        self.store.checksum(|name, _| name.starts_with("text."))
    }

    /// Checksum of every currently frozen tensor.
    pub fn frozen_checksum(&self) -> String {
        self.store.checksum(|_, trainable| !trainable)
    }

    /// Builds inputs from a prepared image and masked answer text. Text that
    /// still carries a result section is refused.
    pub fn input(&self, image: &RgbImage, masked_text: &str) -> Result<MidsInput<T>, MidsError> {
        parse_masked(masked_text).map_err(|e| MidsError::NotMasked(e.to_string()))?;
        let size = self.config.image_size;
        let patches = if image.dimensions() == (size, size) {
            patch_features(image, self.config.grid)?
        } else {
            let prepared = prepare_image(&image::DynamicImage::ImageRgb8(image.clone()), size);
            patch_features(&prepared, self.config.grid)?
        };
        Ok(MidsInput {
            text: self.text.encode(&self.store, masked_text),
            patches,
        })
    }

    pub fn input_for_answer(
        &self,
        image: &RgbImage,
        answer: &FfaCotAnswer,
    ) -> Result<MidsInput<T>, MidsError> {
        self.input(image, &mask_result(answer))
    }

    /// Loads and resizes an image file to the network resolution.
    pub fn load_image(&self, path: &Path) -> Result<RgbImage, MidsError> {
        let img = image::open(path).map_err(|e| MidsError::Image {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Ok(prepare_image(&img, self.config.image_size))
    }

    pub fn encode(&self, tape: &mut Tape<T>, input: &MidsInput<T>) -> Result<Encoded, MidsError> {
        let cfg = &self.config;
        if input.text.shape() != (cfg.text_len, cfg.d) {
            return Err(MidsError::Shape(format!(
                "text features {:?}, expected {:?}",
                input.text.shape(),
                (cfg.text_len, cfg.d)
            )));
        }
        if input.patches.rows() != cfg.num_patches() {
            return Err(MidsError::Shape(format!(
                "{} patches, expected {}",
                input.patches.rows(),
                cfg.num_patches()
            )));
        }
        let f_t = tape.constant(input.text.clone());
        let VisionTokens { penultimate, last } =
            self.vision.forward(tape, &self.store, &input.patches);
        let n = cfg.num_patches();
        let mut split = |seq: Var, proj: ParamId, proj_cls: ParamId| {
            let cls = tape.slice_rows(seq, 0, 1);
            let toks = tape.slice_rows(seq, 1, n);
            let w = tape.param(&self.store, proj);
            let wc = tape.param(&self.store, proj_cls);
            (tape.matmul(toks, w), tape.matmul(cls, wc))
        };
        let (f_vl, cls_vl) = split(penultimate, self.proj_vl, self.proj_vl_cls);
        let (f_vg, cls_vg) = split(last, self.proj_vg, self.proj_vg_cls);
        Ok(Encoded {
            f_t,
            f_vl,
            f_vg,
            cls_vl,
            cls_vg,
        })
    }

    /// Dual cross-attention for one stream pair; returns `(text→vision,
    /// vision→text)`, i.e. text-length and vision-length sequences.
    pub fn cross_fuse(
        &self,
        tape: &mut Tape<T>,
        pair: FusionPair,
        f_t: Var,
        f_v: Var,
    ) -> Result<(Var, Var), MidsError> {
        let d = self.config.d;
        for (what, v) in [("text", f_t), ("vision", f_v)] {
            if tape.value(v).cols() != d {
                return Err(MidsError::Shape(format!(
                    "{what} width {} != d={d}",
                    tape.value(v).cols()
                )));
            }
        }
        let p = &self.cross[pair as usize];
        let t2v = p.t2v.forward(tape, &self.store, f_t, f_v).out;
        let t2v = p.t2v_ln.forward(tape, &self.store, t2v);
        let v2t = p.v2t.forward(tape, &self.store, f_v, f_t).out;
        let v2t = p.v2t_ln.forward(tape, &self.store, v2t);
        Ok((t2v, v2t))
    }

    /// Iterated query aggregation of a fused sequence to one `1 × d` vector.
    pub fn aggregate(
        &self,
        tape: &mut Tape<T>,
        stream: AggStream,
        f: Var,
    ) -> Result<Var, MidsError> {
        if tape.value(f).cols() != self.config.d {
            return Err(MidsError::Shape(format!(
                "aggregate input width {} != d={}",
                tape.value(f).cols(),
                self.config.d
            )));
        }
        let p = &self.agg[stream as usize];
        let (k, v) = p.attn.project_kv(tape, &self.store, f);
        let mut q = tape.param(&self.store, p.query);
        for _ in 0..self.config.agg_rounds {
            let a = p.attn.attend(tape, &self.store, q, k, v).out;
            q = p.ln.forward(tape, &self.store, a);
        }
        Ok(q)
    }

    /// Self-attention head over the six slots; returns `(logits, m)`.
    pub fn classify(&self, tape: &mut Tape<T>, h_f: Var) -> Result<(Var, Var), MidsError> {
        let shape = tape.value(h_f).shape();
        if shape != (HF_SLOTS, self.config.d) {
            return Err(MidsError::Shape(format!(
                "head input {shape:?}, expected ({HF_SLOTS}, {})",
                self.config.d
            )));
        }
        let slots = tape.param(&self.store, self.slots);
        let mut h = tape.add(h_f, slots);
        for b in &self.head {
            let a = b.attn.forward(tape, &self.store, h, h).out;
            let s = tape.add(h, a);
            h = b.ln.forward(tape, &self.store, s);
        }
        let flat = tape.reshape(h, 1, HF_SLOTS * self.config.d);
        let wc = tape.param(&self.store, self.wc);
        let bc = tape.param(&self.store, self.bc);
        let z = tape.matmul(flat, wc);
        let logits = tape.add_row(z, bc);
        let m = tape.softmax_rows(logits);
        Ok((logits, m))
    }

    pub fn forward(&self, tape: &mut Tape<T>, input: &MidsInput<T>) -> Result<Trace, MidsError> {
        let e = self.encode(tape, input)?;
        let (t2vl, vl2t) = self.cross_fuse(tape, FusionPair::Local, e.f_t, e.f_vl)?;
        let (t2vg, vg2t) = self.cross_fuse(tape, FusionPair::Global, e.f_t, e.f_vg)?;
        let fused = [t2vl, vl2t, t2vg, vg2t];
        let mut aggregated = fused;
        for s in AggStream::ALL {
            aggregated[s as usize] = self.aggregate(tape, s, fused[s as usize])?;
        }
        let [a_t2vl, a_vl2t, a_t2vg, a_vg2t] = aggregated;
        let h_f = tape.concat_rows(&[e.cls_vg, a_t2vg, a_vg2t, e.cls_vl, a_t2vl, a_vl2t]);
        let (logits, m) = self.classify(tape, h_f)?;
        Ok(Trace {
            encoded: e,
            fused,
            aggregated,
            h_f,
            logits,
            m,
        })
    }

    /// Mean negative log-likelihood of `labels` over per-example outputs.
    pub fn loss(&self, tape: &mut Tape<T>, ms: &[Var], labels: &[usize]) -> Var {
        assert_eq!(ms.len(), labels.len(), "one label per output");
        assert!(!ms.is_empty(), "empty batch");
        let parts: Vec<Var> = ms
            .iter()
            .zip(labels)
            .map(|(&m, &y)| tape.neg_log_pick(m, y))
            .collect();
        tape.mean(&parts)
    }

    pub fn predict(&self, input: &MidsInput<T>) -> Result<MidsOutput<T>, MidsError> {
        let mut tape = Tape::new();
        let t = self.forward(&mut tape, input)?;
        Ok(output_of(&tape, &t))
    }
}

pub(crate) fn output_of<T: Scalar>(tape: &Tape<T>, trace: &Trace) -> MidsOutput<T> {
    let row = |v: Var| {
        let m = tape.value(v);
        [m.get(0, 0), m.get(0, 1), m.get(0, 2), m.get(0, 3)]
    };
    MidsOutput {
        m: row(trace.m),
        logits: row(trace.logits),
    }
}

/// Mean `-ln(max(m[y], 1e-12))` over a batch of class posteriors.
pub fn cross_entropy<T: Scalar>(ms: &[[T; NUM_CLASSES]], labels: &[usize]) -> T {
    assert_eq!(ms.len(), labels.len(), "one label per output");
    assert!(!ms.is_empty(), "empty batch");
    let clamp = T::of(crate::nn::LOG_CLAMP);
    let total: T = ms
        .iter()
        .zip(labels)
        .map(|(m, &y)| -(m[y].max(clamp)).ln())
        .sum();
    total / T::of(ms.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ffacot::{AnalysisResult, FfaCotAnswer};
    use crate::model::{Authenticity, ForgeryType};

    fn model() -> MidsModel<f64> {
        MidsModel::new(MidsConfig::default()).unwrap()
    }

    fn image(seed: u8) -> RgbImage {
        RgbImage::from_fn(224, 224, |x, y| {
            image::Rgb([(x as u8).wrapping_mul(seed), (y as u8) ^ seed, seed])
        })
    }

    fn answer(label: Authenticity, ft: ForgeryType, p: f64) -> FfaCotAnswer {
        FfaCotAnswer::new(
            "A frontal face in soft light.",
            "Skin texture looks natural.",
            AnalysisResult::new(label, p, ft).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn encode_shapes() {
        let m = model();
        let a = answer(Authenticity::Real, ForgeryType::None, 0.9);
        let input = m.input_for_answer(&image(3), &a).unwrap();
        let mut tape = Tape::new();
        let e = m.encode(&mut tape, &input).unwrap();
        assert_eq!(tape.value(e.f_t).shape(), (64, 32));
        assert_eq!(tape.value(e.f_vl).shape(), (16, 32));
        assert_eq!(tape.value(e.f_vg).shape(), (16, 32));
        assert_eq!(tape.value(e.cls_vl).shape(), (1, 32));
        assert_eq!(tape.value(e.cls_vg).shape(), (1, 32));
    }

    #[test]
    fn unmasked_text_is_refused() {
        let m = model();
        let a = answer(Authenticity::Real, ForgeryType::None, 0.9);
        assert!(matches!(
            m.input(&image(1), &a.raw_text),
            Err(MidsError::NotMasked(_))
        ));
    }

    #[test]
    fn masked_answers_share_text_features() {
        let m = model();
        let a = answer(Authenticity::Real, ForgeryType::None, 0.9);
        let b = answer(Authenticity::Fake, ForgeryType::EntireFaceSynthesis, 0.7);
        let ia = m.input_for_answer(&image(5), &a).unwrap();
        let ib = m.input_for_answer(&image(5), &b).unwrap();
        assert_eq!(ia.text, ib.text);
        assert_eq!(m.predict(&ia).unwrap(), m.predict(&ib).unwrap());
    }

    #[test]
    fn cross_fuse_shapes_and_attention_rows() {
        let m = model();
        let mut tape = Tape::new();
        let t = tape.constant(Matrix::from_fn(7, 32, |r, c| ((r * 3 + c) as f64).sin()));
        let v = tape.constant(Matrix::from_fn(5, 32, |r, c| ((r + 2 * c) as f64).cos()));
        let (t2v, v2t) = m.cross_fuse(&mut tape, FusionPair::Local, t, v).unwrap();
        assert_eq!(tape.value(t2v).shape(), (7, 32));
        assert_eq!(tape.value(v2t).shape(), (5, 32));
        let att = m.cross[0].t2v.forward(&mut tape, &m.store, t, v);
        for w in att.weights {
            for r in 0..7 {
                let s: f64 = tape.value(w).row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
        let bad = tape.constant(Matrix::zeros(3, 16));
        assert!(matches!(
            m.cross_fuse(&mut tape, FusionPair::Global, t, bad),
            Err(MidsError::Shape(_))
        ));
    }

    /// Per-head reference for the single-token case: weight 1, output LN(V Wo).
    #[test]
    fn single_token_cross_attention_is_layer_norm_of_values() {
        let m = model();
        let mut tape = Tape::new();
        let t = tape.constant(Matrix::from_fn(1, 32, |_, c| (c as f64 * 0.3).sin()));
        let v = tape.constant(Matrix::from_fn(1, 32, |_, c| (c as f64 * 0.7).cos()));
        let p = &m.cross[1];
        let att = p.t2v.forward(&mut tape, &m.store, t, v);
        for w in &att.weights {
            assert_eq!(tape.value(*w).get(0, 0), 1.0);
        }
        let (t2v, _) = m.cross_fuse(&mut tape, FusionPair::Global, t, v).unwrap();
        let vals = tape
            .value(v)
            .matmul(m.store.get(p.t2v.wv))
            .matmul(m.store.get(p.t2v.wo));
        let expect = layer_norm_ref(
            &vals,
            m.store.get(p.t2v_ln.gamma),
            m.store.get(p.t2v_ln.beta),
        );
        assert!(tape.value(t2v).max_abs_diff(&expect) < 1e-12);
    }

    fn layer_norm_ref(x: &Matrix<f64>, g: &Matrix<f64>, b: &Matrix<f64>) -> Matrix<f64> {
        Matrix::from_fn(x.rows(), x.cols(), |r, c| {
            let row = x.row(r);
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            (row[c] - mean) / (var + 1e-5).sqrt() * g.get(0, c) + b.get(0, c)
        })
    }

    #[test]
    fn one_round_over_identical_tokens() {
        let mut m = MidsModel::<f64>::new(MidsConfig {
            agg_rounds: 1,
            ..MidsConfig::default()
        })
        .unwrap();
        // non-trivial affine so the check is not vacuous
        let ln = m.agg[2].ln;
        *m.store.get_mut(ln.gamma) = Matrix::from_fn(1, 32, |_, c| 1.0 + 0.01 * c as f64);
        let tok: Vec<f64> = (0..32).map(|c| (c as f64 * 0.11).sin()).collect();
        let mut tape = Tape::new();
        let f = tape.constant(Matrix::from_fn(9, 32, |_, c| tok[c]));
        let out = m.aggregate(&mut tape, AggStream::TextToGlobal, f).unwrap();
        let p = &m.agg[2];
        let v = Matrix::row_vector(tok)
            .matmul(m.store.get(p.attn.wv))
            .matmul(m.store.get(p.attn.wo));
        let expect = layer_norm_ref(&v, m.store.get(ln.gamma), m.store.get(ln.beta));
        assert!(tape.value(out).max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn classify_with_zero_classifier_is_uniform() {
        let mut m = model();
        let (wc, bc) = m.classifier_ids();
        *m.store.get_mut(wc) = Matrix::zeros(HF_SLOTS * 32, 4);
        *m.store.get_mut(bc) = Matrix::zeros(1, 4);
        let mut tape = Tape::new();
        let h = tape.constant(Matrix::from_fn(6, 32, |r, c| (r * c) as f64 * 0.01));
        let (_, mv) = m.classify(&mut tape, h).unwrap();
        for i in 0..4 {
            assert_eq!(tape.value(mv).get(0, i), 0.25);
        }
        let wrong = tape.constant(Matrix::zeros(5, 32));
        assert!(m.classify(&mut tape, wrong).is_err());
    }

    #[test]
    fn no_head_blocks_is_linear_softmax() {
        let m = MidsModel::<f64>::new(MidsConfig {
            sa_blocks: 0,
            ..MidsConfig::default()
        })
        .unwrap();
        let mut tape = Tape::new();
        let hv = Matrix::from_fn(6, 32, |r, c| ((r + c) as f64 * 0.2).sin());
        let h = tape.constant(hv.clone());
        let (logits, _) = m.classify(&mut tape, h).unwrap();
        let mut x = hv;
        x.add_assign(m.store.get(m.slots));
        let mut expect = x.reshape(1, 192).matmul(m.store.get(m.wc));
        expect.add_assign(m.store.get(m.bc));
        assert!(tape.value(logits).max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn output_is_on_simplex_and_deterministic() {
        let a = model();
        let b = model();
        let ans = answer(Authenticity::Fake, ForgeryType::IdentityExchange, 0.8);
        let input = a.input_for_answer(&image(9), &ans).unwrap();
        let oa = a.predict(&input).unwrap();
        let ob = b.predict(&input).unwrap();
        assert_eq!(oa, ob);
        let s: f64 = oa.m.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(oa.m.iter().all(|&p| p > 0.0));
    }

    #[test]
    fn cross_entropy_reference_values() {
        let u = [[0.25f64; 4]];
        assert!((cross_entropy(&u, &[2]) - 4f64.ln()).abs() < 1e-15);
        let a = [0.7, 0.1, 0.1, 0.1];
        let b = [0.1, 0.2, 0.3, 0.4];
        let l = cross_entropy(&[a, b], &[0, 3]);
        assert!((l - (-(0.7f64.ln()) - 0.4f64.ln()) / 2.0).abs() < 1e-15);
        assert!((cross_entropy(&[[0.0, 1.0, 0.0, 0.0]], &[0]) - 1e12f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn f32_model_runs() {
        let m = MidsModel::<f32>::new(MidsConfig::default()).unwrap();
        let ans = answer(Authenticity::Real, ForgeryType::None, 0.9);
        let out = m
            .predict(&m.input_for_answer(&image(2), &ans).unwrap())
            .unwrap();
        let s: f32 = out.m.iter().sum();
        assert!((s - 1.0).abs() < 1e-5);
    }
}
