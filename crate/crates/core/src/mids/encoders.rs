//! Seeded toy encoders: a frozen hashed-vocabulary text encoder and a small
//! patch transformer whose last two blocks can be fine-tuned.

use image::{imageops::FilterType, DynamicImage, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{MidsConfig, MidsError};
use crate::nn::{LayerNormParams, Matrix, MultiHeadAttention, ParamId, ParamStore, Tape, Var};
use crate::scalar::Scalar;

/// Each patch is average-pooled to `POOL_CELLS × POOL_CELLS` RGB cells.
pub const POOL_CELLS: usize = 4;
pub const PATCH_FEATURES: usize = POOL_CELLS * POOL_CELLS * 3;

/// Lower-cased alphanumeric words, plus the mask placeholder as one token.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect()
}

fn fnv1a(word: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in word.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Frozen text encoder: hashed word embedding + position, then `tanh(x W)`.
#[derive(Debug, Clone, Copy)]
pub struct TextEncoder {
    embed: ParamId,
    pos: ParamId,
    proj: ParamId,
    len: usize,
    vocab: usize,
}

impl TextEncoder {
    pub(crate) fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        cfg: &MidsConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let d = cfg.d;
        Self {
            embed: store.add_normal("text.embed", cfg.text_vocab, d, 1.0, false, rng),
            pos: store.add_normal("text.pos", cfg.text_len, d, 0.1, false, rng),
            proj: store.add_linear("text.proj", d, d, false, rng),
            len: cfg.text_len,
            vocab: cfg.text_vocab,
        }
    }

    /// Token ids, truncated/padded to the configured length (0 = padding).
    pub fn token_ids(&self, text: &str) -> Vec<usize> {
        let mut ids: Vec<usize> = tokenize(text)
            .iter()
            .take(self.len)
            .map(|w| 1 + (fnv1a(w) % (self.vocab as u64 - 1)) as usize)
            .collect();
        ids.resize(self.len, 0);
        ids
    }

    /// `text_len × d` features. The encoder is always frozen, so this runs
    /// outside any tape.
    pub fn encode<T: Scalar>(&self, store: &ParamStore<T>, text: &str) -> Matrix<T> {
        let emb = store.get(self.embed);
        let pos = store.get(self.pos);
        let d = emb.cols();
        let mut x = Matrix::zeros(self.len, d);
        for (r, id) in self.token_ids(text).into_iter().enumerate() {
            for c in 0..d {
                x.set(r, c, emb.get(id, c) + pos.get(r, c));
            }
        }
        x.matmul(store.get(self.proj)).map(|v| v.tanh())
    }

    pub fn param_ids(&self) -> [ParamId; 3] {
        [self.embed, self.pos, self.proj]
    }
}

/// Resizes to the square network input.
pub fn prepare_image(img: &DynamicImage, size: u32) -> RgbImage {
    let rgb = img.to_rgb8();
    if rgb.dimensions() == (size, size) {
        rgb
    } else {
        image::imageops::resize(&rgb, size, size, FilterType::Triangle)
    }
}

/// `grid² × 48` patch features in [-1, 1]: every patch is average-pooled to
/// 4×4 RGB cells. Patches are in row-major grid order.
pub fn patch_features<T: Scalar>(img: &RgbImage, grid: usize) -> Result<Matrix<T>, MidsError> {
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    if w != h || w % (grid * POOL_CELLS) != 0 {
        return Err(MidsError::Shape(format!(
            "image {w}x{h} does not split into a {grid}x{grid} patch grid"
        )));
    }
    let patch = w / grid;
    let cell = patch / POOL_CELLS;
    let norm = 1.0 / (cell * cell) as f64 / 255.0;
    let mut out = Matrix::zeros(grid * grid, PATCH_FEATURES);
    for py in 0..grid {
        for px in 0..grid {
            let row = py * grid + px;
            for cy in 0..POOL_CELLS {
                for cx in 0..POOL_CELLS {
                    let mut acc = [0.0f64; 3];
                    for y in 0..cell {
                        for x in 0..cell {
                            let p = img.get_pixel(
                                (px * patch + cx * cell + x) as u32,
                                (py * patch + cy * cell + y) as u32,
                            );
                            for k in 0..3 {
                                acc[k] += p[k] as f64;
                            }
                        }
                    }
                    for k in 0..3 {
                        let v = acc[k] * norm * 2.0 - 1.0;
                        out.set(row, (cy * POOL_CELLS + cx) * 3 + k, T::of(v));
                    }
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
struct VisionBlock {
    attn: MultiHeadAttention,
    ln1: LayerNormParams,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    ln2: LayerNormParams,
}

/// Patch transformer with a leading class token. Blocks are
/// `x ← LN(x + SelfAttn(x))`, `x ← LN(x + tanh(x W1 + b1) W2)`.
#[derive(Debug, Clone)]
pub struct VisionEncoder {
    embed: ParamId,
    cls: ParamId,
    pos: ParamId,
    blocks: Vec<VisionBlock>,
}

/// Penultimate and final token sequences (class token first).
#[derive(Debug, Clone, Copy)]
pub struct VisionTokens {
    pub penultimate: Var,
    pub last: Var,
}

impl VisionEncoder {
    pub(crate) fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        cfg: &MidsConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = cfg.vision_width;
        let embed = store.add_linear("vision.embed", PATCH_FEATURES, w, false, rng);
        let cls = store.add_normal("vision.cls", 1, w, 1.0, false, rng);
        let pos = store.add_normal("vision.pos", cfg.num_patches() + 1, w, 0.1, false, rng);
        let blocks = (0..cfg.vision_layers)
            .map(|i| {
                let train = cfg.unfreeze_vision_tail && i + 2 >= cfg.vision_layers;
                let p = format!("vision.block{i}");
                VisionBlock {
                    attn: MultiHeadAttention::new(
                        store,
                        &format!("{p}.attn"),
                        w,
                        w,
                        w,
                        1,
                        train,
                        rng,
                    ),
                    ln1: LayerNormParams::new(store, &format!("{p}.ln1"), w, train),
                    w1: store.add_linear(format!("{p}.mlp.w1"), w, w, train, rng),
                    b1: store.add(format!("{p}.mlp.b1"), Matrix::zeros(1, w), train),
                    w2: store.add_linear(format!("{p}.mlp.w2"), w, w, train, rng),
                    ln2: LayerNormParams::new(store, &format!("{p}.ln2"), w, train),
                }
            })
            .collect();
        Self {
            embed,
            cls,
            pos,
            blocks,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        patches: &Matrix<T>,
    ) -> VisionTokens {
        let x = tape.constant(patches.clone());
        let we = tape.param(store, self.embed);
        let x = tape.matmul(x, we);
        let cls = tape.param(store, self.cls);
        let x = tape.concat_rows(&[cls, x]);
        let pos = tape.param(store, self.pos);
        let mut x = tape.add(x, pos);
        let mut penultimate = x;
        for (i, b) in self.blocks.iter().enumerate() {
            let a = b.attn.forward(tape, store, x, x).out;
            let s = tape.add(x, a);
            let h = b.ln1.forward(tape, store, s);
            let w1 = tape.param(store, b.w1);
            let b1 = tape.param(store, b.b1);
            let w2 = tape.param(store, b.w2);
            let m = tape.matmul(h, w1);
            let m = tape.add_row(m, b1);
            let m = tape.tanh(m);
            let m = tape.matmul(m, w2);
            let s = tape.add(h, m);
            x = b.ln2.forward(tape, store, s);
            if i + 2 == self.blocks.len() {
                penultimate = x;
            }
        }
        VisionTokens {
            penultimate,
            last: x,
        }
    }
}

pub(crate) fn encoder_rng(cfg: &MidsConfig) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(cfg.encoder_seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_lowercases_and_splits() {
        assert_eq!(
            tokenize("Image description: A FACE.\n[MASKED]"),
            vec!["image", "description", "a", "face", "masked"]
        );
    }

    #[test]
    fn patch_features_of_flat_image() {
        let img = RgbImage::from_pixel(32, 32, image::Rgb([255, 0, 127]));
        let f: Matrix<f64> = patch_features(&img, 4).unwrap();
        assert_eq!(f.shape(), (16, 48));
        for r in 0..16 {
            for k in 0..16 {
                assert_eq!(f.get(r, k * 3), 1.0);
                assert_eq!(f.get(r, k * 3 + 1), -1.0);
                assert!((f.get(r, k * 3 + 2) - (127.0 / 255.0 * 2.0 - 1.0)).abs() < 1e-12);
            }
        }
        assert!(patch_features::<f64>(&RgbImage::new(30, 30), 4).is_err());
    }

    #[test]
    fn patch_order_is_row_major() {
        let mut img = RgbImage::new(16, 16);
        // bright top-right patch
        for y in 0..4 {
            for x in 12..16 {
                img.put_pixel(x, y, image::Rgb([255, 255, 255]));
            }
        }
        let f: Matrix<f64> = patch_features(&img, 4).unwrap();
        assert_eq!(f.get(3, 0), 1.0);
        assert_eq!(f.get(0, 0), -1.0);
        assert_eq!(f.get(12, 0), -1.0);
    }

    #[test]
    fn text_ids_are_padded_and_truncated() {
        let cfg = MidsConfig {
            text_len: 4,
            ..MidsConfig::default()
        };
        let mut store = ParamStore::<f64>::new();
        let enc = TextEncoder::new(&mut store, &cfg, &mut encoder_rng(&cfg));
        let ids = enc.token_ids("one two");
        assert_eq!(ids.len(), 4);
        assert!(ids[0] > 0 && ids[1] > 0);
        assert_eq!(&ids[2..], &[0, 0]);
        assert_eq!(enc.token_ids("a b c d e f").len(), 4);
        let f = enc.encode(&store, "one two");
        assert_eq!(f.shape(), (4, 32));
    }
}
