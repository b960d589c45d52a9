//! Seeded photometric and compression augmentations.

use image::codecs::jpeg::JpegEncoder;
use image::{Rgb, RgbImage};
use nalgebra::{Matrix3, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Per-augmentation probabilities and magnitude ranges. Augmentations are
/// applied in a fixed order, each independently with its probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub jpeg_prob: f64,
    pub jpeg_quality_min: u8,
    pub jpeg_quality_max: u8,
    pub noise_prob: f64,
    /// Max noise standard deviation in 0–255 pixel units.
    pub noise_sigma_max: f64,
    pub motion_blur_prob: f64,
    /// Max kernel length in pixels (odd lengths ≥ 3 are drawn).
    pub motion_blur_max_len: u32,
    pub gaussian_blur_prob: f64,
    pub gaussian_blur_sigma_max: f32,
    pub pca_color_prob: f64,
    /// Standard deviation of the principal-component weights.
    pub pca_color_std: f64,
    pub hsv_prob: f64,
    /// Max hue rotation in degrees.
    pub hue_shift_max: f64,
    /// Max relative change of saturation and value.
    pub sat_val_jitter_max: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            jpeg_prob: 0.2,
            jpeg_quality_min: 60,
            jpeg_quality_max: 95,
            noise_prob: 0.2,
            noise_sigma_max: 6.0,
            motion_blur_prob: 0.1,
            motion_blur_max_len: 5,
            gaussian_blur_prob: 0.1,
            gaussian_blur_sigma_max: 1.0,
            pca_color_prob: 0.2,
            pca_color_std: 0.1,
            hsv_prob: 0.2,
            hue_shift_max: 8.0,
            sat_val_jitter_max: 0.1,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, p) in [
            ("jpeg_prob", self.jpeg_prob),
            ("noise_prob", self.noise_prob),
            ("motion_blur_prob", self.motion_blur_prob),
            ("gaussian_blur_prob", self.gaussian_blur_prob),
            ("pca_color_prob", self.pca_color_prob),
            ("hsv_prob", self.hsv_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("{name} = {p} outside [0, 1]"));
            }
        }
        if self.jpeg_quality_min == 0
            || self.jpeg_quality_min > self.jpeg_quality_max
            || self.jpeg_quality_max > 100
        {
            return Err("jpeg quality range must satisfy 1 <= min <= max <= 100".into());
        }
        if self.noise_sigma_max < 0.0
            || self.gaussian_blur_sigma_max < 0.0
            || self.pca_color_std < 0.0
            || self.hue_shift_max < 0.0
            || !(0.0..1.0).contains(&self.sat_val_jitter_max)
        {
            return Err("augmentation magnitudes must be non-negative (jitter < 1)".into());
        }
        Ok(())
    }
}

fn jpeg_roundtrip(img: &RgbImage, quality: u8) -> RgbImage {
    let mut buf = Vec::new();
    let mut enc = JpegEncoder::new_with_quality(&mut buf, quality);
    if enc.encode_image(img).is_err() {
        return img.clone();
    }
    image::load_from_memory(&buf)
        .map(|d| d.to_rgb8())
        .unwrap_or_else(|_| img.clone())
}

fn gaussian_noise(img: &mut RgbImage, sigma: f64, rng: &mut ChaCha8Rng) {
    let Ok(n) = Normal::new(0.0, sigma) else {
        return;
    };
    for p in img.pixels_mut() {
        for c in p.0.iter_mut() {
            *c = (*c as f64 + n.sample(rng)).round().clamp(0.0, 255.0) as u8;
        }
    }
}

/// Line-kernel blur along one of four directions.
fn motion_blur(img: &RgbImage, len: u32, dir: usize) -> RgbImage {
    let (dx, dy): (i64, i64) = [(1, 0), (0, 1), (1, 1), (1, -1)][dir % 4];
    let (w, h) = (img.width() as i64, img.height() as i64);
    let half = (len / 2) as i64;
    RgbImage::from_fn(img.width(), img.height(), |x, y| {
        let mut acc = [0.0f64; 3];
        let mut n = 0.0;
        for t in -half..=half {
            let (sx, sy) = (x as i64 + t * dx, y as i64 + t * dy);
            if sx < 0 || sy < 0 || sx >= w || sy >= h {
                continue;
            }
            let p = img.get_pixel(sx as u32, sy as u32);
            for k in 0..3 {
                acc[k] += p[k] as f64;
            }
            n += 1.0;
        }
        Rgb(acc.map(|a| (a / n).round() as u8))
    })
}

/// Colour shift along the principal components of the pixel distribution.
fn pca_color(img: &mut RgbImage, std: f64, rng: &mut ChaCha8Rng) {
    let n = (img.width() * img.height()) as f64;
    let mut mean = [0.0f64; 3];
    for p in img.pixels() {
        for k in 0..3 {
            mean[k] += p[k] as f64 / 255.0;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut cov = Matrix3::<f64>::zeros();
    for p in img.pixels() {
        let v: [f64; 3] = [0, 1, 2].map(|k| p[k] as f64 / 255.0 - mean[k]);
        for i in 0..3 {
            for j in 0..3 {
                cov[(i, j)] += v[i] * v[j] / n;
            }
        }
    }
    let eig = SymmetricEigen::new(cov);
    let Ok(g) = Normal::new(0.0, std) else { return };
    let alpha: [f64; 3] = [g.sample(rng), g.sample(rng), g.sample(rng)];
    let mut shift = [0.0f64; 3];
    for c in 0..3 {
        let lam = eig.eigenvalues[c].max(0.0);
        for k in 0..3 {
            shift[k] += eig.eigenvectors[(k, c)] * alpha[c] * lam.sqrt();
        }
    }
    for p in img.pixels_mut() {
        for k in 0..3 {
            p[k] = (p[k] as f64 + shift[k] * 255.0).round().clamp(0.0, 255.0) as u8;
        }
    }
}

fn rgb_to_hsv([r, g, b]: [f64; 3]) -> [f64; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    [h, s, max]
}

fn hsv_to_rgb([h, s, v]: [f64; 3]) -> [f64; 3] {
    let c = v * s;
    let hp = h.rem_euclid(360.0) / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn hsv_jitter(img: &mut RgbImage, dh: f64, ds: f64, dv: f64) {
    for p in img.pixels_mut() {
        let [h, s, v] = rgb_to_hsv([0, 1, 2].map(|k| p[k] as f64 / 255.0));
        let rgb = hsv_to_rgb([h + dh, (s * ds).clamp(0.0, 1.0), (v * dv).clamp(0.0, 1.0)]);
        for k in 0..3 {
            p[k] = (rgb[k] * 255.0).round().clamp(0.0, 255.0) as u8;
        }
    }
}

/// Applies the configured augmentations; a pure function of `(img, cfg, seed)`.
pub fn augment(img: &RgbImage, cfg: &AugmentConfig, seed: u64) -> RgbImage {
    let mut out = img.clone();
    if !cfg.enabled {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if rng.random_bool(cfg.jpeg_prob) {
        let q = rng.random_range(cfg.jpeg_quality_min..=cfg.jpeg_quality_max);
        out = jpeg_roundtrip(&out, q);
    }
    if rng.random_bool(cfg.noise_prob) {
        let sigma = rng.random_range(0.0..=cfg.noise_sigma_max);
        gaussian_noise(&mut out, sigma, &mut rng);
    }
    if rng.random_bool(cfg.motion_blur_prob) && cfg.motion_blur_max_len >= 3 {
        let steps = (cfg.motion_blur_max_len - 1) / 2;
        let len = 1 + 2 * rng.random_range(1..=steps);
        let dir = rng.random_range(0..4);
        out = motion_blur(&out, len, dir);
    }
    if rng.random_bool(cfg.gaussian_blur_prob) && cfg.gaussian_blur_sigma_max > 0.0 {
        let sigma = rng.random_range(0.1..=cfg.gaussian_blur_sigma_max.max(0.1));
        out = image::imageops::blur(&out, sigma);
    }
    if rng.random_bool(cfg.pca_color_prob) {
        pca_color(&mut out, cfg.pca_color_std, &mut rng);
    }
    if rng.random_bool(cfg.hsv_prob) {
        let j = cfg.sat_val_jitter_max;
        let dh = rng.random_range(-cfg.hue_shift_max..=cfg.hue_shift_max);
        let ds = rng.random_range(1.0 - j..=1.0 + j);
        let dv = rng.random_range(1.0 - j..=1.0 + j);
        hsv_jitter(&mut out, dh, ds, dv);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> RgbImage {
        RgbImage::from_fn(40, 32, |x, y| {
            Rgb([(x * 6) as u8, (y * 7) as u8, ((x + y) * 3) as u8])
        })
    }

    fn always() -> AugmentConfig {
        AugmentConfig {
            jpeg_prob: 1.0,
            noise_prob: 1.0,
            motion_blur_prob: 1.0,
            gaussian_blur_prob: 1.0,
            pca_color_prob: 1.0,
            hsv_prob: 1.0,
            ..AugmentConfig::default()
        }
    }

    #[test]
    fn disabled_is_identity() {
        let img = sample();
        assert_eq!(augment(&img, &AugmentConfig::disabled(), 3), img);
        let zero = AugmentConfig {
            jpeg_prob: 0.0,
            noise_prob: 0.0,
            motion_blur_prob: 0.0,
            gaussian_blur_prob: 0.0,
            pca_color_prob: 0.0,
            hsv_prob: 0.0,
            ..AugmentConfig::default()
        };
        assert_eq!(augment(&img, &zero, 3), img);
    }

    #[test]
    fn seeded_and_shape_preserving() {
        let img = sample();
        let a = augment(&img, &always(), 11);
        let b = augment(&img, &always(), 11);
        let c = augment(&img, &always(), 12);
        assert_eq!(a.as_raw(), b.as_raw());
        assert_ne!(a.as_raw(), c.as_raw());
        assert_eq!(a.dimensions(), img.dimensions());
        assert_ne!(a.as_raw(), img.as_raw());
    }

    #[test]
    fn hsv_round_trip() {
        for rgb in [
            [0.2, 0.5, 0.9],
            [1.0, 0.0, 0.0],
            [0.3, 0.3, 0.3],
            [0.9, 0.8, 0.1],
        ] {
            let back = hsv_to_rgb(rgb_to_hsv(rgb));
            for k in 0..3 {
                assert!((back[k] - rgb[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn motion_blur_keeps_flat_images() {
        let flat = RgbImage::from_pixel(10, 10, Rgb([40, 80, 120]));
        for dir in 0..4 {
            assert_eq!(motion_blur(&flat, 5, dir), flat);
        }
    }

    #[test]
    fn validation_rejects_bad_probabilities() {
        let bad = AugmentConfig {
            noise_prob: 1.5,
            ..AugmentConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(AugmentConfig::default().validate().is_ok());
    }
}
