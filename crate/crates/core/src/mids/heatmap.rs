//! Gradient-weighted class activation maps over the projected vision
//! patch tokens.

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::{MidsError, MidsInput, MidsModel};
use crate::nn::Tape;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeatmapStream {
    Local,
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    /// Row-major values in [0, 1].
    pub values: Vec<f64>,
    /// True when the map collapsed and the uniform fallback was returned.
    pub degenerate: bool,
}

impl<T: Scalar> MidsModel<T> {
    /// Saliency of `target_class` over the chosen stream's patch grid,
    /// bilinearly upsampled to `width × height`.
    pub fn heatmap(
        &self,
        input: &MidsInput<T>,
        stream: HeatmapStream,
        target_class: usize,
        width: usize,
        height: usize,
    ) -> Result<Heatmap, MidsError> {
        if !self.is_trained() {
            return Err(MidsError::UntrainedModel);
        }
        if target_class >= super::NUM_CLASSES {
            return Err(MidsError::Shape(format!(
                "class {target_class} out of range"
            )));
        }
        let mut tape = Tape::with_all_param_grads();
        let trace = self.forward(&mut tape, input)?;
        let feats = match stream {
            HeatmapStream::Local => trace.encoded.f_vl,
            HeatmapStream::Global => trace.encoded.f_vg,
        };
        let nll = tape.neg_log_pick(trace.m, target_class);
        let grads = tape.backward(nll);
        let f = tape.value(feats);
        let (n, d) = f.shape();
        let mut cam = vec![0.0f64; n];
        if let Some(g) = grads.of(feats) {
            // d log m / dF = -d nll / dF
            let alpha: Vec<f64> = (0..d)
                .map(|c| -(0..n).map(|r| g.get(r, c).to_f64_lossy()).sum::<f64>() / n as f64)
                .collect();
            for (r, v) in cam.iter_mut().enumerate() {
                let s: f64 = (0..d).map(|c| alpha[c] * f.get(r, c).to_f64_lossy()).sum();
                *v = s.max(0.0);
            }
        }
        let grid = self.config().grid;
        Ok(normalise(
            upsample_bilinear(&cam, grid, grid, width, height),
            width,
            height,
        ))
    }
}

fn normalise(values: Vec<f64>, width: usize, height: usize) -> Heatmap {
    let max = values.iter().copied().fold(0.0f64, f64::max);
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    if !(max > 1e-12) || !max.is_finite() || (max - min) <= 1e-12 * max {
        return Heatmap {
            width,
            height,
            values: vec![1.0; width * height],
            degenerate: true,
        };
    }
    Heatmap {
        width,
        height,
        values: values.into_iter().map(|v| v / max).collect(),
        degenerate: false,
    }
}

/// Align-corners-false bilinear resize of a row-major `sw × sh` grid.
pub fn upsample_bilinear(src: &[f64], sw: usize, sh: usize, w: usize, h: usize) -> Vec<f64> {
    assert_eq!(src.len(), sw * sh);
    let at = |x: usize, y: usize| src[y * sw + x];
    let coord = |i: usize, out: usize, inp: usize| {
        let c = ((i as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
        let lo = c.floor() as usize;
        (lo, (lo + 1).min(inp - 1), c - lo as f64)
    };
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        let (y0, y1, ty) = coord(y, h, sh);
        for x in 0..w {
            let (x0, x1, tx) = coord(x, w, sw);
            let top = at(x0, y0) * (1.0 - tx) + at(x1, y0) * tx;
            let bot = at(x0, y1) * (1.0 - tx) + at(x1, y1) * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

/// Blends the map over the image as a red overlay.
pub fn render_overlay(image: &RgbImage, map: &Heatmap) -> RgbImage {
    let resized = if image.dimensions() == (map.width as u32, map.height as u32) {
        image.clone()
    } else {
        image::imageops::resize(
            image,
            map.width as u32,
            map.height as u32,
            image::imageops::FilterType::Triangle,
        )
    };
    RgbImage::from_fn(map.width as u32, map.height as u32, |x, y| {
        let v = map.values[y as usize * map.width + x as usize];
        let p = resized.get_pixel(x, y);
        let a = 0.6 * v;
        let mix = |c: u8, t: f64| ((1.0 - a) * c as f64 + a * t).round().clamp(0.0, 255.0) as u8;
        Rgb([mix(p[0], 255.0), mix(p[1], 0.0), mix(p[2], 0.0)])
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mids::MidsConfig;

    #[test]
    fn untrained_model_has_no_heatmap() {
        let m = MidsModel::<f64>::new(MidsConfig::default()).unwrap();
        let img = RgbImage::new(224, 224);
        let input = m
            .input(
                &img,
                "Image description:\nx\nForgery reasoning:\ny\nAnalysis result:\n[MASKED]",
            )
            .unwrap();
        assert!(matches!(
            m.heatmap(&input, HeatmapStream::Local, 0, 8, 8),
            Err(MidsError::UntrainedModel)
        ));
    }

    #[test]
    fn flat_maps_fall_back_to_uniform() {
        let h = normalise(vec![0.0; 16], 4, 4);
        assert!(h.degenerate && h.values.iter().all(|&v| v == 1.0));
        let h = normalise(vec![0.3; 16], 4, 4);
        assert!(h.degenerate);
        let h = normalise((0..16).map(|i| i as f64).collect(), 4, 4);
        assert!(!h.degenerate);
        assert_eq!(h.values.iter().copied().fold(0.0, f64::max), 1.0);
        assert!(h.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn bilinear_preserves_constants_and_corners() {
        let up = upsample_bilinear(&[2.0; 4], 2, 2, 5, 3);
        assert!(up.iter().all(|&v| (v - 2.0).abs() < 1e-15));
        let up = upsample_bilinear(&[0.0, 1.0, 2.0, 3.0], 2, 2, 4, 4);
        assert_eq!(up[0], 0.0);
        assert_eq!(up[15], 3.0);
        assert_eq!(upsample_bilinear(&[1.0, 5.0], 2, 1, 2, 1), vec![1.0, 5.0]);
    }
}
