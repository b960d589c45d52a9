//! Synthetic face corpus for demos and tests. Each image is a cartoon face
//! whose authenticity and forgery type are encoded as coarse colour and
//! layout cues that survive patch pooling.

use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::item_seed;
use crate::model::{
    save_manifest, Authenticity, FaceRecord, ForgeryType, Manifest, ManifestError, Split,
};

pub const IMAGE_SIZE: u32 = 224;

/// Number of images per class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassCounts {
    pub real: usize,
    pub identity_exchange: usize,
    pub attribute_manipulation: usize,
    pub entire_synthesis: usize,
}

impl ClassCounts {
    pub fn total(&self) -> usize {
        self.real + self.identity_exchange + self.attribute_manipulation + self.entire_synthesis
    }

    fn expand(&self) -> Vec<(Authenticity, ForgeryType)> {
        let mut v = Vec::with_capacity(self.total());
        v.extend(std::iter::repeat_n(
            (Authenticity::Real, ForgeryType::None),
            self.real,
        ));
        v.extend(std::iter::repeat_n(
            (Authenticity::Fake, ForgeryType::IdentityExchange),
            self.identity_exchange,
        ));
        v.extend(std::iter::repeat_n(
            (Authenticity::Fake, ForgeryType::FacialAttributeManipulation),
            self.attribute_manipulation,
        ));
        v.extend(std::iter::repeat_n(
            (Authenticity::Fake, ForgeryType::EntireFaceSynthesis),
            self.entire_synthesis,
        ));
        v
    }
}

fn clamp_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn in_ellipse(x: f64, y: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> f64 {
    ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2)
}

/// Renders one face. Same `(authenticity, forgery_type, seed)` ⇒ same pixels.
pub fn render_face(authenticity: Authenticity, forgery_type: ForgeryType, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = IMAGE_SIZE as f64;
    let bg = [
        rng.random_range(20.0..90.0),
        rng.random_range(20.0..90.0),
        rng.random_range(20.0..90.0),
    ];
    let tone = rng.random_range(150.0..215.0);
    let mut skin = [
        tone,
        tone * rng.random_range(0.68..0.78),
        tone * rng.random_range(0.52..0.6),
    ];
    let fake = authenticity == Authenticity::Fake;
    if fake {
        // Shared cue for every forgery: the face takes a cold cast.
        skin[1] -= 30.0;
        skin[2] += 70.0;
    }
    let cx = s / 2.0 + rng.random_range(-10.0..10.0);
    let cy = s / 2.0 + rng.random_range(-8.0..8.0);
    let rx = rng.random_range(58.0..72.0);
    let ry = rng.random_range(78.0..92.0);
    let eye_dy = ry * 0.25;
    let eye_dx = rx * 0.4;
    let mouth_y = cy + ry * 0.45;

    let mut img = RgbImage::new(IMAGE_SIZE, IMAGE_SIZE);
    for (px, py, p) in img.enumerate_pixels_mut() {
        let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
        let face = in_ellipse(x, y, cx, cy, rx, ry);
        let mut c = if face <= 1.0 { skin } else { bg };
        if face > 1.0 && forgery_type == ForgeryType::EntireFaceSynthesis {
            // Generated backgrounds: large saturated checker.
            let checker = ((px / 28) + (py / 28)) % 2 == 0;
            c = if checker {
                [220.0, 40.0, 200.0]
            } else {
                [40.0, 200.0, 60.0]
            };
        }
        if forgery_type == ForgeryType::IdentityExchange && (0.7..=1.25).contains(&face) {
            c = [235.0, 225.0, 40.0];
        }
        let eye = in_ellipse(x, y, cx - eye_dx, cy - eye_dy, 9.0, 6.0).min(in_ellipse(
            x,
            y,
            cx + eye_dx,
            cy - eye_dy,
            9.0,
            6.0,
        ));
        if eye <= 1.0 {
            c = [30.0, 25.0, 20.0];
        }
        let mouth = (x - cx).abs() <= rx * 0.35 && (y - mouth_y).abs() <= 6.0;
        if mouth {
            c = [170.0, 40.0, 50.0];
        }
        if forgery_type == ForgeryType::FacialAttributeManipulation
            && face <= 1.0
            && y > cy + ry * 0.2
        {
            // Edited lower face: saturated cyan patch.
            c = [30.0, 210.0, 220.0];
        }
        let n: f64 = rng.random_range(-8.0..8.0);
        *p = Rgb([clamp_u8(c[0] + n), clamp_u8(c[1] + n), clamp_u8(c[2] + n)]);
    }
    img
}

fn u64_seed(seed: u64, tag: &str, id: &str) -> u64 {
    u64::from_le_bytes(item_seed(seed, tag, id)[..8].try_into().unwrap())
}

/// Writes `counts` images (plus a source-identity reference for identity
/// exchange and attribute manipulation) under `dir/images` and saves the
/// manifest to `dir/<name>.jsonl`.
pub fn write_corpus(
    dir: &Path,
    name: &str,
    counts: ClassCounts,
    split: Split,
    seed: u64,
) -> Result<Manifest, ManifestError> {
    let img_dir = dir.join("images");
    let io = |path: &Path| {
        let path = path.display().to_string();
        move |source| ManifestError::Io { path, source }
    };
    std::fs::create_dir_all(&img_dir).map_err(io(&img_dir))?;
    let img_dir = std::path::absolute(&img_dir).map_err(io(&img_dir))?;
    let mut records = Vec::with_capacity(counts.total());
    for (i, (auth, ft)) in counts.expand().into_iter().enumerate() {
        let id = format!("{name}-{i:04}");
        let path = img_dir.join(format!("{id}.png"));
        let save = |img: RgbImage, p: &Path| {
            img.save(p).map_err(|e| ManifestError::Io {
                path: p.display().to_string(),
                source: std::io::Error::other(e),
            })
        };
        save(render_face(auth, ft, u64_seed(seed, "synth", &id)), &path)?;
        let reference_path = if ft.takes_reference() {
            let r = img_dir.join(format!("{id}_ref.png"));
            save(
                render_face(
                    Authenticity::Real,
                    ForgeryType::None,
                    u64_seed(seed, "synth-ref", &id),
                ),
                &r,
            )?;
            Some(r)
        } else {
            None
        };
        records.push(FaceRecord {
            id,
            image_path: path,
            authenticity: auth,
            forgery_type: ft,
            source: format!("synthetic-{name}"),
            split,
            reference_path,
        });
    }
    let manifest = Manifest::new(name, records);
    save_manifest(&manifest, &dir.join(format!("{name}.jsonl")))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_sized() {
        let a = render_face(Authenticity::Fake, ForgeryType::IdentityExchange, 3);
        assert_eq!(a.dimensions(), (IMAGE_SIZE, IMAGE_SIZE));
        assert_eq!(
            a,
            render_face(Authenticity::Fake, ForgeryType::IdentityExchange, 3)
        );
        assert_ne!(
            a,
            render_face(Authenticity::Fake, ForgeryType::IdentityExchange, 4)
        );
    }

    /// The centre of the face is bluer than red-scaled skin for every fake.
    #[test]
    fn fake_cast_is_visible() {
        for seed in 0..20 {
            let real = render_face(Authenticity::Real, ForgeryType::None, seed);
            let fake = render_face(Authenticity::Fake, ForgeryType::EntireFaceSynthesis, seed);
            let c = IMAGE_SIZE / 2;
            let b = |img: &RgbImage| {
                img.get_pixel(c + 20, c)[2] as i32 - img.get_pixel(c + 20, c)[1] as i32
            };
            assert!(b(&real) < 0 && b(&fake) > 40, "seed {seed}");
        }
    }

    #[test]
    fn corpus_round_trips_through_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let counts = ClassCounts {
            real: 2,
            identity_exchange: 1,
            attribute_manipulation: 1,
            entire_synthesis: 1,
        };
        let m = write_corpus(dir.path(), "t", counts, Split::Test, 0).unwrap();
        let loaded = crate::model::load_manifest(&dir.path().join("t.jsonl")).unwrap();
        assert_eq!(loaded.records, m.records);
        assert_eq!(
            m.records
                .iter()
                .filter(|r| r.reference_path.is_some())
                .count(),
            2
        );
    }
}
