//! Procedural face-like images used as the toy training corpus and as
//! subject sets.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::image::PixelImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FaceClass {
    Man,
    Woman,
}

impl FaceClass {
    pub fn word(self) -> &'static str {
        match self {
            FaceClass::Man => "man",
            FaceClass::Woman => "woman",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HairColor {
    Blond,
    Brown,
    Black,
    Red,
    Gray,
}

impl HairColor {
    const ALL: [HairColor; 5] = [
        HairColor::Blond,
        HairColor::Brown,
        HairColor::Black,
        HairColor::Red,
        HairColor::Gray,
    ];

    pub fn word(self) -> &'static str {
        match self {
            HairColor::Blond => "blond",
            HairColor::Brown => "brown",
            HairColor::Black => "black",
            HairColor::Red => "red",
            HairColor::Gray => "gray",
        }
    }

    fn rgb(self) -> [f64; 3] {
        match self {
            HairColor::Blond => [0.92, 0.80, 0.45],
            HairColor::Brown => [0.45, 0.28, 0.14],
            HairColor::Black => [0.10, 0.08, 0.08],
            HairColor::Red => [0.75, 0.25, 0.10],
            HairColor::Gray => [0.65, 0.65, 0.68],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SkinTone {
    Pale,
    Tan,
    Dark,
}

impl SkinTone {
    const ALL: [SkinTone; 3] = [SkinTone::Pale, SkinTone::Tan, SkinTone::Dark];

    pub fn word(self) -> &'static str {
        match self {
            SkinTone::Pale => "pale",
            SkinTone::Tan => "tan",
            SkinTone::Dark => "dark",
        }
    }

    fn rgb(self) -> [f64; 3] {
        match self {
            SkinTone::Pale => [0.96, 0.84, 0.76],
            SkinTone::Tan => [0.80, 0.60, 0.45],
            SkinTone::Dark => [0.45, 0.30, 0.22],
        }
    }
}

/// Fixed appearance of one synthetic person.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Identity {
    pub class: FaceClass,
    pub hair: HairColor,
    pub skin: SkinTone,
    pub bearded: bool,
    hair_rgb: [f64; 3],
    skin_rgb: [f64; 3],
    eye_rgb: [f64; 3],
    shirt_rgb: [f64; 3],
    bg_rgb: [f64; 3],
    face_w: f64,
    face_h: f64,
    eye_gap: f64,
    eye_y: f64,
    mouth_w: f64,
    hair_len: f64,
}

fn jitter(rgb: [f64; 3], amount: f64, rng: &mut ChaCha8Rng) -> [f64; 3] {
    rgb.map(|c| (c + rng.random_range(-amount..=amount)).clamp(0.0, 1.0))
}

impl Identity {
    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        let class = if rng.random_bool(0.5) {
            FaceClass::Man
        } else {
            FaceClass::Woman
        };
        Self::random_of(class, rng)
    }

    pub fn random_of(class: FaceClass, rng: &mut ChaCha8Rng) -> Self {
        let hair = *HairColor::ALL.choose(rng).expect("non-empty");
        let skin = *SkinTone::ALL.choose(rng).expect("non-empty");
        let bearded = class == FaceClass::Man && rng.random_bool(0.35);
        let hair_len = match class {
            FaceClass::Man => rng.random_range(0.0..0.25),
            FaceClass::Woman => rng.random_range(0.6..1.0),
        };
        Self {
            class,
            hair,
            skin,
            bearded,
            hair_rgb: jitter(hair.rgb(), 0.06, rng),
            skin_rgb: jitter(skin.rgb(), 0.05, rng),
            eye_rgb: jitter([0.25, 0.35, 0.45], 0.2, rng),
            shirt_rgb: [
                rng.random_range(0.1..0.9),
                rng.random_range(0.1..0.9),
                rng.random_range(0.1..0.9),
            ],
            bg_rgb: [
                rng.random_range(0.3..0.95),
                rng.random_range(0.3..0.95),
                rng.random_range(0.3..0.95),
            ],
            face_w: rng.random_range(0.34..0.46),
            face_h: rng.random_range(0.46..0.58),
            eye_gap: rng.random_range(0.13..0.2),
            eye_y: rng.random_range(-0.15..-0.04),
            mouth_w: rng.random_range(0.08..0.16),
            hair_len,
        }
    }

    /// Attribute words that describe this identity.
    pub fn attribute_words(&self) -> Vec<&'static str> {
        let mut words = vec![self.hair.word(), self.skin.word()];
        if self.bearded {
            words.push("bearded");
        }
        words
    }

    /// `a photo of a [attributes…] <class>`, keeping each attribute with
    /// probability `keep`.
    pub fn caption(&self, keep: f64, rng: &mut ChaCha8Rng) -> String {
        let mut words: Vec<&str> = self
            .attribute_words()
            .into_iter()
            .filter(|_| rng.random_bool(keep))
            .collect();
        words.shuffle(rng);
        let mut out = String::from("a photo of a");
        for w in words {
            out.push(' ');
            out.push_str(w);
        }
        out.push(' ');
        out.push_str(self.class.word());
        out
    }
}

/// Per-shot variation of one identity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub dx: f64,
    pub dy: f64,
    pub scale: f64,
    pub light: f64,
}

impl Pose {
    pub const CENTERED: Pose = Pose {
        dx: 0.0,
        dy: 0.0,
        scale: 1.0,
        light: 1.0,
    };

    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        Self {
            dx: rng.random_range(-0.08..0.08),
            dy: rng.random_range(-0.06..0.06),
            scale: rng.random_range(0.93..1.07),
            light: rng.random_range(0.92..1.08),
        }
    }
}

fn smoothstep(edge0: f64, edge1: f64, x: f64) -> f64 {
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Soft coverage of an axis-aligned ellipse.
fn ellipse(u: f64, v: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> f64 {
    let d = (((u - cx) / rx).powi(2) + ((v - cy) / ry).powi(2)).sqrt();
    let soft = 0.08 / rx.min(ry).max(0.05) * 0.5;
    1.0 - smoothstep(1.0 - soft, 1.0 + soft, d)
}

fn over(dst: &mut [f64; 3], color: [f64; 3], alpha: f64) {
    for c in 0..3 {
        dst[c] = dst[c] * (1.0 - alpha) + color[c] * alpha;
    }
}

fn shade(rgb: [f64; 3], k: f64) -> [f64; 3] {
    rgb.map(|c| (c * k).clamp(0.0, 1.0))
}

pub fn render(id: &Identity, pose: &Pose, size: usize) -> PixelImage {
    let lips = [
        (id.skin_rgb[0] * 0.6 + 0.35).min(1.0),
        id.skin_rgb[1] * 0.45,
        id.skin_rgb[2] * 0.45,
    ];
    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let u0 = (x as f64 + 0.5) / size as f64 * 2.0 - 1.0;
            let v0 = (y as f64 + 0.5) / size as f64 * 2.0 - 1.0;
            let u = (u0 - pose.dx) / pose.scale;
            let v = (v0 - pose.dy) / pose.scale;
            let mut px = shade(id.bg_rgb, 0.9 + 0.1 * (1.0 - v0) * 0.5);
            over(&mut px, id.shirt_rgb, ellipse(u, v, 0.0, 1.08, 0.78, 0.45));
            match id.class {
                FaceClass::Woman => over(
                    &mut px,
                    id.hair_rgb,
                    ellipse(
                        u,
                        v,
                        0.0,
                        0.05 + 0.2 * id.hair_len,
                        id.face_w * 1.4,
                        id.face_h * (1.05 + 0.55 * id.hair_len),
                    ),
                ),
                FaceClass::Man => over(
                    &mut px,
                    id.hair_rgb,
                    ellipse(
                        u,
                        v,
                        0.0,
                        -0.12,
                        id.face_w * 1.12,
                        id.face_h * (0.95 + 0.2 * id.hair_len),
                    ),
                ),
            }
            over(
                &mut px,
                shade(id.skin_rgb, 0.85),
                ellipse(u, v, 0.0, id.face_h * 0.95, 0.17, 0.3),
            );
            over(
                &mut px,
                id.skin_rgb,
                ellipse(u, v, 0.0, 0.0, id.face_w, id.face_h),
            );
            over(
                &mut px,
                id.hair_rgb,
                ellipse(
                    u,
                    v,
                    0.0,
                    -id.face_h * 0.92,
                    id.face_w * 1.02,
                    id.face_h * 0.38,
                ),
            );
            if id.bearded {
                let lower = smoothstep(id.face_h * 0.05, id.face_h * 0.25, v);
                over(
                    &mut px,
                    shade(id.hair_rgb, 0.85),
                    lower
                        * ellipse(
                            u,
                            v,
                            0.0,
                            id.face_h * 0.45,
                            id.face_w * 0.92,
                            id.face_h * 0.58,
                        ),
                );
            }
            for side in [-1.0, 1.0] {
                let ex = side * id.eye_gap;
                over(
                    &mut px,
                    [0.95, 0.95, 0.95],
                    ellipse(u, v, ex, id.eye_y, 0.085, 0.055),
                );
                over(
                    &mut px,
                    id.eye_rgb,
                    ellipse(u, v, ex, id.eye_y, 0.045, 0.045),
                );
            }
            over(
                &mut px,
                lips,
                ellipse(u, v, 0.0, id.face_h * 0.55, id.mouth_w, 0.04),
            );
            data.extend(px.iter().map(|c| (c * pose.light).clamp(0.0, 1.0)));
        }
    }
    PixelImage::new(size, size, data).expect("rendered pixels")
}

/// A captioned training image.
#[derive(Debug, Clone)]
pub struct CorpusItem {
    pub image: PixelImage,
    pub caption: String,
    pub class: FaceClass,
}

/// `n` distinct random identities, one shot each.
pub fn corpus(n: usize, size: usize, seed: u64) -> Vec<CorpusItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let id = Identity::random(&mut rng);
            let pose = Pose::random(&mut rng);
            let caption = id.caption(0.7, &mut rng);
            CorpusItem {
                image: render(&id, &pose, size),
                caption,
                class: id.class,
            }
        })
        .collect()
}

/// One identity photographed `n_images` times.
#[derive(Debug, Clone)]
pub struct Subject {
    pub identity: Identity,
    pub images: Vec<PixelImage>,
}

pub fn subject(class: FaceClass, n_images: usize, size: usize, seed: u64) -> Subject {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let identity = Identity::random_of(class, &mut rng);
    let images = (0..n_images)
        .map(|i| {
            let pose = if i == 0 {
                Pose::CENTERED
            } else {
                Pose::random(&mut rng)
            };
            render(&identity, &pose, size)
        })
        .collect();
    Subject { identity, images }
}
