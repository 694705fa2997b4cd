//! The four image corruptions used to build noisy training images and to
//! probe robustness. Each is parameterized by one intensity in `[0, 1]`:
//!
//! * salt / pepper: fraction of pixel positions forced to white / black,
//! * gaussian blur: σ = 5 × intensity (so 0.4 maps to σ = 2),
//! * crack texture: fraction of pixel positions painted with dark strokes.
//!
//! Intensity 0 is the exact identity for every kind.

use std::fmt;
use std::ops::ControlFlow;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::draw::{rasterize_polyline, random_walk, WalkStyle};
use crate::error::{Error, Result};
use crate::image::Image;

/// Blur standard deviation per unit of intensity.
pub const BLUR_SIGMA_PER_INTENSITY: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Salt,
    Pepper,
    GaussianBlur,
    CrackTexture,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 4] = [
        NoiseKind::Pepper,
        NoiseKind::Salt,
        NoiseKind::CrackTexture,
        NoiseKind::GaussianBlur,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            NoiseKind::Salt => "salt",
            NoiseKind::Pepper => "pepper",
            NoiseKind::GaussianBlur => "gaussian_blur",
            NoiseKind::CrackTexture => "crack_texture",
        }
    }

    /// Human-readable meaning of the intensity knob for this kind.
    pub fn intensity_semantics(self) -> &'static str {
        match self {
            NoiseKind::Salt => "fraction of pixel positions set to 1.0 in all channels",
            NoiseKind::Pepper => "fraction of pixel positions set to 0.0 in all channels",
            NoiseKind::GaussianBlur => "gaussian sigma = 5 x intensity, radius ceil(3 sigma), reflect borders",
            NoiseKind::CrackTexture => "fraction of pixel positions painted with dark random-walk strokes",
        }
    }
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "salt" => Ok(NoiseKind::Salt),
            "pepper" => Ok(NoiseKind::Pepper),
            "gaussian_blur" | "blur" => Ok(NoiseKind::GaussianBlur),
            "crack_texture" => Ok(NoiseKind::CrackTexture),
            other => Err(Error::UnknownNoiseKind(other.to_string())),
        }
    }
}

/// One corruption: kind, intensity (clamped to `[0, 1]`) and RNG seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub intensity: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(kind: NoiseKind, intensity: f64, seed: u64) -> Self {
        Self {
            kind,
            intensity: clamp_intensity(intensity),
            seed,
        }
    }
}

fn clamp_intensity(intensity: f64) -> f64 {
    if intensity.is_nan() {
        0.0
    } else {
        intensity.clamp(0.0, 1.0)
    }
}

fn impulse<R: Rng + ?Sized>(image: &Image, intensity: f64, value: f32, rng: &mut R) -> Image {
    let p = clamp_intensity(intensity);
    let mut out = image.clone();
    if p == 0.0 {
        return out;
    }
    let (h, w) = (image.height(), image.width());
    for y in 0..h {
        for x in 0..w {
            if rng.random::<f64>() < p {
                for c in 0..image.channels() {
                    out.set(c, y, x, value);
                }
            }
        }
    }
    out
}

/// Sets a random ≈`intensity` fraction of pixel positions to white.
pub fn apply_salt<R: Rng + ?Sized>(image: &Image, intensity: f64, rng: &mut R) -> Image {
    impulse(image, intensity, 1.0, rng)
}

/// Sets a random ≈`intensity` fraction of pixel positions to black. Given the
/// same generator state it hits exactly the positions [`apply_salt`] would.
pub fn apply_pepper<R: Rng + ?Sized>(image: &Image, intensity: f64, rng: &mut R) -> Image {
    impulse(image, intensity, 0.0, rng)
}

/// Normalized 1-D Gaussian taps with radius `⌈3σ⌉`.
pub fn gaussian_kernel_1d(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

/// Mirror index without repeating the edge sample (`d c b | a b c d | c b a`).
fn reflect(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let m = i.rem_euclid(period);
    if m < n as i64 {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Separable Gaussian blur with σ = 5 × intensity and reflected borders.
pub fn apply_gaussian_blur(image: &Image, intensity: f64) -> Image {
    let sigma = BLUR_SIGMA_PER_INTENSITY * clamp_intensity(intensity);
    if sigma == 0.0 {
        return image.clone();
    }
    let taps = gaussian_kernel_1d(sigma);
    let radius = (taps.len() / 2) as i64;
    let (h, w) = (image.height(), image.width());
    let mut tmp = vec![0f64; h * w];
    let mut out = image.clone();
    for c in 0..image.channels() {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, t) in taps.iter().enumerate() {
                    let sx = reflect(x as i64 + k as i64 - radius, w);
                    acc += t * image.get(c, y, sx) as f64;
                }
                tmp[y * w + x] = acc;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, t) in taps.iter().enumerate() {
                    let sy = reflect(y as i64 + k as i64 - radius, h);
                    acc += t * tmp[sy * w + x];
                }
                out.set(c, y, x, (acc as f32).clamp(0.0, 1.0));
            }
        }
    }
    out
}

const TEXTURE_WALK: WalkStyle = WalkStyle {
    max_turn_deg: 30.0,
    step_len: (1.5, 3.0),
    steps: 40,
};
const TEXTURE_MAX_STROKES: usize = 1_000_000;

/// Paints dark, thin random-walk strokes until ≈`intensity` of the pixel
/// positions are covered. Each stroke has width 1–3 px, a luminance
/// multiplier in `[0.2, 0.5]` and an opacity in `[0.6, 1.0]`. Ground-truth
/// masks are not involved: these are distractors, not cracks.
pub fn apply_crack_texture<R: Rng + ?Sized>(image: &Image, intensity: f64, rng: &mut R) -> Image {
    let p = clamp_intensity(intensity);
    let mut out = image.clone();
    let (h, w) = (image.height(), image.width());
    let target = (p * (h * w) as f64).round() as usize;
    if target == 0 {
        return out;
    }
    let mut covered = vec![false; h * w];
    let mut count = 0usize;
    for _ in 0..TEXTURE_MAX_STROKES {
        let brush = rng.random_range(1..=3usize);
        let multiplier = rng.random_range(0.2..=0.5f32);
        let alpha = rng.random_range(0.6..=1.0f32);
        let factor = 1.0 - alpha * (1.0 - multiplier);
        let points = random_walk(rng, h, w, TEXTURE_WALK);
        let flow = rasterize_polyline(&points, brush, h, w, |y, x| {
            let i = y * w + x;
            if !covered[i] {
                covered[i] = true;
                count += 1;
                for c in 0..out.channels() {
                    let v = out.get(c, y, x);
                    out.set(c, y, x, v * factor);
                }
            }
            if count >= target {
                ControlFlow::Break(())
            } else {
                ControlFlow::Continue(())
            }
        });
        if flow.is_break() {
            break;
        }
    }
    out
}

pub fn apply<R: Rng + ?Sized>(image: &Image, kind: NoiseKind, intensity: f64, rng: &mut R) -> Image {
    match kind {
        NoiseKind::Salt => apply_salt(image, intensity, rng),
        NoiseKind::Pepper => apply_pepper(image, intensity, rng),
        NoiseKind::GaussianBlur => apply_gaussian_blur(image, intensity),
        NoiseKind::CrackTexture => apply_crack_texture(image, intensity, rng),
    }
}

/// Applies `spec` using a generator seeded from `spec.seed`.
pub fn corrupt(image: &Image, spec: &NoiseSpec) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    apply(image, spec.kind, spec.intensity, &mut rng)
}
