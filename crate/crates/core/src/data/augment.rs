use rand::Rng;

use super::ImageSample;
use crate::image::Image;

/// Colour jitter factors are drawn from `[1 - JITTER_RANGE, 1 + JITTER_RANGE]`.
pub const JITTER_RANGE: f32 = 0.2;

/// The random draws of one augmentation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub flip: bool,
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
}

impl AugmentParams {
    pub fn identity() -> Self {
        Self {
            flip: false,
            brightness: 1.0,
            contrast: 1.0,
            saturation: 1.0,
        }
    }

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let lo = 1.0 - JITTER_RANGE;
        let hi = 1.0 + JITTER_RANGE;
        Self {
            flip: rng.random_bool(0.5),
            brightness: rng.random_range(lo..=hi),
            contrast: rng.random_range(lo..=hi),
            saturation: rng.random_range(lo..=hi),
        }
    }
}

/// Horizontal flip (image and mask together) with probability 0.5, then
/// brightness/contrast/saturation jitter on the image only.
pub fn augment<R: Rng + ?Sized>(sample: &ImageSample, rng: &mut R) -> ImageSample {
    augment_with(sample, &AugmentParams::sample(rng))
}

pub fn augment_with(sample: &ImageSample, params: &AugmentParams) -> ImageSample {
    let (mut image, mask) = if params.flip {
        (sample.image.flip_horizontal(), sample.mask.flip_horizontal())
    } else {
        (sample.image.clone(), sample.mask.clone())
    };
    jitter(&mut image, params);
    ImageSample {
        id: sample.id.clone(),
        image,
        mask,
        provenance: sample.provenance,
    }
}

#[inline]
fn blend(x: f32, other: f32, ratio: f32) -> f32 {
    (ratio * x + (1.0 - ratio) * other).clamp(0.0, 1.0)
}

fn luma(image: &Image, y: usize, x: usize) -> f32 {
    0.299 * image.get(0, y, x) + 0.587 * image.get(1, y, x) + 0.114 * image.get(2, y, x)
}

fn jitter(image: &mut Image, p: &AugmentParams) {
    for v in image.data_mut() {
        *v = blend(*v, 0.0, p.brightness);
    }
    if image.channels() != 3 {
        return;
    }
    let (h, w) = (image.height(), image.width());
    let mean = {
        let mut acc = 0.0f64;
        for y in 0..h {
            for x in 0..w {
                acc += luma(image, y, x) as f64;
            }
        }
        (acc / (h * w).max(1) as f64) as f32
    };
    for v in image.data_mut() {
        *v = blend(*v, mean, p.contrast);
    }
    for y in 0..h {
        for x in 0..w {
            let g = luma(image, y, x);
            for c in 0..3 {
                let v = image.get(c, y, x);
                image.set(c, y, x, blend(v, g, p.saturation));
            }
        }
    }
}
