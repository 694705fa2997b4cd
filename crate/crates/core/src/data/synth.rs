use std::ops::ControlFlow;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DatasetManifest, ManifestEntry, Split, MANIFEST_FILE};
use crate::draw::{rasterize_polyline, random_walk, WalkStyle};
use crate::error::{Error, Result};
use crate::image::{Image, Mask};

/// Upper bound on the crack pixel fraction of a synthetic mask.
pub const MAX_POSITIVE_FRACTION: f64 = 0.2;

fn render_pair(rng: &mut ChaCha8Rng, size: usize) -> (Image, Mask) {
    let base = rng.random_range(0.45..0.75f32);
    let tint: [f32; 3] = std::array::from_fn(|_| rng.random_range(-0.04..0.04f32));
    // a few low-frequency ripples for texture
    let waves: Vec<(f32, f32, f32, f32)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.03..0.06f32),
                rng.random_range(0.05..0.4f32),
                rng.random_range(0.05..0.4f32),
                rng.random_range(0.0..std::f32::consts::TAU),
            )
        })
        .collect();
    let mut image = Image::filled(3, size, size, 0.0);
    for y in 0..size {
        for x in 0..size {
            let ripple: f32 = waves
                .iter()
                .map(|&(a, fy, fx, ph)| a * (fy * y as f32 + fx * x as f32 + ph).sin())
                .sum();
            let grain = rng.random_range(-0.04..0.04f32);
            for (c, t) in tint.iter().enumerate() {
                image.set(c, y, x, (base + t + ripple + grain).clamp(0.0, 1.0));
            }
        }
    }

    let mut mask = Mask::zeros(size, size);
    let limit = (MAX_POSITIVE_FRACTION * (size * size) as f64) as usize;
    let wanted = (2 * size).min(limit);
    let mut count = 0;
    let style = WalkStyle {
        max_turn_deg: 25.0,
        step_len: (2.0, 4.0),
        steps: size,
    };
    for _ in 0..10 {
        let brush = rng.random_range(2..=4usize);
        let points = random_walk(rng, size, size, style);
        let _ = rasterize_polyline(&points, brush, size, size, |y, x| {
            if mask.get(y, x) == 0 {
                mask.set(y, x, true);
                count += 1;
            }
            if count >= limit {
                ControlFlow::Break(())
            } else {
                ControlFlow::Continue(())
            }
        });
        if count >= wanted {
            break;
        }
    }

    let darkness = rng.random_range(0.15..0.35f32);
    for y in 0..size {
        for x in 0..size {
            if mask.get(y, x) == 1 {
                let grain = rng.random_range(-0.03..0.03f32);
                for c in 0..3 {
                    let v = image.get(c, y, x);
                    image.set(c, y, x, (v * darkness + grain).clamp(0.0, 1.0));
                }
            }
        }
    }
    (image, mask)
}

/// Writes `n` procedural crack images and masks under `out` plus a manifest.
///
/// Each image is a textured background crossed by a dark random-walk
/// polyline; its mask marks exactly the polyline pixels (2–4 px wide). The
/// last `eval_count` pairs are tagged `eval`, the rest `train`. Output is a
/// pure function of `(n, size, eval_count, seed)`.
pub fn synthesize_toy_dataset(
    out: &Path,
    n: usize,
    size: usize,
    eval_count: usize,
    seed: u64,
) -> Result<DatasetManifest> {
    if n == 0 {
        return Err(Error::Precondition("dataset must contain at least one pair".into()));
    }
    if size < 16 {
        return Err(Error::Precondition(format!("image size {size} below the 16 px minimum")));
    }
    if eval_count > n {
        return Err(Error::Precondition(format!("eval count {eval_count} exceeds {n} pairs")));
    }
    for sub in ["images", "masks"] {
        let dir = out.join(sub);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(master.random());
        let (image, mask) = render_pair(&mut rng, size);
        let id = format!("toy_{i:04}");
        let entry = ManifestEntry {
            image: format!("images/{id}.png").into(),
            mask: format!("masks/{id}.png").into(),
            split: if i + eval_count >= n { Split::Eval } else { Split::Train },
            id,
        };
        image.save(&out.join(&entry.image))?;
        mask.save(&out.join(&entry.mask))?;
        entries.push(entry);
    }
    let manifest = DatasetManifest {
        root: ".".into(),
        seed,
        entries,
    };
    manifest.write(&out.join(MANIFEST_FILE))?;
    Ok(DatasetManifest {
        root: out.to_path_buf(),
        ..manifest
    })
}
