//! Segmentation metrics, robustness sweeps and report emission.

pub mod metrics;
pub mod report;

use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use metrics::{binarize, binary_dice, binary_iou, logit_threshold, Overlap};
pub use report::{emit_report, Environment, ReportFiles, TrainingLog};

use crate::corruption::{corrupt, NoiseKind, NoiseSpec};
use crate::data::ImageSample;
use crate::engine::to_batch;
use crate::error::{Error, Result};
use crate::models::{SegmentationModel, Segmenter};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Hard scores of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub id: String,
    pub dice: f64,
    pub iou: f64,
}

/// Per-image means, in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalScores {
    pub mds: f64,
    pub miou: f64,
    pub per_image: Vec<ImageScore>,
}

/// Scores every image on its own (batch of one) and averages per image.
pub fn evaluate<S: Segmenter + ?Sized>(model: &S, dataset: &[ImageSample], threshold: f64) -> Result<EvalScores> {
    if dataset.is_empty() {
        return Err(Error::Precondition("evaluation set is empty".into()));
    }
    let mut per_image = Vec::with_capacity(dataset.len());
    for s in dataset {
        let (x, _) = to_batch(&[s])?;
        let z: Vec<f32> = model.logits(&x)?.flatten_all()?.to_dtype(DType::F32)?.to_vec1()?;
        let pred = binarize(&z, threshold);
        let o = Overlap::count(&pred, s.mask.data())?;
        per_image.push(ImageScore {
            id: s.id.clone(),
            dice: o.dice(),
            iou: o.iou(),
        });
    }
    let n = per_image.len() as f64;
    Ok(EvalScores {
        mds: 100.0 * per_image.iter().map(|s| s.dice).sum::<f64>() / n,
        miou: 100.0 * per_image.iter().map(|s| s.iou).sum::<f64>() / n,
        per_image,
    })
}

/// What the inputs looked like for one record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Condition {
    Clean,
    /// `seed` is the run seed; each image's corruption seed is derived from
    /// it and the image id.
    Noise(NoiseSpec),
}

impl Condition {
    pub fn kind_label(&self) -> &'static str {
        match self {
            Condition::Clean => "clean",
            Condition::Noise(s) => s.kind.as_str(),
        }
    }

    pub fn intensity(&self) -> f64 {
        match self {
            Condition::Clean => 0.0,
            Condition::Noise(s) => s.intensity,
        }
    }
}

/// Static facts about a model that accompany each of its records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub id: String,
    pub params: usize,
    /// Forward GFLOPs for one image at the evaluation resolution.
    pub flops_g: f64,
    pub inference_ms: Option<f64>,
}

impl ModelInfo {
    /// Counts parameters and FLOPs at `height × width`.
    pub fn of(model: &SegmentationModel, id: impl Into<String>, height: usize, width: usize) -> Result<Self> {
        Ok(Self {
            id: id.into(),
            params: model.count_parameters(),
            flops_g: model.estimate_flops([3, height, width])?.gflops(),
            inference_ms: None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub model: String,
    pub condition: Condition,
    pub mds: f64,
    pub miou: f64,
    pub params: usize,
    pub flops_g: f64,
    pub inference_ms: Option<f64>,
    pub n_images: usize,
}

impl EvalRecord {
    pub fn new(info: &ModelInfo, condition: Condition, scores: &EvalScores) -> Self {
        Self {
            model: info.id.clone(),
            condition,
            mds: scores.mds,
            miou: scores.miou,
            params: info.params,
            flops_g: info.flops_g,
            inference_ms: info.inference_ms,
            n_images: scores.per_image.len(),
        }
    }
}

/// Corruption seed of one image: the first 8 bytes of
/// `sha256(run_seed as little-endian u64 ‖ id)`.
pub fn image_seed(run_seed: u64, id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(run_seed.to_le_bytes());
    h.update(id.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("sha256 has 32 bytes"))
}

/// Copies `dataset` with every image corrupted by `kind` at `intensity`.
pub fn corrupt_dataset(dataset: &[ImageSample], kind: NoiseKind, intensity: f64, run_seed: u64) -> Vec<ImageSample> {
    dataset
        .iter()
        .map(|s| {
            let spec = NoiseSpec::new(kind, intensity, image_seed(run_seed, &s.id));
            ImageSample {
                image: corrupt(&s.image, &spec),
                ..s.clone()
            }
        })
        .collect()
}

/// Evaluates `model` under every `(kind, intensity)` pair, in that nesting
/// order. Every model sees the same corrupted pixels for a given run seed.
pub fn robustness_sweep<S: Segmenter + ?Sized>(
    model: &S,
    info: &ModelInfo,
    dataset: &[ImageSample],
    kinds: &[NoiseKind],
    intensities: &[f64],
    run_seed: u64,
    threshold: f64,
) -> Result<Vec<EvalRecord>> {
    if let Some(bad) = intensities.iter().find(|i| !(0.0..=1.0).contains(*i)) {
        return Err(Error::Precondition(format!("sweep intensity {bad} outside [0, 1]")));
    }
    let mut out = Vec::with_capacity(kinds.len() * intensities.len());
    for &kind in kinds {
        for &intensity in intensities {
            let noisy = corrupt_dataset(dataset, kind, intensity, run_seed);
            let scores = evaluate(model, &noisy, threshold)?;
            let cond = Condition::Noise(NoiseSpec::new(kind, intensity, run_seed));
            log::info!("{} {kind} {intensity}: mDS {:.2}", info.id, scores.mds);
            out.push(EvalRecord::new(info, cond, &scores));
        }
    }
    Ok(out)
}

/// Latency of one forward pass plus the conditions it was measured under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceTiming {
    pub median_ms: f64,
    pub shape: [usize; 4],
    pub warmup: usize,
    pub reps: usize,
    pub environment: Environment,
}

/// Median wall-clock forward time over `reps` runs on zeros of `shape`,
/// after `warmup` discarded runs.
pub fn measure_inference<S: Segmenter + ?Sized>(
    model: &S,
    shape: [usize; 4],
    warmup: usize,
    reps: usize,
) -> Result<InferenceTiming> {
    if reps < 10 {
        return Err(Error::Precondition(format!("need at least 10 timed repetitions, got {reps}")));
    }
    let x = Tensor::zeros(shape.to_vec(), DType::F32, &Device::Cpu)?;
    for _ in 0..warmup {
        model.logits(&x)?;
    }
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        model.logits(&x)?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    let median_ms = if reps % 2 == 1 {
        times[reps / 2]
    } else {
        0.5 * (times[reps / 2 - 1] + times[reps / 2])
    };
    Ok(InferenceTiming {
        median_ms,
        shape,
        warmup,
        reps,
        environment: Environment::capture(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::{Image, Mask};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Emits `+big` where the stored mask is set, `-big` elsewhere, ignoring
    /// the input; `invert` flips the answer.
    struct Oracle {
        masks: Vec<Mask>,
        next: std::cell::Cell<usize>,
        invert: bool,
    }

    impl Segmenter for Oracle {
        fn logits(&self, batch: &Tensor) -> Result<Tensor> {
            let m = &self.masks[self.next.get()];
            self.next.set(self.next.get() + 1);
            let v: Vec<f32> = m
                .data()
                .iter()
                .map(|&b| if (b == 1) != self.invert { 10.0 } else { -10.0 })
                .collect();
            let (n, _, h, w) = batch.dims4()?;
            Ok(Tensor::from_vec(v, (n, 1, h, w), &Device::Cpu)?)
        }
    }

    /// Mean of the red channel minus 0.5, as a fixed "random" model.
    struct Linear;

    impl Segmenter for Linear {
        fn logits(&self, batch: &Tensor) -> Result<Tensor> {
            Ok(batch.narrow(1, 0, 1)?.affine(1.0, -0.5)?)
        }
    }

    fn samples(n: usize, seed: u64) -> Vec<ImageSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let img: Vec<f32> = (0..3 * 32 * 32).map(|_| rng.random()).collect();
                let mut m: Vec<u8> = (0..32 * 32).map(|_| rng.random_bool(0.3) as u8).collect();
                m[0] = 1;
                m[1] = 0;
                ImageSample::clean(
                    format!("img{i}"),
                    Image::new(3, 32, 32, img).unwrap(),
                    Mask::new(32, 32, m).unwrap(),
                )
                .unwrap()
            })
            .collect()
    }

    fn oracle(data: &[ImageSample], invert: bool) -> Oracle {
        Oracle {
            masks: data.iter().map(|s| s.mask.clone()).collect(),
            next: 0.into(),
            invert,
        }
    }

    #[test]
    fn perfect_and_complement_models() {
        let data = samples(3, 1);
        let s = evaluate(&oracle(&data, false), &data, 0.5).unwrap();
        assert_eq!((s.mds, s.miou), (100.0, 100.0));
        let s = evaluate(&oracle(&data, true), &data, 0.5).unwrap();
        assert_eq!((s.mds, s.miou), (0.0, 0.0));
    }

    #[test]
    fn fixed_model_matches_pixel_count() {
        let data = samples(4, 2);
        let s = evaluate(&Linear, &data, 0.5).unwrap();
        let (mut d, mut j) = (0.0, 0.0);
        for smp in &data {
            let (mut i, mut p, mut t) = (0.0, 0.0, 0.0);
            for y in 0..32 {
                for x in 0..32 {
                    let z = smp.image.get(0, y, x) as f64 - 0.5;
                    let pos = 1.0 / (1.0 + (-z).exp()) > 0.5;
                    let on = smp.mask.get(y, x) == 1;
                    i += (pos && on) as u8 as f64;
                    p += pos as u8 as f64;
                    t += on as u8 as f64;
                }
            }
            d += 2.0 * i / (p + t);
            j += i / (p + t - i);
        }
        assert!((s.mds - 25.0 * d).abs() < 1e-6, "{} vs {}", s.mds, 25.0 * d);
        assert!((s.miou - 25.0 * j).abs() < 1e-6);
        for im in &s.per_image {
            assert_eq!(im.dice, 2.0 * im.iou / (1.0 + im.iou));
        }
    }

    #[test]
    fn threshold_extremes_are_valid() {
        let data = samples(2, 3);
        let all = evaluate(&Linear, &data, 0.0).unwrap();
        let none = evaluate(&Linear, &data, 1.0).unwrap();
        assert_eq!(none.mds, 0.0);
        assert!(all.mds > 0.0 && all.mds <= 100.0 && all.miou <= all.mds);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        assert!(evaluate(&Linear, &[], 0.5).is_err());
    }

    fn info() -> ModelInfo {
        ModelInfo {
            id: "lin".into(),
            params: 0,
            flops_g: 0.0,
            inference_ms: None,
        }
    }

    #[test]
    fn zero_intensity_rows_equal_clean() {
        let data = samples(3, 4);
        let clean = evaluate(&Linear, &data, 0.5).unwrap();
        let rows = robustness_sweep(&Linear, &info(), &data, &NoiseKind::ALL, &[0.0], 9, 0.5).unwrap();
        assert_eq!(rows.len(), 4);
        for r in rows {
            assert_eq!(r.mds.to_bits(), clean.mds.to_bits());
            assert_eq!(r.miou.to_bits(), clean.miou.to_bits());
        }
    }

    #[test]
    fn sweep_counts_and_reruns() {
        let data = samples(2, 5);
        let levels = [0.0, 0.1, 0.2, 0.3, 0.4];
        let a = robustness_sweep(&Linear, &info(), &data, &NoiseKind::ALL, &levels, 3, 0.5).unwrap();
        let b = robustness_sweep(&Linear, &info(), &data, &NoiseKind::ALL, &levels, 3, 0.5).unwrap();
        assert_eq!(a.len(), 20);
        assert_eq!(a, b);
        assert!(robustness_sweep(&Linear, &info(), &data, &NoiseKind::ALL, &[1.5], 3, 0.5).is_err());
    }

    #[test]
    fn image_seeds_depend_on_run_and_id() {
        assert_eq!(image_seed(1, "a"), image_seed(1, "a"));
        assert_ne!(image_seed(1, "a"), image_seed(2, "a"));
        assert_ne!(image_seed(1, "a"), image_seed(1, "b"));
    }

    #[test]
    fn inference_timing_metadata() {
        assert!(measure_inference(&Linear, [1, 3, 32, 32], 0, 5).is_err());
        let t = measure_inference(&Linear, [1, 3, 32, 32], 2, 10).unwrap();
        assert_eq!((t.shape, t.warmup, t.reps), ([1, 3, 32, 32], 2, 10));
        assert!(t.median_ms >= 0.0);
    }
}
