//! Teacher training and student distillation loops.

mod checkpoint;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::Checkpoint;

use crate::data::{augment, ImageSample};
use crate::distill::{
    baseline_loss, rfkd_total_loss, supervised_loss, AdapterBank, DistillWeights, LossBreakdown, LossOutput, Strategy,
    StrategyId,
};
use crate::error::{Error, Result};
use crate::eval::{binarize, Overlap, DEFAULT_THRESHOLD};
use crate::models::{ModelConfig, SegmentationModel, SPATIAL_DIVISOR};
use crate::nn::{AdamW, AdamWConfig};

/// Optimisation settings shared by both training stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub augment: bool,
    pub device: String,
    /// Stop after this many optimiser steps even if epochs remain.
    pub max_steps: Option<usize>,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// End training after the first epoch whose mean hard Dice on its
    /// (possibly augmented) training batches reaches this value.
    pub stop_at_train_dice: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 2,
            epochs: 500,
            weight_decay: 0.01,
            seed: 0,
            augment: true,
            device: "cpu".into(),
            max_steps: None,
            clip_norm: Some(5.0),
            stop_at_train_dice: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.max_steps == Some(0) {
            return Err(Error::Config("max_steps must be at least 1 when set".into()));
        }
        if let Some(d) = self.stop_at_train_dice {
            if !(0.0..=1.0).contains(&d) {
                return Err(Error::Config(format!("stop_at_train_dice {d} outside [0, 1]")));
            }
        }
        if self.device != "cpu" {
            log::warn!("device hint {:?} ignored; training runs on the CPU", self.device);
        }
        Ok(())
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..Default::default()
        }
    }
}

/// One line of the JSON-lines training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub total: f64,
    pub l1_1: f64,
    pub l1_2: f64,
    pub l1_3: f64,
    pub l1_4: f64,
    pub l2: f64,
    pub l3: f64,
    pub lr: f64,
}

impl StepRecord {
    fn new(step: usize, epoch: usize, b: &LossBreakdown, lr: f64) -> Self {
        Self {
            step,
            epoch,
            total: b.total,
            l1_1: b.l1[0],
            l1_2: b.l1[1],
            l1_3: b.l1[2],
            l1_4: b.l1[3],
            l2: b.l2,
            l3: b.l3,
            lr,
        }
    }

    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown {
            total: self.total,
            l1: [self.l1_1, self.l1_2, self.l1_3, self.l1_4],
            l2: self.l2,
            l3: self.l3,
        }
    }
}

/// Reads a JSON-lines training log.
pub fn read_log(path: &Path) -> Result<Vec<StepRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Result of a training stage.
#[derive(Debug)]
pub struct TrainRun {
    /// The network with its final weights.
    pub model: SegmentationModel,
    /// Feature adapters (feature-distillation runs only).
    pub adapters: Option<AdapterBank>,
    /// Weights at the epoch with the lowest mean training loss.
    pub best: Checkpoint,
    /// Weights after the last step.
    pub last: Checkpoint,
    pub log: Vec<StepRecord>,
}

/// Independent sub-seeds for weight initialisation and data order.
struct Seeds {
    model: u64,
    adapters: u64,
    data: u64,
}

impl Seeds {
    fn derive(seed: u64) -> Self {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Self {
            model: r.random(),
            adapters: r.random(),
            data: r.random(),
        }
    }
}

/// Stacks samples into an `N×3×H×W` image batch and an `N×1×H×W` mask batch.
pub fn to_batch(samples: &[&ImageSample]) -> Result<(Tensor, Tensor)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Precondition("cannot batch zero samples".into()))?;
    let (h, w) = (first.image.height(), first.image.width());
    let mut images = Vec::with_capacity(samples.len() * 3 * h * w);
    let mut masks = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if s.image.height() != h || s.image.width() != w || s.image.channels() != 3 {
            return Err(Error::Shape(format!(
                "sample {} is {}×{}×{}, batch expects 3×{h}×{w}",
                s.id,
                s.image.channels(),
                s.image.height(),
                s.image.width()
            )));
        }
        images.extend_from_slice(s.image.data());
        masks.extend(s.mask.data().iter().map(|&m| m as f32));
    }
    let n = samples.len();
    Ok((
        Tensor::from_vec(images, (n, 3, h, w), &Device::Cpu)?,
        Tensor::from_vec(masks, (n, 1, h, w), &Device::Cpu)?,
    ))
}

fn check_dataset(samples: &[ImageSample]) -> Result<()> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Precondition("training set is empty".into()))?;
    let (h, w) = (first.image.height(), first.image.width());
    if h % SPATIAL_DIVISOR != 0 || w % SPATIAL_DIVISOR != 0 {
        return Err(Error::Precondition(format!(
            "training images are {h}×{w}; height and width must be divisible by {SPATIAL_DIVISOR}"
        )));
    }
    Ok(())
}

struct LogSink(Option<BufWriter<File>>);

impl LogSink {
    fn open(path: Option<&Path>) -> Result<Self> {
        Ok(Self(match path {
            Some(p) => {
                if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                }
                Some(BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?))
            }
            None => None,
        }))
    }

    fn write(&mut self, rec: &StepRecord) -> Result<()> {
        if let Some(w) = self.0.as_mut() {
            serde_json::to_writer(&mut *w, rec)?;
            w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| Error::io("training log", e))?;
        }
        Ok(())
    }
}

/// Shared optimisation loop: shuffles each epoch, optionally augments, and
/// calls `loss_fn` on every mini-batch. Returns the log and the best/last
/// checkpoints produced by `snapshot`.
fn optimise(
    samples: &[ImageSample],
    cfg: &TrainConfig,
    data_seed: u64,
    vars: Vec<Var>,
    log_path: Option<&Path>,
    mut loss_fn: impl FnMut(&Tensor, &Tensor) -> Result<(LossOutput, Tensor)>,
    mut snapshot: impl FnMut(u64, &AdamW) -> Result<Checkpoint>,
) -> Result<(Vec<StepRecord>, Checkpoint, Checkpoint)> {
    cfg.validate()?;
    check_dataset(samples)?;
    let mut opt = AdamW::new(vars, cfg.adamw())?;
    let mut rng = ChaCha8Rng::seed_from_u64(data_seed);
    let mut sink = LogSink::open(log_path)?;
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let budget = cfg.max_steps.unwrap_or(usize::MAX);
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut step = 0;
    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        let mut epoch_steps = 0;
        let mut dice = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            if step >= budget {
                break;
            }
            let owned: Vec<ImageSample> = if cfg.augment {
                chunk.iter().map(|&i| augment(&samples[i], &mut rng)).collect()
            } else {
                chunk.iter().map(|&i| samples[i].clone()).collect()
            };
            let refs: Vec<&ImageSample> = owned.iter().collect();
            let (images, masks) = to_batch(&refs)?;
            let (out, logits) = loss_fn(&images, &masks)?;
            if cfg.stop_at_train_dice.is_some() {
                dice.extend(batch_dice(&logits, &masks)?);
            }
            if !out.breakdown.total.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            let grads = out.total.backward()?;
            opt.step(&grads, cfg.clip_norm)
                .map_err(|_| Error::NonFiniteLoss { step })?;
            let rec = StepRecord::new(step, epoch, &out.breakdown, cfg.lr);
            sink.write(&rec)?;
            log.push(rec);
            epoch_sum += out.breakdown.total;
            epoch_steps += 1;
            step += 1;
        }
        if epoch_steps > 0 {
            let mean = epoch_sum / epoch_steps as f64;
            log::info!("epoch {epoch}: mean loss {mean:.5} over {epoch_steps} steps");
            if best.as_ref().is_none_or(|(b, _)| mean < *b) {
                let mut ck = snapshot(step as u64, &opt)?;
                ck.metrics.insert("epoch_mean_loss".into(), mean);
                ck.metrics.insert("epoch".into(), epoch as f64);
                best = Some((mean, ck));
            }
        }
        if let Some(target) = cfg.stop_at_train_dice {
            let mean = dice.iter().sum::<f64>() / dice.len().max(1) as f64;
            if !dice.is_empty() && mean >= target {
                log::info!("epoch {epoch}: train dice {mean:.4} reached {target} after {step} steps");
                break 'epochs;
            }
        }
        if step >= budget {
            break 'epochs;
        }
    }
    let mut last = snapshot(step as u64, &opt)?;
    if let Some(r) = log.last() {
        last.metrics.insert("final_step_loss".into(), r.total);
    }
    let best = best.map(|(_, c)| c).unwrap_or_else(|| last.clone());
    Ok((log, best, last))
}

/// Hard Dice of each sample in a batch at the default threshold.
fn batch_dice(logits: &Tensor, masks: &Tensor) -> Result<Vec<f64>> {
    let n = logits.dim(0)?;
    let z: Vec<f32> = logits.detach().flatten_all()?.to_dtype(DType::F32)?.to_vec1()?;
    let m: Vec<u8> = masks.flatten_all()?.to_dtype(DType::U8)?.to_vec1()?;
    let per = z.len() / n.max(1);
    z.chunks(per)
        .zip(m.chunks(per))
        .map(|(z, m)| Ok(Overlap::count(&binarize(z, DEFAULT_THRESHOLD), m)?.dice()))
        .collect()
}

fn optimizer_state(opt: &AdamW) -> std::collections::HashMap<String, Tensor> {
    let mut s = opt.state();
    s.insert(
        "step".into(),
        Tensor::new(&[opt.steps_taken() as f32], &Device::Cpu).expect("scalar tensor"),
    );
    s
}

/// Trains a network from scratch on the Dice loss alone.
pub fn train_teacher(
    dataset: &[ImageSample],
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    log_path: Option<&Path>,
) -> Result<TrainRun> {
    supervised(dataset, model_config, cfg, log_path, None)
}

fn supervised(
    dataset: &[ImageSample],
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    log_path: Option<&Path>,
    strategy: Option<StrategyId>,
) -> Result<TrainRun> {
    cfg.validate()?;
    let seeds = Seeds::derive(cfg.seed);
    let model = SegmentationModel::build(model_config, seeds.model)?;
    let (log, best, last) = optimise(
        dataset,
        cfg,
        seeds.data,
        model.params().vars(),
        log_path,
        |x, m| {
            let z = model.forward(x)?;
            Ok((supervised_loss(&z, m)?, z))
        },
        |step, opt| {
            let mut ck = Checkpoint::capture(&model, step, strategy)?;
            ck.optimizer = optimizer_state(opt);
            Ok(ck)
        },
    )?;
    Ok(TrainRun {
        model,
        adapters: None,
        best,
        last,
        log,
    })
}

/// Trains a student under `strategy` with a frozen teacher.
///
/// `Strategy::Scratch` ignores the teacher and reproduces [`train_teacher`]
/// on the student architecture.
pub fn distill_student(
    teacher: Option<&SegmentationModel>,
    student_config: &ModelConfig,
    dataset: &[ImageSample],
    strategy: StrategyId,
    weights: &DistillWeights,
    cfg: &TrainConfig,
    log_path: Option<&Path>,
) -> Result<TrainRun> {
    weights.validate()?;
    if strategy.strategy == Strategy::Scratch {
        return supervised(dataset, student_config, cfg, log_path, Some(strategy));
    }
    let teacher = teacher.ok_or_else(|| Error::Precondition(format!("strategy {} needs a teacher", strategy.strategy)))?;
    cfg.validate()?;
    let seeds = Seeds::derive(cfg.seed);
    let student = SegmentationModel::build(student_config, seeds.model)?;
    let adapters = if strategy.strategy == Strategy::Rfkd {
        Some(AdapterBank::new(
            student_config.stage_channels(),
            teacher.config().stage_channels(),
            seeds.adapters,
        )?)
    } else {
        None
    };
    let mut vars = student.params().vars();
    if let Some(a) = &adapters {
        vars.extend(a.params().vars());
    }
    let (log, best, last) = optimise(
        dataset,
        cfg,
        seeds.data,
        vars,
        log_path,
        |x, m| {
            let (t_logits, t_taps) = teacher.forward_with_taps(x)?;
            let (t_logits, t_taps) = (t_logits.detach(), t_taps.detach());
            let (s_logits, s_taps) = student.forward_with_taps(x)?;
            let out = match &adapters {
                Some(a) => rfkd_total_loss(&s_taps, &t_taps, &s_logits, &t_logits, m, a, weights)?,
                None => baseline_loss(strategy, &s_logits, &t_logits, m, weights)?,
            };
            Ok((out, s_logits))
        },
        |step, opt| {
            let mut ck = Checkpoint::capture(&student, step, Some(strategy))?;
            ck.optimizer = optimizer_state(opt);
            if let Some(a) = &adapters {
                ck.adapters = a.params().tensors()?;
            }
            Ok(ck)
        },
    )?;
    Ok(TrainRun {
        model: student,
        adapters,
        best,
        last,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::{Image, Mask};
    use crate::models::Architecture;

    fn tiny(arch: Architecture) -> ModelConfig {
        let mut c = ModelConfig::default_for(arch);
        c.embed_channels = [4, 8, 8, 8];
        c.blocks_per_stage = [1, 1, 1, 1];
        c.decoder_width = 4;
        c
    }

    fn dataset(n: usize) -> Vec<ImageSample> {
        (0..n)
            .map(|i| {
                let mut mask = Mask::zeros(32, 32);
                let mut image = Image::filled(3, 32, 32, 0.7);
                for y in 0..32 {
                    let x = (i * 3 + y / 2) % 32;
                    mask.set(y, x, true);
                    for c in 0..3 {
                        image.set(c, y, x, 0.1);
                    }
                }
                ImageSample::clean(format!("s{i}"), image, mask).unwrap()
            })
            .collect()
    }

    fn cfg(steps: usize) -> TrainConfig {
        TrainConfig {
            max_steps: Some(steps),
            epochs: 100,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn dice_target_ends_training_at_epoch_boundary() {
        let data = dataset(4);
        let c = TrainConfig {
            stop_at_train_dice: Some(0.0),
            ..cfg(10)
        };
        let run = train_teacher(&data, &tiny(Architecture::Pct), &c, None).unwrap();
        assert_eq!(run.log.len(), 2);
        let c = TrainConfig {
            stop_at_train_dice: Some(1.5),
            ..cfg(10)
        };
        assert!(train_teacher(&data, &tiny(Architecture::Pct), &c, None).is_err());
    }

    #[test]
    fn zero_epochs_rejected() {
        let c = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        assert!(matches!(
            train_teacher(&dataset(2), &tiny(Architecture::PoolingCrack), &c, None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn empty_or_indivisible_datasets_rejected() {
        assert!(train_teacher(&[], &tiny(Architecture::PoolingCrack), &cfg(1), None).is_err());
        let odd = ImageSample::clean("x", Image::filled(3, 40, 40, 0.5), Mask::zeros(40, 40)).unwrap();
        assert!(train_teacher(&[odd], &tiny(Architecture::PoolingCrack), &cfg(1), None).is_err());
    }

    #[test]
    fn log_file_matches_returned_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        let run = train_teacher(&dataset(4), &tiny(Architecture::PoolingCrack), &cfg(5), Some(&path)).unwrap();
        assert_eq!(run.log.len(), 5);
        assert_eq!(read_log(&path).unwrap(), run.log);
        assert_eq!(run.last.step, 5);
        assert_eq!(run.log[2].epoch, 1);
    }

    #[test]
    fn scratch_equals_supervised_training() {
        let student = tiny(Architecture::Pct);
        let a = train_teacher(&dataset(4), &student, &cfg(4), None).unwrap();
        let b = distill_student(None, &student, &dataset(4), StrategyId::new(Strategy::Scratch), &DistillWeights::default(), &cfg(4), None).unwrap();
        let la: Vec<f64> = a.log.iter().map(|r| r.total).collect();
        let lb: Vec<f64> = b.log.iter().map(|r| r.total).collect();
        assert_eq!(la, lb);
    }

    #[test]
    fn distillation_freezes_teacher_and_logs_weighted_totals() {
        let teacher = SegmentationModel::build(&tiny(Architecture::PoolingCrack), 1).unwrap();
        let before = teacher.params().tensors().unwrap();
        let w = DistillWeights::default();
        let run = distill_student(Some(&teacher), &tiny(Architecture::Pct), &dataset(4), StrategyId::new(Strategy::Rfkd), &w, &cfg(3), None).unwrap();
        for (name, t) in teacher.params().tensors().unwrap() {
            let a: Vec<f32> = t.flatten_all().unwrap().to_vec1().unwrap();
            let b: Vec<f32> = before[&name].flatten_all().unwrap().to_vec1().unwrap();
            assert_eq!(a, b, "{name}");
        }
        for r in &run.log {
            assert!((r.breakdown().weighted_sum(&w) - r.total).abs() < 1e-6);
        }
        assert!(!run.last.adapters.is_empty());
        for s in [Strategy::Nkd, Strategy::Cwd, Strategy::Dist] {
            let run = distill_student(Some(&teacher), &tiny(Architecture::Pct), &dataset(4), StrategyId::new(s), &w, &cfg(2), None).unwrap();
            assert_eq!(run.log.len(), 2);
        }
        assert!(distill_student(None, &tiny(Architecture::Pct), &dataset(4), StrategyId::new(Strategy::Rfkd), &w, &cfg(1), None).is_err());
    }
}
