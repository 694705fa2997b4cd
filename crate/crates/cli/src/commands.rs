use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rfkd::corruption::{corrupt as corrupt_image, NoiseSpec};
use rfkd::data::{build_mixed_training_set, load_dataset, synthesize_toy_dataset, DatasetManifest, ImageSample, Split};
use rfkd::distill::{Strategy, StrategyId};
use rfkd::engine::Checkpoint;
use rfkd::engine::{distill_student, read_log, train_teacher as run_teacher, TrainRun};
use rfkd::eval::report::read_sweep_csv;
use rfkd::eval::{emit_report, evaluate, measure_inference, robustness_sweep, Condition, EvalRecord, ModelInfo, TrainingLog};
use rfkd::image::Image;
use rfkd::models::{Architecture, ModelConfig, SegmentationModel};
use serde::Serialize;

use crate::config::{env_seed, RunConfig};
use crate::{CorruptArgs, DistillArgs, EvalArgs, EvalFlags, Failure, ReportArgs, SweepArgs, SynthArgs, TrainArgs, TrainFlags};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const BEST_FILE: &str = "best.safetensors";
pub const LAST_FILE: &str = "last.safetensors";
pub const RECORDS_FILE: &str = "records.json";

type Outcome = Result<(), Failure>;

fn usage(e: rfkd::Error) -> Failure {
    Failure::Usage(e.to_string())
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Outcome {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Runtime(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", path.display())))
}

pub fn synth(a: SynthArgs) -> Outcome {
    if a.eval_count as u64 > a.n {
        return Err(Failure::Usage(format!("--eval-count {} exceeds --n {}", a.eval_count, a.n)));
    }
    let seed = match a.seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    let m = synthesize_toy_dataset(&a.out, a.n as usize, a.size, a.eval_count, seed)?;
    log::info!(
        "wrote {} pairs ({} train, {} eval) to {}",
        m.entries.len(),
        m.count(Split::Train),
        m.count(Split::Eval),
        a.out.display()
    );
    Ok(())
}

pub fn corrupt(a: CorruptArgs) -> Outcome {
    let seed = match a.seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    let image = Image::load(&a.input)?;
    let out = corrupt_image(&image, &NoiseSpec::new(a.kind, a.intensity, seed));
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    }
    out.save(&a.out)?;
    Ok(())
}

fn parse_arch(s: &str) -> Architecture {
    serde_json::from_value(serde_json::Value::String(s.into())).expect("listed architecture")
}

fn arch_name(a: Architecture) -> String {
    serde_json::to_value(a)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

fn apply_train_flags(cfg: &mut RunConfig, f: &TrainFlags, default_arch: Architecture) -> Result<u64, Failure> {
    if f.data.is_some() {
        cfg.data = f.data.clone();
    }
    if f.out.is_some() {
        cfg.out = f.out.clone();
    }
    match &f.model {
        Some(m) => cfg.model = Some(ModelConfig::default_for(parse_arch(m))),
        None if cfg.model.is_none() => cfg.model = Some(ModelConfig::default_for(default_arch)),
        None => {}
    }
    if let Some(s) = f.steps {
        cfg.train.max_steps = Some(s);
    }
    if let Some(e) = f.epochs {
        cfg.train.epochs = e;
    }
    if let Some(lr) = f.lr {
        cfg.train.lr = lr;
    }
    if let Some(b) = f.batch_size {
        cfg.train.batch_size = b;
    }
    if f.no_augment {
        cfg.train.augment = false;
    }
    if f.stop_at_dice.is_some() {
        cfg.train.stop_at_train_dice = f.stop_at_dice;
    }
    let seed = cfg.resolve_seed(f.seed)?;
    cfg.absolutize()?;
    cfg.train.validate().map_err(usage)?;
    if let Some(m) = &cfg.model {
        m.validate().map_err(usage)?;
    }
    Ok(seed)
}

fn load_split(data: &Path, split: Split) -> Result<Vec<ImageSample>, Failure> {
    let manifest = DatasetManifest::read(data)?;
    let samples = load_dataset(&manifest, split)?;
    if samples.is_empty() {
        return Err(Failure::Runtime(format!("{} has no {split:?} samples", data.display())));
    }
    Ok(samples)
}

#[derive(Serialize)]
struct TrainSummary {
    steps: usize,
    first_loss: Option<f64>,
    final_loss: Option<f64>,
    best_epoch_mean_loss: Option<f64>,
    training_images: usize,
    training_set: &'static str,
}

fn save_run(out: &Path, run: &TrainRun, images: usize, set: &'static str) -> Outcome {
    run.best.save(&out.join(BEST_FILE))?;
    run.last.save(&out.join(LAST_FILE))?;
    let summary = TrainSummary {
        steps: run.log.len(),
        first_loss: run.log.first().map(|r| r.total),
        final_loss: run.log.last().map(|r| r.total),
        best_epoch_mean_loss: run.best.metrics.get("epoch_mean_loss").copied(),
        training_images: images,
        training_set: set,
    };
    write_json(&out.join("summary.json"), &summary)
}

pub fn train_teacher(a: TrainArgs) -> Outcome {
    let mut cfg = RunConfig::load(a.flags.config.as_deref())?;
    cfg.command = "train-teacher".into();
    apply_train_flags(&mut cfg, &a.flags, Architecture::PoolingCrack)?;
    let out = cfg.require_out()?;
    let data = cfg.require_data()?;
    cfg.write(&out)?;
    let train = load_split(&data, Split::Train)?;
    let model = cfg.model.as_ref().expect("model resolved");
    let run = run_teacher(&train, model, &cfg.train, Some(&out.join(LOG_FILE)))?;
    save_run(&out, &run, train.len(), "clean")?;
    log::info!("teacher trained for {} steps; checkpoints in {}", run.log.len(), out.display());
    Ok(())
}

/// A checkpoint path, or a run directory holding `best.safetensors`.
fn checkpoint_file(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(BEST_FILE)
    } else {
        p.to_path_buf()
    }
}

fn load_model(p: &Path) -> Result<(SegmentationModel, Checkpoint), Failure> {
    let ck = Checkpoint::load(&checkpoint_file(p))?;
    Ok((ck.build_model()?, ck))
}

pub fn distill(a: DistillArgs) -> Outcome {
    let mut cfg = RunConfig::load(a.flags.config.as_deref())?;
    cfg.command = "distill".into();
    if a.teacher.is_some() {
        cfg.teacher = a.teacher.clone();
    }
    let strategy = match (&a.strategy, cfg.strategy) {
        (Some(s), _) => s.parse::<Strategy>().map_err(usage)?,
        (None, Some(id)) => id.strategy,
        (None, None) => Strategy::Rfkd,
    };
    let temperature = a
        .temperature
        .or(cfg.strategy.filter(|id| id.strategy == strategy).map(|id| id.temperature))
        .unwrap_or(strategy.default_temperature());
    cfg.strategy = Some(StrategyId::with_temperature(strategy, temperature).map_err(usage)?);
    if a.clean_only {
        cfg.mix.enabled = false;
    }
    if strategy == Strategy::Scratch && cfg.teacher.is_some() {
        log::warn!("strategy scratch trains without a teacher; ignoring the teacher checkpoint");
        cfg.teacher = None;
    }
    if strategy.uses_teacher() && cfg.teacher.is_none() {
        return Err(Failure::Usage(format!("strategy {strategy} needs --teacher")));
    }
    cfg.weights.validate().map_err(usage)?;
    let seed = apply_train_flags(&mut cfg, &a.flags, Architecture::Pct)?;
    let out = cfg.require_out()?;
    let data = cfg.require_data()?;
    cfg.write(&out)?;

    let teacher = cfg.teacher.as_deref().map(load_model).transpose()?.map(|(m, _)| m);
    let clean = load_split(&data, Split::Train)?;
    let (train, set) = if cfg.mix.enabled {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (build_mixed_training_set(&clean, &cfg.mix.kinds, cfg.mix.intensity, &mut rng)?, "mixed")
    } else {
        (clean, "clean")
    };
    let run = distill_student(
        teacher.as_ref(),
        cfg.model.as_ref().expect("model resolved"),
        &train,
        cfg.strategy.expect("strategy resolved"),
        &cfg.weights,
        &cfg.train,
        Some(&out.join(LOG_FILE)),
    )?;
    save_run(&out, &run, train.len(), set)?;
    log::info!("student trained for {} steps on {} images", run.log.len(), train.len());
    Ok(())
}

struct Prepared {
    cfg: RunConfig,
    out: PathBuf,
    model: SegmentationModel,
    info: ModelInfo,
    samples: Vec<ImageSample>,
}

fn prepare_eval(f: &EvalFlags, command: &str) -> Result<Prepared, Failure> {
    let mut cfg = RunConfig::load(f.config.as_deref())?;
    cfg.command = command.into();
    if f.ckpt.is_some() {
        cfg.checkpoint = f.ckpt.clone();
    }
    if f.data.is_some() {
        cfg.data = f.data.clone();
    }
    if f.out.is_some() {
        cfg.out = f.out.clone();
    }
    if let Some(s) = &f.split {
        cfg.split = s.parse().map_err(usage)?;
    }
    if let Some(t) = f.threshold {
        cfg.eval.threshold = t;
    }
    if f.name.is_some() {
        cfg.name = f.name.clone();
    }
    cfg.resolve_seed(f.seed)?;
    cfg.absolutize()?;
    let out = cfg.require_out()?;
    let data = cfg.require_data()?;
    let ckpt = cfg
        .checkpoint
        .clone()
        .ok_or_else(|| Failure::Usage("a checkpoint is required (--ckpt or \"checkpoint\" in the config)".into()))?;
    let (model, ck) = load_model(&ckpt)?;
    let name = cfg.name.clone().unwrap_or_else(|| {
        let role = ck.strategy.map_or("teacher", |s| s.strategy.as_str());
        format!("{}-{role}", arch_name(ck.model_config.architecture))
    });
    cfg.name = Some(name.clone());
    let samples = load_split(&data, cfg.split)?;
    let (h, w) = (samples[0].image.height(), samples[0].image.width());
    let info = ModelInfo::of(&model, name, h, w)?;
    Ok(Prepared {
        cfg,
        out,
        model,
        info,
        samples,
    })
}

pub fn eval(a: EvalArgs) -> Outcome {
    let mut p = prepare_eval(&a.flags, "eval")?;
    if let Some(r) = a.timing_reps {
        p.cfg.eval.timing_reps = r;
    }
    let reps = p.cfg.eval.timing_reps;
    if (1..10).contains(&reps) {
        return Err(Failure::Usage(format!("--timing-reps must be 0 or at least 10, got {reps}")));
    }
    p.cfg.write(&p.out)?;
    let scores = evaluate(&p.model, &p.samples, p.cfg.eval.threshold)?;
    let timing = if reps > 0 {
        let (h, w) = (p.samples[0].image.height(), p.samples[0].image.width());
        let t = measure_inference(&p.model, [1, 3, h, w], p.cfg.eval.timing_warmup, reps)?;
        p.info.inference_ms = Some(t.median_ms);
        Some(t)
    } else {
        None
    };
    let record = EvalRecord::new(&p.info, Condition::Clean, &scores);
    log::info!("{}: mDS {:.2}, mIoU {:.2} over {} images", record.model, record.mds, record.miou, record.n_images);
    write_json(&p.out.join(RECORDS_FILE), &[&record])?;
    write_json(
        &p.out.join("eval.json"),
        &serde_json::json!({
            "record": record,
            "threshold": p.cfg.eval.threshold,
            "per_image": scores.per_image,
            "timing": timing,
        }),
    )
}

pub fn sweep(a: SweepArgs) -> Outcome {
    let mut p = prepare_eval(&a.flags, "sweep")?;
    if let Some(k) = a.kinds {
        p.cfg.eval.kinds = k;
    }
    if let Some(i) = a.intensities {
        p.cfg.eval.intensities = i;
    }
    if p.cfg.eval.kinds.is_empty() || p.cfg.eval.intensities.is_empty() {
        return Err(Failure::Usage("a sweep needs at least one kind and one intensity".into()));
    }
    p.cfg.write(&p.out)?;
    let seed = p.cfg.seed.expect("seed resolved");
    let records = robustness_sweep(
        &p.model,
        &p.info,
        &p.samples,
        &p.cfg.eval.kinds,
        &p.cfg.eval.intensities,
        seed,
        p.cfg.eval.threshold,
    )?;
    write_json(&p.out.join(RECORDS_FILE), &records)?;
    let files = emit_report(&records, &[], &p.out)?;
    log::info!("{} sweep rows in {}", read_sweep_csv(&files.sweep)?.len(), files.sweep.display());
    Ok(())
}

pub fn report(a: ReportArgs) -> Outcome {
    let mut cfg = RunConfig {
        command: "report".into(),
        out: Some(a.out.clone()),
        runs: a.runs.clone(),
        ..Default::default()
    };
    cfg.absolutize()?;
    let out = cfg.require_out()?;
    let mut records: Vec<EvalRecord> = Vec::new();
    let mut logs = Vec::new();
    for dir in &cfg.runs {
        if !dir.is_dir() {
            return Err(Failure::Usage(format!("{} is not a run directory", dir.display())));
        }
        let rec = dir.join(RECORDS_FILE);
        if rec.is_file() {
            let text = std::fs::read_to_string(&rec).map_err(|e| Failure::Runtime(format!("{}: {e}", rec.display())))?;
            let mut r: Vec<EvalRecord> =
                serde_json::from_str(&text).map_err(|e| Failure::Runtime(format!("{}: {e}", rec.display())))?;
            records.append(&mut r);
        }
        let log = dir.join(LOG_FILE);
        if log.is_file() {
            let run = dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
            logs.push(TrainingLog {
                run,
                records: read_log(&log)?,
            });
        }
    }
    if records.is_empty() {
        return Err(Failure::Usage(format!("no {RECORDS_FILE} found in the given runs")));
    }
    cfg.write(&out)?;
    let files = emit_report(&records, &logs, &out)?;
    log::info!("report with {} records and {} plots in {}", records.len(), files.plots.len(), out.display());
    Ok(())
}
