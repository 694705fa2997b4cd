use std::path::{Path, PathBuf};

use rfkd::corruption::NoiseKind;
use rfkd::data::{IntensitySampler, Split};
use rfkd::distill::{DistillWeights, StrategyId};
use rfkd::engine::TrainConfig;
use rfkd::eval::DEFAULT_THRESHOLD;
use rfkd::models::ModelConfig;
use serde::{Deserialize, Serialize};

use crate::Failure;

pub const RUN_FILE: &str = "run.json";
pub const SEED_ENV: &str = "RFKD_SEED";

/// How the distillation set is assembled from the clean training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MixConfig {
    /// Append corrupted copies of half the clean images.
    pub enabled: bool,
    pub kinds: Vec<NoiseKind>,
    pub intensity: IntensitySampler,
}

impl Default for MixConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            kinds: NoiseKind::ALL.to_vec(),
            intensity: IntensitySampler::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub threshold: f64,
    pub kinds: Vec<NoiseKind>,
    pub intensities: Vec<f64>,
    /// Timed forward passes; 0 skips latency measurement.
    pub timing_reps: usize,
    pub timing_warmup: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            kinds: NoiseKind::ALL.to_vec(),
            intensities: vec![0.0, 0.1, 0.2, 0.3, 0.4],
            timing_reps: 10,
            timing_warmup: 2,
        }
    }
}

/// Everything one invocation needs. Read from `--config`, overridden by
/// flags, and written back fully resolved as `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub command: String,
    pub data: Option<PathBuf>,
    pub split: Split,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub model: Option<ModelConfig>,
    pub teacher: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub name: Option<String>,
    pub strategy: Option<StrategyId>,
    pub weights: DistillWeights,
    pub train: TrainConfig,
    pub mix: MixConfig,
    pub eval: EvalConfig,
    pub runs: Vec<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: String::new(),
            data: None,
            split: Split::Eval,
            out: None,
            seed: None,
            model: None,
            teacher: None,
            checkpoint: None,
            name: None,
            strategy: None,
            weights: DistillWeights::default(),
            train: TrainConfig::default(),
            mix: MixConfig::default(),
            eval: EvalConfig::default(),
            runs: Vec::new(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("config {}: {e}", path.display())))
    }

    /// Flag, then config file, then `RFKD_SEED`, then 0.
    pub fn resolve_seed(&mut self, flag: Option<u64>) -> Result<u64, Failure> {
        let seed = match flag.or(self.seed) {
            Some(s) => s,
            None => env_seed()?.unwrap_or(0),
        };
        self.seed = Some(seed);
        self.train.seed = seed;
        Ok(seed)
    }

    pub fn require_out(&self) -> Result<PathBuf, Failure> {
        self.out
            .clone()
            .ok_or_else(|| Failure::Usage("an output directory is required (--out or \"out\" in the config)".into()))
    }

    pub fn require_data(&self) -> Result<PathBuf, Failure> {
        self.data
            .clone()
            .ok_or_else(|| Failure::Usage("a dataset is required (--data or \"data\" in the config)".into()))
    }

    /// Makes every path absolute so `run.json` can be replayed from anywhere.
    pub fn absolutize(&mut self) -> Result<(), Failure> {
        for p in [&mut self.data, &mut self.out, &mut self.teacher, &mut self.checkpoint].into_iter().flatten() {
            *p = absolute(p)?;
        }
        for p in &mut self.runs {
            *p = absolute(p)?;
        }
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<(), Failure> {
        std::fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", dir.display())))?;
        let path = dir.join(RUN_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|e| Failure::Runtime(e.to_string()))?;
        std::fs::write(&path, text + "\n").map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", path.display())))
    }
}

fn absolute(p: &Path) -> Result<PathBuf, Failure> {
    std::path::absolute(p).map_err(|e| Failure::Usage(format!("bad path {}: {e}", p.display())))
}

pub fn env_seed() -> Result<Option<u64>, Failure> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Failure::Usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_config_fills_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"train": {"lr": 0.01}, "seed": 4}"#).unwrap();
        assert_eq!(c.train.lr, 0.01);
        assert_eq!(c.train.batch_size, 2);
        assert_eq!(c.seed, Some(4));
        assert!(c.mix.enabled);
        assert_eq!(c.eval.intensities.len(), 5);
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut c = RunConfig {
            model: Some(ModelConfig::pct()),
            ..Default::default()
        };
        c.resolve_seed(Some(9)).unwrap();
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.train.seed, 9);
    }

    #[test]
    fn flag_seed_beats_file_seed() {
        let mut c = RunConfig {
            seed: Some(3),
            ..Default::default()
        };
        assert_eq!(c.resolve_seed(Some(5)).unwrap(), 5);
        let mut c = RunConfig {
            seed: Some(3),
            ..Default::default()
        };
        assert_eq!(c.resolve_seed(None).unwrap(), 3);
    }
}
