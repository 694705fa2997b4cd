use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::distill::StrategyId;
use crate::error::{Error, Result};
use crate::models::{ModelConfig, SegmentationModel};

const MODEL: &str = "model.";
const ADAPTER: &str = "adapter.";
const OPTIM: &str = "optim.";

/// Everything needed to resume or evaluate a trained network, stored as one
/// safetensors file whose header metadata carries the configuration.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub config_hash: String,
    pub step: u64,
    /// `None` for supervised teacher training.
    pub strategy: Option<StrategyId>,
    pub metrics: BTreeMap<String, f64>,
    pub weights: HashMap<String, Tensor>,
    pub adapters: HashMap<String, Tensor>,
    pub optimizer: HashMap<String, Tensor>,
}

fn checkpoint_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

impl Checkpoint {
    /// Snapshot of `model`'s current weights.
    pub fn capture(model: &SegmentationModel, step: u64, strategy: Option<StrategyId>) -> Result<Self> {
        Ok(Self {
            model_config: model.config().clone(),
            config_hash: model.config().hash(),
            step,
            strategy,
            metrics: BTreeMap::new(),
            weights: model.params().tensors()?,
            adapters: HashMap::new(),
            optimizer: HashMap::new(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = HashMap::new();
        meta.insert("model_config".to_string(), serde_json::to_string(&self.model_config)?);
        meta.insert("config_hash".to_string(), self.config_hash.clone());
        meta.insert("step".to_string(), self.step.to_string());
        meta.insert("strategy".to_string(), serde_json::to_string(&self.strategy)?);
        meta.insert("metrics".to_string(), serde_json::to_string(&self.metrics)?);

        let mut buffers: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
        for (prefix, map) in [(MODEL, &self.weights), (ADAPTER, &self.adapters), (OPTIM, &self.optimizer)] {
            for (name, t) in map {
                let values: Vec<f32> = t.flatten_all()?.to_dtype(DType::F32)?.to_vec1()?;
                let bytes = values.iter().flat_map(|v| v.to_le_bytes()).collect();
                buffers.push((format!("{prefix}{name}"), t.dims().to_vec(), bytes));
            }
        }
        let views = buffers
            .iter()
            .map(|(name, shape, bytes)| {
                TensorView::new(Dtype::F32, shape.clone(), bytes)
                    .map(|v| (name.clone(), v))
                    .map_err(|e| checkpoint_err(path, e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        safetensors::serialize_to_file(views, Some(meta), path).map_err(|e| checkpoint_err(path, e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| checkpoint_err(path, format!("unreadable header: {e}")))?;
        let tensors = SafeTensors::deserialize(&bytes).map_err(|e| checkpoint_err(path, format!("corrupt tensor data: {e}")))?;
        let meta = header
            .metadata()
            .as_ref()
            .ok_or_else(|| checkpoint_err(path, "missing metadata"))?;
        let field = |k: &str| meta.get(k).ok_or_else(|| checkpoint_err(path, format!("metadata lacks {k}")));
        let model_config: ModelConfig = serde_json::from_str(field("model_config")?)?;
        let config_hash = field("config_hash")?.clone();
        if config_hash != model_config.hash() {
            return Err(checkpoint_err(path, "stored hash does not match stored config"));
        }
        let step = field("step")?
            .parse()
            .map_err(|_| checkpoint_err(path, "step is not an integer"))?;
        let strategy = serde_json::from_str(field("strategy")?)?;
        let metrics = serde_json::from_str(field("metrics")?)?;

        let mut out = Self {
            model_config,
            config_hash,
            step,
            strategy,
            metrics,
            weights: HashMap::new(),
            adapters: HashMap::new(),
            optimizer: HashMap::new(),
        };
        for (name, view) in tensors.tensors() {
            if view.dtype() != Dtype::F32 {
                return Err(checkpoint_err(path, format!("tensor {name} is not f32")));
            }
            let values: Vec<f32> = view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::from_vec(values, view.shape(), &Device::Cpu)?;
            if let Some(n) = name.strip_prefix(MODEL) {
                out.weights.insert(n.to_string(), t);
            } else if let Some(n) = name.strip_prefix(ADAPTER) {
                out.adapters.insert(n.to_string(), t);
            } else if let Some(n) = name.strip_prefix(OPTIM) {
                out.optimizer.insert(n.to_string(), t);
            } else {
                return Err(checkpoint_err(path, format!("unexpected tensor {name}")));
            }
        }
        Ok(out)
    }

    /// Copies the stored weights into `model`, which must have been built from
    /// an identical configuration.
    pub fn restore_into(&self, model: &SegmentationModel) -> Result<()> {
        let expected = model.config().hash();
        if expected != self.config_hash {
            return Err(Error::ConfigHashMismatch {
                expected,
                found: self.config_hash.clone(),
            });
        }
        model.params().load(&self.weights)
    }

    /// Builds the stored architecture and loads its weights.
    pub fn build_model(&self) -> Result<SegmentationModel> {
        let model = SegmentationModel::build(&self.model_config, 0)?;
        self.restore_into(&model)?;
        Ok(model)
    }
}
