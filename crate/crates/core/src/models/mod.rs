//! Segmentation networks with four tappable encoder stages.

pub mod config;
pub mod poolformer;
pub mod unet;

use candle_core::{DType, Tensor};

pub use config::{Architecture, MlpExpansion, ModelConfig, PatchEmbed};
pub use poolformer::{Fam, Fsm, PoolFormerSeg, PoolingBlock};
pub use unet::UnetResNet18;

use crate::error::{Error, Result};
use crate::nn::flops::{self, FlopReport};
use crate::nn::ParamStore;

/// Input height and width must be multiples of this.
pub const SPATIAL_DIVISOR: usize = 32;

/// The four encoder-stage outputs, at strides 4, 8, 16 and 32.
#[derive(Debug, Clone)]
pub struct StageFeatures(Vec<Tensor>);

impl StageFeatures {
    pub fn from_tensors(taps: Vec<Tensor>) -> candle_core::Result<Self> {
        if taps.len() != 4 {
            candle_core::bail!("expected 4 stage features, got {}", taps.len())
        }
        for pair in taps.windows(2) {
            let (_, _, h0, w0) = pair[0].dims4()?;
            let (_, _, h1, w1) = pair[1].dims4()?;
            if h0 != 2 * h1 || w0 != 2 * w1 {
                candle_core::bail!("stage features must halve in size: {:?} then {:?}", pair[0].dims(), pair[1].dims())
            }
        }
        Ok(Self(taps))
    }

    pub fn stages(&self) -> &[Tensor] {
        &self.0
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.0[i]
    }

    /// Spatial sizes `(h, w)` of the four stages.
    pub fn sizes(&self) -> Vec<(usize, usize)> {
        self.0.iter().map(|t| (t.dim(2).unwrap_or(0), t.dim(3).unwrap_or(0))).collect()
    }

    pub fn detach(&self) -> Self {
        Self(self.0.iter().map(Tensor::detach).collect())
    }

    pub fn is_finite(&self) -> Result<bool> {
        for t in &self.0 {
            if !all_finite(t)? {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

pub(crate) fn all_finite(t: &Tensor) -> Result<bool> {
    let v: Vec<f64> = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?;
    Ok(v.iter().all(|x| x.is_finite()))
}

/// Anything that maps an `N×3×H×W` batch to `N×1×H×W` logits.
pub trait Segmenter {
    fn logits(&self, batch: &Tensor) -> Result<Tensor>;
}

#[derive(Debug, Clone)]
enum Net {
    PoolFormer(PoolFormerSeg),
    Unet(UnetResNet18),
}

/// A built network together with the parameters it owns.
#[derive(Debug)]
pub struct SegmentationModel {
    config: ModelConfig,
    params: ParamStore,
    net: Net,
}

impl SegmentationModel {
    /// Builds `config` with weights drawn from `seed`.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new(seed, DType::F32);
        let net = match config.architecture {
            Architecture::Pct | Architecture::PoolingCrack => Net::PoolFormer(PoolFormerSeg::new(&mut params, config)?),
            Architecture::UnetResnet18 => Net::Unet(UnetResNet18::new(&mut params, config)?),
        };
        Ok(Self {
            config: config.clone(),
            params,
            net,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn count_parameters(&self) -> usize {
        self.params.count()
    }

    pub fn forward_with_taps(&self, batch: &Tensor) -> Result<(Tensor, StageFeatures)> {
        check_batch(batch)?;
        let batch = batch.to_dtype(self.params.dtype())?;
        Ok(match &self.net {
            Net::PoolFormer(m) => m.forward_with_taps(&batch)?,
            Net::Unet(m) => m.forward_with_taps(&batch)?,
        })
    }

    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_taps(batch)?.0)
    }

    /// Analytic FLOPs of one forward pass on a single `shape = [3, H, W]` input.
    pub fn estimate_flops(&self, shape: [usize; 3]) -> Result<FlopReport> {
        let x = Tensor::zeros((1, shape[0], shape[1], shape[2]), self.params.dtype(), self.params.device())?;
        flops::profile(&shape, || self.forward(&x).map(|_| ()))
    }
}

impl Segmenter for SegmentationModel {
    fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        self.forward(batch)
    }
}

fn check_batch(batch: &Tensor) -> Result<()> {
    let dims = batch.dims();
    if dims.len() != 4 || dims[1] != 3 {
        return Err(Error::Shape(format!("expected an N×3×H×W batch, got {dims:?}")));
    }
    if dims[2] % SPATIAL_DIVISOR != 0 || dims[3] % SPATIAL_DIVISOR != 0 || dims[2] == 0 || dims[3] == 0 {
        return Err(Error::Shape(format!(
            "input {}×{} must have height and width divisible by {SPATIAL_DIVISOR}",
            dims[2], dims[3]
        )));
    }
    Ok(())
}

pub fn build_pct(config: &ModelConfig, seed: u64) -> Result<SegmentationModel> {
    SegmentationModel::build(config, seed)
}

pub fn build_poolingcrack(config: &ModelConfig, seed: u64) -> Result<SegmentationModel> {
    SegmentationModel::build(config, seed)
}

pub fn build_unet_resnet18(seed: u64) -> Result<SegmentationModel> {
    SegmentationModel::build(&ModelConfig::unet_resnet18(), seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn small(arch: Architecture) -> ModelConfig {
        let mut c = ModelConfig::default_for(arch);
        if arch == Architecture::PoolingCrack {
            c.embed_channels = [8, 16, 24, 32];
            c.blocks_per_stage = [1, 1, 1, 1];
            c.decoder_width = 8;
        }
        c
    }

    fn rand_batch(n: usize, size: usize, seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f32> = (0..n * 3 * size * size).map(|_| rng.random()).collect();
        Tensor::from_vec(v, (n, 3, size, size), &Device::Cpu).unwrap()
    }

    #[test]
    fn tap_schedule_at_64() {
        for arch in [Architecture::Pct, Architecture::PoolingCrack, Architecture::UnetResnet18] {
            let m = SegmentationModel::build(&small(arch), 0).unwrap();
            let (logits, taps) = m.forward_with_taps(&rand_batch(1, 64, 1)).unwrap();
            assert_eq!(logits.dims(), &[1, 1, 64, 64], "{arch:?}");
            assert_eq!(taps.sizes(), vec![(16, 16), (8, 8), (4, 4), (2, 2)], "{arch:?}");
            for (t, c) in taps.stages().iter().zip(m.config().stage_channels()) {
                assert_eq!(t.dim(1).unwrap(), c);
            }
            assert!(taps.is_finite().unwrap());
            assert!(all_finite(&logits).unwrap());
        }
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let m = SegmentationModel::build(&ModelConfig::pct(), 0).unwrap();
        let err = m.forward(&rand_batch(1, 48, 0)).unwrap_err();
        assert!(err.to_string().contains("divisible by 32"));
    }

    #[test]
    fn batch_independence() {
        let m = SegmentationModel::build(&ModelConfig::pct(), 3).unwrap();
        let one = rand_batch(1, 32, 5);
        let two = Tensor::cat(&[&one, &one], 0).unwrap();
        let a: Vec<f32> = m.forward(&one).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f32> = m.forward(&two).unwrap().get(1).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
        assert!(diff < 1e-5, "{diff}");
    }

    #[test]
    fn same_seed_same_forward() {
        let x = rand_batch(1, 32, 2);
        let a: Vec<f32> = build_unet_resnet18(4).unwrap().forward(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f32> = build_unet_resnet18(4).unwrap().forward(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn flops_scale_with_area() {
        let m = SegmentationModel::build(&small(Architecture::UnetResnet18), 0).unwrap();
        let a = m.estimate_flops([3, 64, 64]).unwrap();
        let b = m.estimate_flops([3, 128, 128]).unwrap();
        let ratio = b.flops as f64 / a.flops as f64;
        assert!((ratio - 4.0).abs() < 1e-9, "{ratio}");
    }
}
