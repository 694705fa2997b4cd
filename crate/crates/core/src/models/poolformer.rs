//! Pooling-block encoder with an FSM/FAM top-down decoder, shared by the PCT
//! student and the PoolingCrack teacher.

use candle_core::{Result, Tensor};

use super::config::{MlpExpansion, ModelConfig, PatchEmbed};
use super::StageFeatures;
use crate::nn::layers::{Conv2d, GroupNorm, GroupedPointwise, LayerScale};
use crate::nn::ops;
use crate::nn::ParamStore;

#[derive(Debug, Clone)]
enum Mlp {
    Depthwise {
        expand: Conv2d,
        reduce: GroupedPointwise,
    },
    Dense {
        fc1: Conv2d,
        fc2: Conv2d,
    },
}

impl Mlp {
    fn new(store: &mut ParamStore, name: &str, c: usize, kind: MlpExpansion) -> crate::Result<Self> {
        Ok(match kind {
            MlpExpansion::Depthwise => Mlp::Depthwise {
                expand: Conv2d::depthwise(store, &format!("{name}.expand"), c, 2, 3, 1, 1, true)?,
                reduce: GroupedPointwise::new(store, &format!("{name}.reduce"), 2 * c, c)?,
            },
            MlpExpansion::Dense(r) => {
                let hidden = ((c as f64) * r).round() as usize;
                Mlp::Dense {
                    fc1: Conv2d::new(store, &format!("{name}.fc1"), c, hidden, 1, 1, 0, true)?,
                    fc2: Conv2d::new(store, &format!("{name}.fc2"), hidden, c, 1, 1, 0, true)?,
                }
            }
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Mlp::Depthwise { expand, reduce } => reduce.forward(&expand.forward(x)?.gelu_erf()?),
            Mlp::Dense { fc1, fc2 } => fc2.forward(&fc1.forward(x)?.gelu_erf()?),
        }
    }
}

/// MetaFormer block whose token mixer is `AvgPool3×3(x) − x`.
#[derive(Debug, Clone)]
pub struct PoolingBlock {
    norm1: GroupNorm,
    scale1: LayerScale,
    norm2: GroupNorm,
    mlp: Mlp,
    scale2: LayerScale,
}

impl PoolingBlock {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, mlp: MlpExpansion, layer_scale: f64) -> crate::Result<Self> {
        Ok(Self {
            norm1: GroupNorm::per_channel(store, &format!("{name}.norm1"), c)?,
            scale1: LayerScale::new(store, &format!("{name}.scale1"), c, layer_scale)?,
            norm2: GroupNorm::per_channel(store, &format!("{name}.norm2"), c)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), c, mlp)?,
            scale2: LayerScale::new(store, &format!("{name}.scale2"), c, layer_scale)?,
        })
    }

    /// The token-mixer term `pool(n) − n` for an already normalised input.
    pub fn token_mixer(n: &Tensor) -> Result<Tensor> {
        ops::avg_pool_same(n, 3)? - n
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = (x + self.scale1.forward(&Self::token_mixer(&self.norm1.forward(x)?)?)?)?;
        &y + self.scale2.forward(&self.mlp.forward(&self.norm2.forward(&y)?)?)?
    }
}

#[derive(Debug, Clone)]
enum Embed {
    Separable { dw: Conv2d, pw: Conv2d },
    Standard { conv: Conv2d },
}

#[derive(Debug, Clone)]
struct PatchEmbedding {
    embed: Embed,
    norm: GroupNorm,
}

impl PatchEmbedding {
    fn new(store: &mut ParamStore, name: &str, kind: PatchEmbed, c_in: usize, c_out: usize, first: bool) -> crate::Result<Self> {
        let (k, s, p) = if first { (7, 4, 2) } else { (3, 2, 1) };
        let embed = match kind {
            PatchEmbed::DepthwiseSeparable => Embed::Separable {
                dw: Conv2d::depthwise(store, &format!("{name}.dw"), c_in, 1, k, s, p, true)?,
                pw: Conv2d::new(store, &format!("{name}.pw"), c_in, c_out, 1, 1, 0, true)?,
            },
            PatchEmbed::Standard => Embed::Standard {
                conv: Conv2d::new(store, &format!("{name}.conv"), c_in, c_out, k, s, p, true)?,
            },
        };
        Ok(Self {
            embed,
            norm: GroupNorm::per_channel(store, &format!("{name}.norm"), c_out)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = match &self.embed {
            Embed::Separable { dw, pw } => pw.forward(&dw.forward(x)?)?,
            Embed::Standard { conv } => conv.forward(x)?,
        };
        self.norm.forward(&y)
    }
}

/// Feature selection: channel attention on a skip path, projected to the
/// decoder width.
#[derive(Debug, Clone)]
pub struct Fsm {
    fc: Conv2d,
    proj: Conv2d,
}

impl Fsm {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, d: usize) -> crate::Result<Self> {
        Ok(Self {
            fc: Conv2d::new(store, &format!("{name}.fc"), c, c, 1, 1, 0, false)?,
            proj: Conv2d::new(store, &format!("{name}.proj"), c, d, 1, 1, 0, true)?,
        })
    }

    pub fn from_parts(fc: Conv2d, proj: Conv2d) -> Self {
        Self { fc, proj }
    }

    pub fn forward(&self, skip: &Tensor) -> Result<Tensor> {
        let w = candle_nn::ops::sigmoid(&self.fc.forward(&ops::global_avg_pool(skip)?)?)?;
        self.proj.forward(&(skip + skip.broadcast_mul(&w)?)?)
    }
}

/// Feature alignment: upsample the coarse map, predict 3×3 sampling offsets
/// from `[up, skip]`, deformably convolve `up`, and add the skip.
#[derive(Debug, Clone)]
pub struct Fam {
    offset: Conv2d,
    weight: Tensor,
    bias: Tensor,
}

impl Fam {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> crate::Result<Self> {
        let offset = Conv2d::zeroed(store, &format!("{name}.offset"), 2 * d, 18, 3, 1)?;
        let dcn = Conv2d::new(store, &format!("{name}.dcn"), d, d, 3, 1, 1, true)?;
        Ok(Self::from_parts(offset, dcn.weight().clone(), dcn.bias().cloned().expect("bias requested")))
    }

    pub fn from_parts(offset: Conv2d, weight: Tensor, bias: Tensor) -> Self {
        Self { offset, weight, bias }
    }

    pub fn offsets(&self, up: &Tensor, skip: &Tensor) -> Result<Tensor> {
        self.offset.forward(&Tensor::cat(&[up, skip], 1)?)
    }

    pub fn forward(&self, coarse: &Tensor, skip: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = skip.dims4()?;
        let (_, cc, ch, cw) = coarse.dims4()?;
        if cc != c || 2 * ch != h || 2 * cw != w {
            candle_core::bail!("FAM expects a coarse map of half the skip's size with equal channels: coarse {:?}, skip {:?}", coarse.dims(), skip.dims())
        }
        let up = ops::resize_bilinear(coarse, h, w)?;
        let offset = self.offsets(&up, skip)?;
        let aligned = ops::deform_conv2d(&up, &offset, &self.weight, Some(&self.bias), 1)?;
        aligned + skip
    }
}

#[derive(Debug, Clone)]
struct Head {
    conv: Conv2d,
    norm: GroupNorm,
    out: Conv2d,
}

/// Pooling-block encoder–decoder segmentation network.
#[derive(Debug, Clone)]
pub struct PoolFormerSeg {
    embeds: Vec<PatchEmbedding>,
    stages: Vec<Vec<PoolingBlock>>,
    fsm: Vec<Fsm>,
    fam: Vec<Fam>,
    head: Head,
}

impl PoolFormerSeg {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> crate::Result<Self> {
        let mut embeds = Vec::new();
        let mut stages = Vec::new();
        let mut c_in = 3;
        for i in 0..4 {
            let c = cfg.embed_channels[i];
            embeds.push(PatchEmbedding::new(store, &format!("encoder.embed{i}"), cfg.patch_embed, c_in, c, i == 0)?);
            let blocks = (0..cfg.blocks_per_stage[i])
                .map(|j| PoolingBlock::new(store, &format!("encoder.stage{i}.block{j}"), c, cfg.mlp_expansion, cfg.layer_scale_init))
                .collect::<crate::Result<Vec<_>>>()?;
            stages.push(blocks);
            c_in = c;
        }
        let d = cfg.decoder_width;
        let fsm = (0..4)
            .map(|i| Fsm::new(store, &format!("decoder.fsm{i}"), cfg.embed_channels[i], d))
            .collect::<crate::Result<Vec<_>>>()?;
        let fam = (0..3)
            .map(|i| Fam::new(store, &format!("decoder.fam{i}"), d))
            .collect::<crate::Result<Vec<_>>>()?;
        let head = Head {
            conv: Conv2d::new(store, "head.conv", d, d, 3, 1, 1, false)?,
            norm: GroupNorm::per_channel(store, "head.norm", d)?,
            out: Conv2d::new(store, "head.out", d, 1, 1, 1, 0, true)?,
        };
        Ok(Self {
            embeds,
            stages,
            fsm,
            fam,
            head,
        })
    }

    pub fn forward_with_taps(&self, x: &Tensor) -> Result<(Tensor, StageFeatures)> {
        let (_, _, h, w) = x.dims4()?;
        let mut taps = Vec::with_capacity(4);
        let mut y = x.clone();
        for (embed, blocks) in self.embeds.iter().zip(&self.stages) {
            y = embed.forward(&y)?;
            for b in blocks {
                y = b.forward(&y)?;
            }
            taps.push(y.clone());
        }
        let mut p = self.fsm[3].forward(&taps[3])?;
        for i in (0..3).rev() {
            let skip = self.fsm[i].forward(&taps[i])?;
            p = self.fam[i].forward(&p, &skip)?;
        }
        let z = self.head.norm.forward(&self.head.conv.forward(&p)?)?.gelu_erf()?;
        let logits = ops::resize_bilinear(&self.head.out.forward(&z)?, h, w)?;
        Ok((logits, StageFeatures::from_tensors(taps)?))
    }
}
