//! U-Net with a ResNet-18 encoder.
//!
//! Normalisation is per-channel group norm throughout; the stem max-pool is
//! 2×2 with stride 2.

use candle_core::{Result, Tensor};

use super::config::ModelConfig;
use super::StageFeatures;
use crate::nn::layers::{max_pool2, upsample_nearest2, Conv2d, GroupNorm};
use crate::nn::ParamStore;

#[derive(Debug, Clone)]
struct ConvNorm {
    conv: Conv2d,
    norm: GroupNorm,
}

impl ConvNorm {
    #[allow(clippy::too_many_arguments)]
    fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize) -> crate::Result<Self> {
        Ok(Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), c_in, c_out, k, stride, pad, false)?,
            norm: GroupNorm::per_channel(store, &format!("{name}.norm"), c_out)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.norm.forward(&self.conv.forward(x)?)
    }
}

#[derive(Debug, Clone)]
struct BasicBlock {
    a: ConvNorm,
    b: ConvNorm,
    shortcut: Option<ConvNorm>,
}

impl BasicBlock {
    fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, stride: usize) -> crate::Result<Self> {
        let shortcut = if stride != 1 || c_in != c_out {
            Some(ConvNorm::new(store, &format!("{name}.down"), c_in, c_out, 1, stride, 0)?)
        } else {
            None
        };
        Ok(Self {
            a: ConvNorm::new(store, &format!("{name}.a"), c_in, c_out, 3, stride, 1)?,
            b: ConvNorm::new(store, &format!("{name}.b"), c_out, c_out, 3, 1, 1)?,
            shortcut,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.b.forward(&self.a.forward(x)?.relu()?)?;
        let s = match &self.shortcut {
            Some(sc) => sc.forward(x)?,
            None => x.clone(),
        };
        (y + s)?.relu()
    }
}

#[derive(Debug, Clone)]
struct DecoderBlock {
    a: ConvNorm,
    b: ConvNorm,
}

impl DecoderBlock {
    fn forward(&self, x: &Tensor, skip: Option<&Tensor>) -> Result<Tensor> {
        let up = upsample_nearest2(x)?;
        let x = match skip {
            Some(s) => Tensor::cat(&[&up, s], 1)?,
            None => up,
        };
        self.b.forward(&self.a.forward(&x)?.relu()?)?.relu()
    }
}

#[derive(Debug, Clone)]
pub struct UnetResNet18 {
    stem: ConvNorm,
    layers: Vec<Vec<BasicBlock>>,
    decoder: Vec<DecoderBlock>,
    head: Conv2d,
}

impl UnetResNet18 {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> crate::Result<Self> {
        let ch = cfg.embed_channels;
        let stem = ConvNorm::new(store, "encoder.stem", 3, ch[0], 7, 2, 3)?;
        let mut layers = Vec::new();
        let mut c_in = ch[0];
        for i in 0..4 {
            let stride = if i == 0 { 1 } else { 2 };
            let blocks = (0..cfg.blocks_per_stage[i])
                .map(|j| {
                    let (cin, s) = if j == 0 { (c_in, stride) } else { (ch[i], 1) };
                    BasicBlock::new(store, &format!("encoder.layer{}.{j}", i + 1), cin, ch[i], s)
                })
                .collect::<crate::Result<Vec<_>>>()?;
            layers.push(blocks);
            c_in = ch[i];
        }
        // skips: layer3, layer2, layer1, stem, none
        let widths = [ch[3] / 2, ch[2] / 2, ch[1] / 2, ch[0] / 2, ch[0] / 4];
        let skips = [ch[2], ch[1], ch[0], ch[0], 0];
        let mut decoder = Vec::new();
        let mut c_in = ch[3];
        for (i, (&w, &s)) in widths.iter().zip(&skips).enumerate() {
            let name = format!("decoder.block{i}");
            decoder.push(DecoderBlock {
                a: ConvNorm::new(store, &format!("{name}.a"), c_in + s, w, 3, 1, 1)?,
                b: ConvNorm::new(store, &format!("{name}.b"), w, w, 3, 1, 1)?,
            });
            c_in = w;
        }
        let head = Conv2d::new(store, "head", c_in, 1, 3, 1, 1, true)?;
        Ok(Self {
            stem,
            layers,
            decoder,
            head,
        })
    }

    pub fn forward_with_taps(&self, x: &Tensor) -> Result<(Tensor, StageFeatures)> {
        let s0 = self.stem.forward(x)?.relu()?;
        let mut y = max_pool2(&s0)?;
        let mut taps = Vec::with_capacity(4);
        for blocks in &self.layers {
            for b in blocks {
                y = b.forward(&y)?;
            }
            taps.push(y.clone());
        }
        let skips = [Some(&taps[2]), Some(&taps[1]), Some(&taps[0]), Some(&s0), None];
        let mut d = taps[3].clone();
        for (block, skip) in self.decoder.iter().zip(skips) {
            d = block.forward(&d, skip)?;
        }
        let logits = self.head.forward(&d)?;
        Ok((logits, StageFeatures::from_tensors(taps)?))
    }
}
