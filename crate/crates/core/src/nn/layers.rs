use candle_core::{Result, Tensor};

use super::flops::{self, LayerKind};
use super::ops;
use super::params::{Init, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ConvKind {
    Dense,
    Depthwise,
}

/// Square-kernel 2-D convolution, either dense or depthwise.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    pad: usize,
    kind: ConvKind,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> crate::Result<Self> {
        let fan_in = c_in * k * k;
        let weight = store.param(&format!("{name}.weight"), &[c_out, c_in, k, k], Init::FanIn(fan_in))?;
        let bias = if bias {
            Some(store.param(&format!("{name}.bias"), &[c_out], Init::FanIn(fan_in))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            pad,
            kind: ConvKind::Dense,
        })
    }

    /// Depthwise convolution producing `multiplier` maps per input channel.
    #[allow(clippy::too_many_arguments)]
    pub fn depthwise(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        multiplier: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> crate::Result<Self> {
        let c_out = channels * multiplier;
        let weight = store.param(&format!("{name}.weight"), &[c_out, 1, k, k], Init::FanIn(k * k))?;
        let bias = if bias {
            Some(store.param(&format!("{name}.bias"), &[c_out], Init::FanIn(k * k))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            pad,
            kind: ConvKind::Depthwise,
        })
    }

    /// Dense convolution over caller-provided tensors.
    pub fn from_parts(weight: Tensor, bias: Option<Tensor>, stride: usize, pad: usize) -> Self {
        Self {
            weight,
            bias,
            stride,
            pad,
            kind: ConvKind::Dense,
        }
    }

    /// Replaces weight and bias with zeros-initialised parameters.
    pub fn zeroed(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, k: usize, pad: usize) -> crate::Result<Self> {
        let weight = store.param(&format!("{name}.weight"), &[c_out, c_in, k, k], Init::Const(0.0))?;
        let bias = store.param(&format!("{name}.bias"), &[c_out], Init::Const(0.0))?;
        Ok(Self::from_parts(weight, Some(bias), 1, pad))
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self.kind {
            ConvKind::Dense => ops::conv2d(x, &self.weight, self.bias.as_ref(), self.stride, self.pad),
            ConvKind::Depthwise => ops::depthwise_conv2d(x, &self.weight, self.bias.as_ref(), self.stride, self.pad),
        }
    }
}

/// 1×1 convolution with `groups = C_out`, each output channel reading
/// `C_in / C_out` adjacent inputs.
#[derive(Debug, Clone)]
pub struct GroupedPointwise {
    weight: Tensor,
    bias: Tensor,
}

impl GroupedPointwise {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize) -> crate::Result<Self> {
        let group = c_in / c_out;
        Ok(Self {
            weight: store.param(&format!("{name}.weight"), &[c_out, group, 1, 1], Init::FanIn(group))?,
            bias: store.param(&format!("{name}.bias"), &[c_out], Init::FanIn(group))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::grouped_pointwise(x, &self.weight, Some(&self.bias))
    }
}

/// Group normalisation with learnable per-channel affine terms.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    weight: Tensor,
    bias: Tensor,
    groups: usize,
    eps: f64,
}

impl GroupNorm {
    /// One group per channel.
    pub fn per_channel(store: &mut ParamStore, name: &str, channels: usize) -> crate::Result<Self> {
        Ok(Self {
            weight: store.param(&format!("{name}.weight"), &[channels], Init::Const(1.0))?,
            bias: store.param(&format!("{name}.bias"), &[channels], Init::Const(0.0))?,
            groups: channels,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let g = x.reshape((n, self.groups, (c / self.groups) * h * w))?;
        let mean = g.mean_keepdim(2)?;
        let centred = g.broadcast_sub(&mean)?;
        let var = centred.sqr()?.mean_keepdim(2)?;
        let normed = centred.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        normed
            .reshape((n, c, h, w))?
            .broadcast_mul(&self.weight.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.bias.reshape((1, c, 1, 1))?)
    }
}

/// Learnable per-channel multiplier.
#[derive(Debug, Clone)]
pub struct LayerScale {
    scale: Tensor,
}

impl LayerScale {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, init: f64) -> crate::Result<Self> {
        Ok(Self {
            scale: store.param(name, &[channels], Init::Const(init))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.scale.dim(0)?;
        x.broadcast_mul(&self.scale.reshape((1, c, 1, 1))?)
    }
}

/// 2×2, stride-2 max pooling.
pub fn max_pool2(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    flops::record(LayerKind::MaxPool, x.dims(), &[n, c, h / 2, w / 2], 0, (n * c * (h / 2) * (w / 2) * 4) as u64);
    x.max_pool2d(2)
}

/// Nearest-neighbour ×2 upsampling.
pub fn upsample_nearest2(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    x.reshape((n, c, h, 1, w, 1))?
        .broadcast_as((n, c, h, 2, w, 2))?
        .contiguous()?
        .reshape((n, c, 2 * h, 2 * w))
}
