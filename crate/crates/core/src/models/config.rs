use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// Lightweight pooling-block student.
    Pct,
    /// Heavyweight pooling-block teacher.
    PoolingCrack,
    /// U-Net decoder over a ResNet-18 encoder.
    UnetResnet18,
}

/// Pooling-block MLP shape: `"depthwise"` or a dense expansion ratio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MlpExpansion {
    /// Depthwise 3×3 expansion ×2, then a grouped 1×1 back to `C`.
    Depthwise,
    /// Dense 1×1 `C → r·C → C`.
    Dense(f64),
}

impl Serialize for MlpExpansion {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            MlpExpansion::Depthwise => s.serialize_str("depthwise"),
            MlpExpansion::Dense(r) => s.serialize_f64(*r),
        }
    }
}

impl<'de> Deserialize<'de> for MlpExpansion {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Ratio(f64),
            Name(String),
        }
        match Raw::deserialize(d)? {
            Raw::Ratio(r) => Ok(MlpExpansion::Dense(r)),
            Raw::Name(n) if n == "depthwise" => Ok(MlpExpansion::Depthwise),
            Raw::Name(n) => Err(serde::de::Error::custom(format!(
                "mlp_expansion must be a ratio or \"depthwise\", got {n:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchEmbed {
    /// Depthwise strided conv, pointwise projection, normalisation.
    DepthwiseSeparable,
    /// Dense strided conv, normalisation.
    Standard,
}

/// Hyper-parameters of one segmentation network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub embed_channels: [usize; 4],
    pub blocks_per_stage: [usize; 4],
    pub mlp_expansion: MlpExpansion,
    pub patch_embed: PatchEmbed,
    pub patch_strides: [usize; 4],
    pub decoder_width: usize,
    #[serde(default = "default_layer_scale")]
    pub layer_scale_init: f64,
}

fn default_layer_scale() -> f64 {
    1e-5
}

impl ModelConfig {
    pub fn pct() -> Self {
        Self {
            architecture: Architecture::Pct,
            embed_channels: [48, 96, 192, 384],
            blocks_per_stage: [2, 2, 2, 2],
            mlp_expansion: MlpExpansion::Depthwise,
            patch_embed: PatchEmbed::DepthwiseSeparable,
            patch_strides: [4, 2, 2, 2],
            decoder_width: 48,
            layer_scale_init: default_layer_scale(),
        }
    }

    pub fn pooling_crack() -> Self {
        Self {
            architecture: Architecture::PoolingCrack,
            embed_channels: [64, 128, 320, 512],
            blocks_per_stage: [4, 4, 12, 4],
            mlp_expansion: MlpExpansion::Dense(4.0),
            patch_embed: PatchEmbed::Standard,
            patch_strides: [4, 2, 2, 2],
            decoder_width: 512,
            layer_scale_init: default_layer_scale(),
        }
    }

    /// ResNet-18 stage widths and depths; decoder widths are derived from them.
    pub fn unet_resnet18() -> Self {
        Self {
            architecture: Architecture::UnetResnet18,
            embed_channels: [64, 128, 256, 512],
            blocks_per_stage: [2, 2, 2, 2],
            mlp_expansion: MlpExpansion::Dense(1.0),
            patch_embed: PatchEmbed::Standard,
            patch_strides: [4, 2, 2, 2],
            decoder_width: 16,
            layer_scale_init: default_layer_scale(),
        }
    }

    pub fn default_for(arch: Architecture) -> Self {
        match arch {
            Architecture::Pct => Self::pct(),
            Architecture::PoolingCrack => Self::pooling_crack(),
            Architecture::UnetResnet18 => Self::unet_resnet18(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.embed_channels.contains(&0) {
            return bad(format!("embed_channels {:?} must be positive", self.embed_channels));
        }
        if self.patch_strides != [4, 2, 2, 2] {
            return bad(format!("patch_strides must be [4, 2, 2, 2], got {:?}", self.patch_strides));
        }
        if self.decoder_width == 0 {
            return bad("decoder_width must be positive".into());
        }
        if let MlpExpansion::Dense(r) = self.mlp_expansion {
            if !(r >= 1.0) {
                return bad(format!("mlp_expansion {r} must be at least 1"));
            }
        }
        if !(self.layer_scale_init >= 0.0) {
            return bad(format!("layer_scale_init {} must be non-negative", self.layer_scale_init));
        }
        if self.architecture == Architecture::UnetResnet18 {
            if self.blocks_per_stage.contains(&0) {
                return bad("every ResNet stage needs at least one block".into());
            }
            if self.embed_channels[0] % 4 != 0 || self.embed_channels.iter().any(|c| c % 2 != 0) {
                return bad(format!("UNet widths {:?} must be even and stage 1 divisible by 4", self.embed_channels));
            }
        }
        Ok(())
    }

    /// Output channels of the four encoder stages.
    pub fn stage_channels(&self) -> [usize; 4] {
        self.embed_channels
    }

    /// Hex SHA-256 of the canonical JSON form; identifies the weight layout.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        let digest = Sha256::digest(&json);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
