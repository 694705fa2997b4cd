//! Dataset ingestion, augmentation and the clean/noisy training mix.

mod augment;
mod mix;
mod synth;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corruption::NoiseKind;
use crate::error::{Error, Result};
use crate::image::{Image, Mask};

pub use augment::{augment, augment_with, AugmentParams, JITTER_RANGE};
pub use mix::{build_mixed_training_set, IntensitySampler};
pub use synth::{synthesize_toy_dataset, MAX_POSITIVE_FRACTION};

/// File name used for manifests written next to a dataset.
pub const MANIFEST_FILE: &str = "manifest.json";

/// Where a sample's pixels came from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Provenance {
    Clean,
    Noisy { kind: NoiseKind, intensity: f64 },
}

/// One image/mask pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pub image: Image,
    pub mask: Mask,
    pub provenance: Provenance,
}

impl ImageSample {
    pub fn new(id: impl Into<String>, image: Image, mask: Mask, provenance: Provenance) -> Result<Self> {
        let id = id.into();
        if image.height() != mask.height() || image.width() != mask.width() {
            return Err(Error::Shape(format!(
                "sample {id}: image is {}x{} but mask is {}x{}",
                image.height(),
                image.width(),
                mask.height(),
                mask.width()
            )));
        }
        if let Provenance::Noisy { intensity, .. } = provenance {
            if !(0.0..=1.0).contains(&intensity) {
                return Err(Error::Precondition(format!(
                    "sample {id}: noise intensity {intensity} outside [0, 1]"
                )));
            }
        }
        Ok(Self {
            id,
            image,
            mask,
            provenance,
        })
    }

    pub fn clean(id: impl Into<String>, image: Image, mask: Mask) -> Result<Self> {
        Self::new(id, image, mask, Provenance::Clean)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "eval" => Ok(Split::Eval),
            other => Err(Error::Config(format!("unknown split {other:?} (expected train or eval)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Path of the image, relative to the manifest root.
    pub image: PathBuf,
    /// Path of the single-channel mask, relative to the manifest root.
    pub mask: PathBuf,
    pub split: Split,
}

/// Index of a dataset directory (`<root>/images/<id>.png`, `<root>/masks/<id>.png`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Reads a manifest file. A relative `root` is resolved against the
    /// directory holding the manifest. `path` may also name a dataset
    /// directory containing `manifest.json`.
    pub fn read(path: &Path) -> Result<Self> {
        let file = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let text = std::fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let mut manifest: DatasetManifest = serde_json::from_str(&text)?;
        if manifest.root.is_relative() {
            let base = file.parent().unwrap_or_else(|| Path::new("."));
            manifest.root = base.join(&manifest.root);
        }
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = std::collections::HashSet::new();
        for e in &self.entries {
            if !ids.insert(e.id.as_str()) {
                return Err(Error::Config(format!("duplicate manifest id {:?}", e.id)));
            }
        }
        Ok(())
    }

    pub fn count(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == split).count()
    }
}

/// Loads every entry tagged `split`, in manifest order.
pub fn load_dataset(manifest: &DatasetManifest, split: Split) -> Result<Vec<ImageSample>> {
    manifest
        .entries
        .iter()
        .filter(|e| e.split == split)
        .map(|e| {
            let image_path = manifest.root.join(&e.image);
            let mask_path = manifest.root.join(&e.mask);
            for p in [&image_path, &mask_path] {
                if !p.is_file() {
                    return Err(Error::io(
                        p.as_path(),
                        std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
                    ));
                }
            }
            let image = Image::load(&image_path)?;
            let mask = Mask::load(&mask_path)?;
            ImageSample::clean(e.id.clone(), image, mask)
        })
        .collect()
}
