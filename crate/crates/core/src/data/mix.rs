use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ImageSample, Provenance};
use crate::corruption::{corrupt, NoiseKind, NoiseSpec};
use crate::error::{Error, Result};

/// How the intensity of each noisy training copy is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum IntensitySampler {
    Fixed { intensity: f64 },
    Uniform { low: f64, high: f64 },
}

impl Default for IntensitySampler {
    fn default() -> Self {
        IntensitySampler::Uniform {
            low: 0.10,
            high: 0.40,
        }
    }
}

impl IntensitySampler {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            IntensitySampler::Fixed { intensity } => intensity,
            IntensitySampler::Uniform { low, high } if high > low => rng.random_range(low..=high),
            IntensitySampler::Uniform { low, .. } => low,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            IntensitySampler::Fixed { intensity } => (0.0..=1.0).contains(&intensity),
            IntensitySampler::Uniform { low, high } => {
                (0.0..=1.0).contains(&low) && (0.0..=1.0).contains(&high) && low <= high
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("intensity sampler {self:?} outside [0, 1]")))
        }
    }
}

/// Returns every clean sample followed by `⌊|clean| / 2⌋` corrupted copies.
///
/// The copies come from distinct clean samples (drawn without replacement)
/// and cycle through `kinds`, so per-kind counts differ by at most one.
/// Masks are never corrupted.
pub fn build_mixed_training_set<R: Rng + ?Sized>(
    clean: &[ImageSample],
    kinds: &[NoiseKind],
    intensity: IntensitySampler,
    rng: &mut R,
) -> Result<Vec<ImageSample>> {
    if kinds.is_empty() {
        return Err(Error::Precondition("at least one noise kind is required".into()));
    }
    if clean.len() < 2 * kinds.len() {
        return Err(Error::Precondition(format!(
            "{} clean samples cannot feed {} noise kinds (need at least {})",
            clean.len(),
            kinds.len(),
            2 * kinds.len()
        )));
    }
    intensity.validate()?;
    let n_noisy = clean.len() / 2;
    let picks = rand::seq::index::sample(rng, clean.len(), n_noisy).into_vec();
    let mut out = clean.to_vec();
    out.reserve(n_noisy);
    for (j, idx) in picks.into_iter().enumerate() {
        let kind = kinds[j % kinds.len()];
        let spec = NoiseSpec::new(kind, intensity.sample(rng), rng.random());
        let src = &clean[idx];
        out.push(ImageSample {
            id: format!("{}~{}", src.id, kind),
            image: corrupt(&src.image, &spec),
            mask: src.mask.clone(),
            provenance: Provenance::Noisy {
                kind,
                intensity: spec.intensity,
            },
        });
    }
    Ok(out)
}
