use crate::error::{Error, Result};
use crate::image::Mask;

/// Pixel counts of a predicted map against a target map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Overlap {
    pub intersection: usize,
    pub predicted: usize,
    pub target: usize,
}

impl Overlap {
    /// Counts over two equal-length binary buffers (nonzero means positive).
    pub fn count(pred: &[u8], target: &[u8]) -> Result<Self> {
        if pred.len() != target.len() {
            return Err(Error::Shape(format!(
                "prediction has {} pixels, target has {}",
                pred.len(),
                target.len()
            )));
        }
        let mut o = Overlap::default();
        for (&p, &t) in pred.iter().zip(target) {
            let (p, t) = (p != 0, t != 0);
            o.predicted += p as usize;
            o.target += t as usize;
            o.intersection += (p && t) as usize;
        }
        Ok(o)
    }

    pub fn union(&self) -> usize {
        self.predicted + self.target - self.intersection
    }

    /// |P∩T| / |P∪T|, or 1 when both maps are empty.
    pub fn iou(&self) -> f64 {
        match self.union() {
            0 => 1.0,
            u => self.intersection as f64 / u as f64,
        }
    }

    /// Hard Dice, `2|P∩T| / (|P| + |T|)`, or 1 when both maps are empty.
    ///
    /// Evaluated as `2·IoU / (1 + IoU)`, which is the same quantity, so the
    /// two metrics stay consistent to the last bit.
    pub fn dice(&self) -> f64 {
        let iou = self.iou();
        2.0 * iou / (1.0 + iou)
    }
}

fn same_shape(p: &Mask, t: &Mask) -> Result<()> {
    if (p.height(), p.width()) != (t.height(), t.width()) {
        return Err(Error::Shape(format!(
            "maps differ: {}x{} vs {}x{}",
            p.height(),
            p.width(),
            t.height(),
            t.width()
        )));
    }
    Ok(())
}

pub fn binary_iou(pred: &Mask, target: &Mask) -> Result<f64> {
    same_shape(pred, target)?;
    Ok(Overlap::count(pred.data(), target.data())?.iou())
}

pub fn binary_dice(pred: &Mask, target: &Mask) -> Result<f64> {
    same_shape(pred, target)?;
    Ok(Overlap::count(pred.data(), target.data())?.dice())
}

/// Logit cut equivalent to `sigmoid(z) > threshold`. Threshold 0 maps to
/// `-inf` (everything positive) and 1 to `+inf` (nothing positive).
pub fn logit_threshold(threshold: f64) -> f64 {
    if threshold <= 0.0 {
        f64::NEG_INFINITY
    } else if threshold >= 1.0 {
        f64::INFINITY
    } else {
        (threshold / (1.0 - threshold)).ln()
    }
}

/// Binarises logits: positive where `sigmoid(z) > threshold`.
pub fn binarize(logits: &[f32], threshold: f64) -> Vec<u8> {
    let cut = logit_threshold(threshold);
    logits.iter().map(|&z| (z as f64 > cut) as u8).collect()
}
