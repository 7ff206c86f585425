//! Attention-guided patch masking that turns positive image-text pairs into
//! synthetic non-entailment examples.

use serde::{Deserialize, Serialize};

use crate::diffcore::ParamSet;
use crate::encoders::{encode_image, AttentionProfile, EncoderConfig, PatchGrid};
use crate::entailment::{EntailmentExample, TaskForm};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    /// Fraction of patches to mask, in `(0, 1)`.
    pub ratio: f64,
    /// Cap on masked images per batch.
    pub max_images_per_batch: usize,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self {
            ratio: 0.4,
            max_images_per_batch: 4,
        }
    }
}

impl MaskSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return Err(Error::Config(format!("mask ratio {} outside (0, 1)", self.ratio)));
        }
        Ok(())
    }
}

/// `max(1, floor(ratio * patch_count))`.
pub fn mask_count(ratio: f64, patch_count: usize) -> usize {
    ((ratio * patch_count as f64).floor() as usize).max(1)
}

/// Ids of the highest-attention patches; ties go to the lower patch index.
pub fn top_attention_patches(attn: &AttentionProfile, ratio: f64) -> Result<Vec<usize>> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("mask ratio {ratio} outside (0, 1)")));
    }
    let scores = attn.scores();
    let k = mask_count(ratio, scores.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(order)
}

/// Zeroes the listed patches; every other pixel is left untouched.
pub fn mask_image(grid: &PatchGrid, ids: &[usize]) -> Result<PatchGrid> {
    grid.with_patches_zeroed(ids)
}

/// Appends one masked, label-flipped copy for each of the first
/// `max_images_per_batch` positive image-text examples.
///
/// Patch saliency comes from the image encoder under the current `params`.
pub fn augment_batch(
    batch: &[EntailmentExample],
    spec: &MaskSpec,
    cfg: &EncoderConfig,
    params: &ParamSet,
) -> Result<Vec<EntailmentExample>> {
    spec.validate()?;
    let mut out = batch.to_vec();
    let chosen = batch
        .iter()
        .filter(|ex| ex.task_form == TaskForm::ImageText && ex.label == 1)
        .take(spec.max_images_per_batch);
    for ex in chosen {
        let image = ex.premise_image.as_ref().expect("validated image-text example");
        let (_, _, attn) = encode_image(cfg, image, params)?;
        let ids = top_attention_patches(&attn, spec.ratio)?;
        let mut neg = ex.clone();
        neg.premise_image = Some(mask_image(image, &ids)?);
        neg.label = 0;
        neg.premise_image_id = ex.premise_image_id.as_ref().map(|id| format!("{id}#masked"));
        out.push(neg);
    }
    Ok(out)
}
