//! Mask IoU, boundary IoU and the prompt-batch stability score, plus the
//! per-condition report the evaluation harness emits.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;

/// IoU over pixels. Two empty masks agree perfectly (1.0); empty vs
/// nonempty is 0.0.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.check_dims(b, "mask_iou")?;
    let mut inter = 0usize;
    let mut union = 0usize;
    for (x, y) in a.bits.iter().zip(&b.bits) {
        if *x && *y {
            inter += 1;
        }
        if *x || *y {
            union += 1;
        }
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Default band width: 2% of the image diagonal, at least one pixel.
pub fn default_boundary_width(width: usize, height: usize) -> usize {
    let diag = ((width * width + height * height) as f64).sqrt();
    ((0.02 * diag).round() as usize).max(1)
}

/// IoU restricted to the boundary bands of each mask: pixels of X within
/// Chebyshev distance `d` of X's contour.
pub fn boundary_iou(pred: &BinaryMask, gt: &BinaryMask, d: usize) -> Result<f64> {
    pred.check_dims(gt, "boundary_iou")?;
    if d < 1 {
        return Err(Error::Config("boundary_iou requires d >= 1".into()));
    }
    let pd = pred.intersect(&pred.contour().dilate_chebyshev(d - 1));
    let gd = gt.intersect(&gt.contour().dilate_chebyshev(d - 1));
    mask_iou(&pd, &gd)
}

/// Mean IoU of each mask against the union of all masks in the batch.
/// No ground truth consulted. An all-empty batch scores 1.0.
pub fn stability_score(masks: &[BinaryMask]) -> Result<f64> {
    let first = masks
        .first()
        .ok_or_else(|| Error::Contract("stability_score on empty mask set".into()))?;
    let mut union = first.clone();
    for m in &masks[1..] {
        first.check_dims(m, "stability_score")?;
        union = union.union(m);
    }
    let mut acc = 0.0;
    for m in masks {
        acc += mask_iou(m, &union)?;
    }
    Ok(acc / masks.len() as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize, Default, PartialEq)]
pub struct ConditionScores {
    pub miou: f64,
    pub mbiou: f64,
    pub msf: f64,
    /// mean routing weight on the deformable path, when an adapter ran
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha1_mean: Option<f64>,
    pub n: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct StabilityReport {
    pub per_condition: BTreeMap<String, ConditionScores>,
    pub config_hash: String,
    pub seed: u64,
    /// images whose prompt generation was infeasible, excluded from means
    pub skipped_images: usize,
    /// adapter / base trainable parameter counts, when a model was involved
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adapter_params: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base_params: Option<usize>,
}

/// Per-image scores for one condition.
#[derive(Debug, Clone)]
pub struct ImageScores {
    pub condition: String,
    pub miou: f64,
    pub mbiou: f64,
    pub msf: f64,
    pub alpha1_mean: Option<f64>,
}

/// Unweighted mean over images per condition.
pub fn aggregate_report(results: &[ImageScores], config_hash: &str, seed: u64) -> StabilityReport {
    let mut grouped: BTreeMap<String, Vec<&ImageScores>> = BTreeMap::new();
    for r in results {
        grouped.entry(r.condition.clone()).or_default().push(r);
    }
    let mut per_condition = BTreeMap::new();
    for (cond, rows) in grouped {
        let n = rows.len();
        let mean = |f: &dyn Fn(&ImageScores) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n as f64;
        let alphas: Vec<f64> = rows.iter().filter_map(|r| r.alpha1_mean).collect();
        per_condition.insert(
            cond,
            ConditionScores {
                miou: mean(&|r| r.miou),
                mbiou: mean(&|r| r.mbiou),
                msf: mean(&|r| r.msf),
                alpha1_mean: if alphas.is_empty() {
                    None
                } else {
                    Some(alphas.iter().sum::<f64>() / alphas.len() as f64)
                },
                n,
            },
        );
    }
    StabilityReport {
        per_condition,
        config_hash: config_hash.to_string(),
        seed,
        skipped_images: 0,
        adapter_params: None,
        base_params: None,
    }
}
