//! Overlap and displacement-error metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::LossBreakdown;
use crate::sampling::Dvf;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub dice: f64,
    pub jaccard: f64,
}

/// Dice and Jaccard scores of two binary masks. Two empty masks score 1.
pub fn dice_jaccard(a: &Tensor, b: &Tensor) -> Result<OverlapReport> {
    a.ensure_same_shape(b, "masks")?;
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.values().iter().zip(b.values()) {
        for v in [x, y] {
            if v != 0.0 && v != 1.0 {
                return Err(Error::NonBinaryMask(v));
            }
        }
        let (x, y) = (x == 1.0, y == 1.0);
        na += x as usize;
        nb += y as usize;
        inter += (x && y) as usize;
    }
    if na + nb == 0 {
        return Ok(OverlapReport { dice: 1.0, jaccard: 1.0 });
    }
    let union = na + nb - inter;
    Ok(OverlapReport {
        dice: 2.0 * inter as f64 / (na + nb) as f64,
        jaccard: inter as f64 / union as f64,
    })
}

/// Mean and max per-pixel Euclidean distance between two fields.
pub fn endpoint_error(pred: &Dvf, gt: &Dvf) -> Result<(f64, f64)> {
    pred.tensor().ensure_same_shape(gt.tensor(), "displacement fields")?;
    let (mut sum, mut max) = (0.0, 0.0f64);
    for i in 0..pred.uy().len() {
        let dy = pred.uy()[i] - gt.uy()[i];
        let dx = pred.ux()[i] - gt.ux()[i];
        let e = (dy * dy + dx * dx).sqrt();
        sum += e;
        max = max.max(e);
    }
    Ok((sum / pred.uy().len() as f64, max))
}

/// Evaluation record for one registered pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub dice: f64,
    pub jaccard: f64,
    pub epe_mean: f64,
    pub epe_max: f64,
    pub loss_breakdown: LossBreakdown,
}

/// Binary mask of pixels at or above `level`.
pub fn threshold_mask(image: &Tensor, level: f64) -> Tensor {
    let mut m = image.clone();
    for v in m.values_mut() {
        *v = if *v >= level { 1.0 } else { 0.0 };
    }
    m
}
