//! Overlap metrics for binary masks.
//!
//! Masks are `f32` arrays thresholded at 0.5 (so both crisp `{0, 1}` masks
//! and raw predictions work).  Both metrics treat a pair of empty masks as a
//! perfect score: predicting "nothing" when nothing is there is correct.

use ndarray::Array2;

use crate::error::{Error, Result};

fn confusion(pred: &Array2<f32>, truth: &Array2<f32>) -> Result<(u64, u64, u64)> {
    if pred.dim() != truth.dim() {
        return Err(Error::ShapeMismatch {
            context: "mask metrics",
            expected: format!("{:?}", truth.dim()),
            actual: format!("{:?}", pred.dim()),
        });
    }
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for (&p, &t) in pred.iter().zip(truth.iter()) {
        match (p >= 0.5, t >= 0.5) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    Ok((tp, fp, fn_))
}

/// Dice similarity coefficient: `2 TP / (2 TP + FP + FN)`; 1.0 when both
/// masks are empty.
pub fn dsc(pred: &Array2<f32>, truth: &Array2<f32>) -> Result<f64> {
    let (tp, fp, fn_) = confusion(pred, truth)?;
    let denom = 2 * tp + fp + fn_;
    Ok(if denom == 0 { 1.0 } else { 2.0 * tp as f64 / denom as f64 })
}

/// Intersection over union: `TP / (TP + FP + FN)`; 1.0 when both are empty.
pub fn iou(pred: &Array2<f32>, truth: &Array2<f32>) -> Result<f64> {
    let (tp, fp, fn_) = confusion(pred, truth)?;
    let denom = tp + fp + fn_;
    Ok(if denom == 0 { 1.0 } else { tp as f64 / denom as f64 })
}
