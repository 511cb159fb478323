use crate::error::{Error, Result};
use crate::inside_outside::ObjectMask;

use super::scene::Keypoint;

pub const PCK_THRESHOLD: f64 = 0.1;

/// Per-sample IoU with predictions outside `region` treated as null.
/// `None` when both the clipped prediction and the ground truth are empty.
pub fn miou(pred: &ObjectMask, gt: &ObjectMask, region: &ObjectMask) -> Result<Option<f64>> {
    let clipped = pred.and(region)?;
    clipped.iou(gt)
}

/// Fraction of reference keypoints matched within `threshold_frac` of the
/// reference bounding-box diagonal. Missing predictions count as misses.
pub fn pck(pred: &[Keypoint], reference: &[Keypoint], threshold_frac: f64) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Parameter("pck needs at least one reference keypoint".into()));
    }
    if !(threshold_frac >= 0.0) {
        return Err(Error::Parameter(format!("pck threshold {threshold_frac}")));
    }
    let xs = reference.iter().map(|k| k.pos.0);
    let ys = reference.iter().map(|k| k.pos.1);
    let (x0, x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    let (y0, y1) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), y| (a.min(y), b.max(y)));
    let threshold = threshold_frac * (x1 - x0).hypot(y1 - y0);
    let hits = reference
        .iter()
        .filter(|r| {
            pred.iter()
                .find(|p| p.name == r.name)
                .is_some_and(|p| (p.pos.0 - r.pos.0).hypot(p.pos.1 - r.pos.1) <= threshold)
        })
        .count();
    Ok(hits as f64 / reference.len() as f64)
}

pub fn kw_miou(miou: f64, pck: f64) -> f64 {
    miou * pck
}
