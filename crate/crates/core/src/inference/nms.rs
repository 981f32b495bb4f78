//! Greedy per-label non-maximum suppression.

use crate::dataset::Detection;
use crate::geometry::iou;

/// Keeps detections in descending score order (input index breaks ties),
/// dropping any whose IoU with a kept detection of the same label exceeds
/// `iou_threshold`. Unknown is its own label.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let suppressed = kept.iter().any(|&k| {
            dets[k].label == dets[i].label && iou(&dets[k].bbox, &dets[i].bbox) > iou_threshold
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| dets[i]).collect()
}
