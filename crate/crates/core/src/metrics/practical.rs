//! Practical-mode harvesting: unknown detections that overlap a next-task
//! object are annotated with that object's class and become the only
//! training data for the new classes.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::dataset::{Annotation, ClassId, ImageRecord, Label};
use crate::detector::ModelParams;
use crate::error::Result;
use crate::geometry::iou;
use crate::inference::{DetectionsByImage, GmmStore, InferenceConfig};
use crate::par::Exec;

#[derive(Debug, Clone, PartialEq)]
pub struct Harvest {
    /// Images with at least one harvested region; annotations are the
    /// harvested regions only, boxes taken from the detections.
    pub dataset: Vec<ImageRecord>,
    pub unknown_detections: usize,
    pub harvested: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HarvestStats {
    pub images: usize,
    pub unknown_detections: usize,
    pub harvested: usize,
}

impl Harvest {
    pub fn stats(&self) -> HarvestStats {
        HarvestStats {
            images: self.dataset.len(),
            unknown_detections: self.unknown_detections,
            harvested: self.harvested,
        }
    }
}

/// Annotates each unknown-labelled detection with the class of the
/// highest-IoU next-task gt it overlaps at IoU ≥ `iou_thr`.
pub fn harvest_from_detections(
    images: &[ImageRecord],
    dets: &DetectionsByImage,
    next_classes: &BTreeSet<ClassId>,
    iou_thr: f64,
) -> Harvest {
    let mut dataset = Vec::new();
    let (mut unknown_detections, mut harvested) = (0, 0);
    for rec in images {
        let mut annotations = Vec::new();
        for d in dets.get(&rec.image_id).map(Vec::as_slice).unwrap_or(&[]) {
            if d.label != Label::Unknown {
                continue;
            }
            unknown_detections += 1;
            let mut best: Option<(ClassId, f64)> = None;
            for a in rec
                .annotations
                .iter()
                .filter(|a| next_classes.contains(&a.class_id))
            {
                let v = iou(&d.bbox, &a.bbox);
                if v >= iou_thr && best.is_none_or(|(_, b)| v > b) {
                    best = Some((a.class_id, v));
                }
            }
            if let Some((class_id, _)) = best {
                annotations.push(Annotation {
                    class_id,
                    bbox: d.bbox,
                });
            }
        }
        if !annotations.is_empty() {
            harvested += annotations.len();
            dataset.push(ImageRecord {
                annotations,
                ..rec.clone()
            });
        }
    }
    Harvest {
        dataset,
        unknown_detections,
        harvested,
    }
}

/// Runs the task-`t` model over the next task's images and harvests `D^{t+1}`.
pub fn practical_mode_step(
    params: &ModelParams,
    gmms: Option<&GmmStore>,
    cfg: &InferenceConfig,
    next_task_images: &[ImageRecord],
    next_classes: &BTreeSet<ClassId>,
    iou_thr: f64,
    exec: Exec,
) -> Result<Harvest> {
    let evidence =
        crate::inference::pipeline::evidence_batch(next_task_images, params, cfg.proposals, exec)?;
    let dets: DetectionsByImage = next_task_images
        .iter()
        .zip(&evidence)
        .map(|(r, e)| (r.image_id.clone(), e.detect(gmms, cfg)))
        .collect();
    let harvest = harvest_from_detections(next_task_images, &dets, next_classes, iou_thr);
    if harvest.harvested == 0 {
        log::warn!("practical mode harvested no regions; the next task trains on exemplars only");
    }
    Ok(harvest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Detection, Provenance};
    use crate::geometry::BoundingBox;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2).unwrap()
    }

    fn rec(id: &str, anns: &[(u32, BoundingBox)]) -> ImageRecord {
        ImageRecord {
            image_id: id.into(),
            width: 64,
            height: 64,
            file_name: None,
            annotations: anns
                .iter()
                .map(|&(c, b)| Annotation {
                    class_id: ClassId(c),
                    bbox: b,
                })
                .collect(),
            raster: None,
        }
    }

    fn d(label: Label, b: BoundingBox) -> Detection {
        Detection {
            label,
            score: 0.8,
            bbox: b,
            provenance: Provenance::Objectness,
        }
    }

    #[test]
    fn harvests_only_overlapping_unknowns() {
        let g = bx(0.0, 0.0, 10.0, 10.0);
        let old = bx(30.0, 30.0, 40.0, 40.0);
        let images = vec![rec("a", &[(4, g), (1, old)])];
        let hit = bx(0.0, 0.0, 10.0, 7.0); // IoU 0.7
        let mut dets = DetectionsByImage::new();
        dets.insert(
            "a".into(),
            vec![
                d(Label::Unknown, hit),
                d(Label::Unknown, old),
                d(Label::Known(ClassId(1)), g),
                d(Label::Unknown, bx(50.0, 50.0, 60.0, 60.0)),
            ],
        );
        let next: BTreeSet<ClassId> = [ClassId(4)].into_iter().collect();
        let h = harvest_from_detections(&images, &dets, &next, 0.5);
        assert_eq!(h.unknown_detections, 3);
        assert_eq!(h.harvested, 1);
        assert_eq!(
            h.dataset[0].annotations,
            vec![Annotation {
                class_id: ClassId(4),
                bbox: hit
            }]
        );
    }

    #[test]
    fn empty_harvest() {
        let images = vec![rec("a", &[(4, bx(0.0, 0.0, 10.0, 10.0))])];
        let next: BTreeSet<ClassId> = [ClassId(4)].into_iter().collect();
        let h = harvest_from_detections(&images, &DetectionsByImage::new(), &next, 0.5);
        assert!(h.dataset.is_empty());
        assert_eq!((h.unknown_detections, h.harvested), (0, 0));
    }
}
