//! Open-world evaluation: VOC-2010 AP, U-Recall, A-OSE, Wilderness Impact,
//! F1ⁱ and unknown precision.
//!
//! Matching is greedy and one-to-one: detections are visited in descending
//! score order (input order breaks ties) and each takes the highest-IoU
//! unmatched gt of its label with IoU ≥ the threshold (lowest gt index breaks
//! ties). Known-labelled detections match known-class gts of their own class;
//! unknown-labelled detections match the unknown pool only.

pub mod practical;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::dataset::{ClassId, ClassRegistry, Detection, ImageRecord, Label};
use crate::geometry::{iou, BoundingBox};
use crate::inference::DetectionsByImage;

pub use practical::{harvest_from_detections, practical_mode_step, Harvest};

/// Version tag of the counting rules, recorded in every report.
pub const RULES_VERSION: &str = "greedy-1to1/voc2010-all-points/aose-fp-on-unknown/wi-pooled-v1";

#[derive(Debug, Clone, PartialEq)]
pub struct ImageFrame {
    pub known: Vec<(ClassId, BoundingBox)>,
    pub unknown: Vec<BoundingBox>,
    pub detections: Vec<Detection>,
}

/// Ground truth split into known-class boxes and the unknown pool, plus
/// detections, per image.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalFrame {
    pub images: BTreeMap<String, ImageFrame>,
    pub known_classes: Vec<ClassId>,
    pub iou_threshold: f64,
}

impl EvalFrame {
    /// Known gts are classes in `K^t`; the unknown pool is `U^t`. Classes
    /// outside the schedule are not scoreable and are dropped.
    pub fn build(
        records: &[ImageRecord],
        dets: &DetectionsByImage,
        registry: &ClassRegistry,
        iou_threshold: f64,
    ) -> Self {
        let known: BTreeSet<ClassId> = registry.known().into_iter().collect();
        let unknown: BTreeSet<ClassId> = registry.unknown().into_iter().collect();
        let images = records
            .iter()
            .map(|r| {
                let frame = ImageFrame {
                    known: r
                        .annotations
                        .iter()
                        .filter(|a| known.contains(&a.class_id))
                        .map(|a| (a.class_id, a.bbox))
                        .collect(),
                    unknown: r
                        .annotations
                        .iter()
                        .filter(|a| unknown.contains(&a.class_id))
                        .map(|a| a.bbox)
                        .collect(),
                    detections: dets.get(&r.image_id).cloned().unwrap_or_default(),
                };
                (r.image_id.clone(), frame)
            })
            .collect();
        Self {
            images,
            known_classes: registry.known(),
            iou_threshold,
        }
    }
}

/// Per-detection match (index into `gts`) and per-gt matched flags.
pub fn match_detections(
    dets: &[BoundingBox],
    scores: &[f64],
    gts: &[BoundingBox],
    iou_thr: f64,
) -> (Vec<Option<usize>>, Vec<bool>) {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut matched = vec![false; gts.len()];
    let mut out = vec![None; dets.len()];
    for i in order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if matched[g] {
                continue;
            }
            let v = iou(&dets[i], gt);
            if v >= iou_thr && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            matched[g] = true;
            out[i] = Some(g);
        }
    }
    (out, matched)
}

/// VOC-2010 all-points AP from `(score, is_tp)` pairs; `None` without gts.
pub fn average_precision_voc2010(outcomes: &[(f64, bool)], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..outcomes.len()).collect();
    order.sort_by(|&a, &b| outcomes[b].0.total_cmp(&outcomes[a].0).then(a.cmp(&b)));
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut mrec = vec![0.0];
    let mut mpre = vec![0.0];
    for i in order {
        if outcomes[i].1 {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        mrec.push(tp / num_gt as f64);
        mpre.push(tp / (tp + fp));
    }
    mrec.push(1.0);
    mpre.push(0.0);
    for i in (0..mpre.len() - 1).rev() {
        mpre[i] = mpre[i].max(mpre[i + 1]);
    }
    Some(
        (1..mrec.len())
            .filter(|&i| mrec[i] != mrec[i - 1])
            .map(|i| (mrec[i] - mrec[i - 1]) * mpre[i])
            .sum(),
    )
}

/// Known-class matching outcome of each detection of an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum KnownOutcome {
    Tp,
    Fp,
    NotKnown,
}

fn known_outcomes(img: &ImageFrame, thr: f64) -> Vec<KnownOutcome> {
    let mut out = vec![KnownOutcome::NotKnown; img.detections.len()];
    let classes: BTreeSet<ClassId> = img
        .detections
        .iter()
        .filter_map(|d| d.label.known())
        .collect();
    for c in classes {
        let idx: Vec<usize> = (0..img.detections.len())
            .filter(|&i| img.detections[i].label == Label::Known(c))
            .collect();
        let boxes: Vec<BoundingBox> = idx.iter().map(|&i| img.detections[i].bbox).collect();
        let scores: Vec<f64> = idx.iter().map(|&i| img.detections[i].score).collect();
        let gts: Vec<BoundingBox> = img.known.iter().filter(|g| g.0 == c).map(|g| g.1).collect();
        let (m, _) = match_detections(&boxes, &scores, &gts, thr);
        for (j, &i) in idx.iter().enumerate() {
            out[i] = if m[j].is_some() {
                KnownOutcome::Tp
            } else {
                KnownOutcome::Fp
            };
        }
    }
    out
}

fn unknown_matches(img: &ImageFrame, thr: f64) -> (Vec<(f64, bool)>, usize) {
    let idx: Vec<usize> = (0..img.detections.len())
        .filter(|&i| img.detections[i].label == Label::Unknown)
        .collect();
    let boxes: Vec<BoundingBox> = idx.iter().map(|&i| img.detections[i].bbox).collect();
    let scores: Vec<f64> = idx.iter().map(|&i| img.detections[i].score).collect();
    let (m, matched) = match_detections(&boxes, &scores, &img.unknown, thr);
    let outcomes = scores
        .iter()
        .zip(&m)
        .map(|(&s, m)| (s, m.is_some()))
        .collect();
    (outcomes, matched.iter().filter(|&&b| b).count())
}

fn overlaps_unknown(img: &ImageFrame, d: &Detection, thr: f64) -> bool {
    img.unknown.iter().any(|u| iou(&d.bbox, u) >= thr)
}

/// AP per known class; `None` for classes without gt instances.
pub fn per_class_ap(frame: &EvalFrame) -> BTreeMap<ClassId, Option<f64>> {
    let mut outcomes: BTreeMap<ClassId, Vec<(f64, bool)>> = BTreeMap::new();
    let mut num_gt: BTreeMap<ClassId, usize> = BTreeMap::new();
    for img in frame.images.values() {
        for (c, _) in &img.known {
            *num_gt.entry(*c).or_default() += 1;
        }
        for (d, o) in img
            .detections
            .iter()
            .zip(known_outcomes(img, frame.iou_threshold))
        {
            if let Label::Known(c) = d.label {
                outcomes
                    .entry(c)
                    .or_default()
                    .push((d.score, o == KnownOutcome::Tp));
            }
        }
    }
    frame
        .known_classes
        .iter()
        .map(|c| {
            let o = outcomes.get(c).map(Vec::as_slice).unwrap_or(&[]);
            (
                *c,
                average_precision_voc2010(o, num_gt.get(c).copied().unwrap_or(0)),
            )
        })
        .collect()
}

/// Mean of the defined APs over `classes`; `None` when none is defined.
pub fn mean_ap(aps: &BTreeMap<ClassId, Option<f64>>, classes: &[ClassId]) -> Option<f64> {
    let v: Vec<f64> = classes
        .iter()
        .filter_map(|c| aps.get(c).copied().flatten())
        .collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Fraction of unknown-pool boxes matched by unknown-labelled detections.
pub fn u_recall(frame: &EvalFrame) -> Option<f64> {
    let pool: usize = frame.images.values().map(|i| i.unknown.len()).sum();
    if pool == 0 {
        return None;
    }
    let hit: usize = frame
        .images
        .values()
        .map(|img| unknown_matches(img, frame.iou_threshold).1)
        .sum();
    Some(hit as f64 / pool as f64)
}

/// Known-labelled detections that are not known-class TPs and overlap an
/// unknown-pool box at IoU ≥ the threshold.
pub fn a_ose(frame: &EvalFrame) -> usize {
    frame
        .images
        .values()
        .map(|img| {
            img.detections
                .iter()
                .zip(known_outcomes(img, frame.iou_threshold))
                .filter(|(d, o)| {
                    *o == KnownOutcome::Fp && overlaps_unknown(img, d, frame.iou_threshold)
                })
                .count()
        })
        .sum()
}

/// `P_closed / P_open − 1` at the first rank where pooled known-class recall
/// reaches `recall_level`. `P_closed` drops open-set errors from the
/// false positives. `None` when the level is unreachable.
pub fn wilderness_impact(frame: &EvalFrame, recall_level: f64) -> Option<f64> {
    let mut ranked: Vec<(f64, KnownOutcome, bool)> = Vec::new();
    let mut num_gt = 0usize;
    for img in frame.images.values() {
        num_gt += img.known.len();
        for (d, o) in img
            .detections
            .iter()
            .zip(known_outcomes(img, frame.iou_threshold))
        {
            if o != KnownOutcome::NotKnown {
                let ose = o == KnownOutcome::Fp && overlaps_unknown(img, d, frame.iou_threshold);
                ranked.push((d.score, o, ose));
            }
        }
    }
    if num_gt == 0 {
        return None;
    }
    // Stable sort keeps image order, then detection order, among equal scores.
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut tp, mut fp, mut fp_ose) = (0usize, 0usize, 0usize);
    for (_, o, ose) in ranked {
        match (o, ose) {
            (KnownOutcome::Tp, _) => tp += 1,
            (_, true) => fp_ose += 1,
            _ => fp += 1,
        }
        if tp as f64 / num_gt as f64 >= recall_level {
            let p_open = tp as f64 / (tp + fp + fp_ose) as f64;
            let p_closed = tp as f64 / (tp + fp) as f64;
            return Some(p_closed / p_open - 1.0);
        }
    }
    None
}

/// Harmonic mean of previously-known and current mAP.
pub fn f1i(prev: f64, cur: f64) -> f64 {
    if prev + cur == 0.0 {
        0.0
    } else {
        2.0 * prev * cur / (prev + cur)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnknownPrecision {
    /// `None` when there are no unknown detections.
    pub precision: Option<f64>,
    pub recall: f64,
    pub ap50: Option<f64>,
}

/// Precision, recall and AP of unknown-labelled detections against the
/// unknown pool. Unlabelled objects outside the pool count as false
/// positives, so precision is a lower bound.
pub fn unknown_precision(frame: &EvalFrame) -> Option<UnknownPrecision> {
    let pool: usize = frame.images.values().map(|i| i.unknown.len()).sum();
    if pool == 0 {
        return None;
    }
    let mut outcomes = Vec::new();
    let mut hit = 0;
    for img in frame.images.values() {
        let (o, h) = unknown_matches(img, frame.iou_threshold);
        outcomes.extend(o);
        hit += h;
    }
    let tp = outcomes.iter().filter(|o| o.1).count();
    Some(UnknownPrecision {
        precision: (!outcomes.is_empty()).then(|| tp as f64 / outcomes.len() as f64),
        recall: hit as f64 / pool as f64,
        ap50: average_precision_voc2010(&outcomes, pool),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: usize,
    pub per_class_ap: BTreeMap<ClassId, Option<f64>>,
    pub map_prev: Option<f64>,
    pub map_current: Option<f64>,
    pub map_both: Option<f64>,
    pub u_recall: Option<f64>,
    pub a_ose: usize,
    pub wi: Option<f64>,
    pub f1i: Option<f64>,
    pub unknown: Option<UnknownPrecision>,
    pub images: usize,
    pub detections: usize,
    pub known_detections: usize,
    pub unknown_detections: usize,
    pub iou_threshold: f64,
    pub wi_recall_level: f64,
    pub rules_version: String,
}

pub fn evaluate(
    frame: &EvalFrame,
    registry: &ClassRegistry,
    wi_recall_level: f64,
) -> MetricsReport {
    let aps = per_class_ap(frame);
    let map_prev = mean_ap(&aps, &registry.prior());
    let map_current = mean_ap(&aps, registry.current());
    let all: Vec<&Detection> = frame.images.values().flat_map(|i| &i.detections).collect();
    let unknown_detections = all.iter().filter(|d| d.label == Label::Unknown).count();
    MetricsReport {
        task: registry.current_task,
        map_both: mean_ap(&aps, &registry.known()),
        f1i: match (map_prev, map_current) {
            (Some(a), Some(b)) => Some(f1i(a, b)),
            _ => None,
        },
        map_prev,
        map_current,
        per_class_ap: aps,
        u_recall: u_recall(frame),
        a_ose: a_ose(frame),
        wi: wilderness_impact(frame, wi_recall_level),
        unknown: unknown_precision(frame),
        images: frame.images.len(),
        detections: all.len(),
        known_detections: all.len() - unknown_detections,
        unknown_detections,
        iou_threshold: frame.iou_threshold,
        wi_recall_level,
        rules_version: RULES_VERSION.to_string(),
    }
}

/// Table layout with one row per task: U-Recall, mAP prev/current/both,
/// A-OSE, WI. Percentages for rates; blank cells for not-applicable values.
pub fn reports_to_csv(reports: &[MetricsReport]) -> String {
    let pct = |v: Option<f64>| v.map_or(String::new(), |x| format!("{:.2}", 100.0 * x));
    let mut s = String::from("task,u_recall,map_prev,map_current,map_both,f1i,a_ose,wi\n");
    for r in reports {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.task,
            pct(r.u_recall),
            pct(r.map_prev),
            pct(r.map_current),
            pct(r.map_both),
            pct(r.f1i),
            r.a_ose,
            r.wi.map_or(String::new(), |w| format!("{w:.4}")),
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Provenance;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2).unwrap()
    }

    fn det(label: Label, score: f64, b: BoundingBox) -> Detection {
        Detection {
            label,
            score,
            bbox: b,
            provenance: Provenance::Classifier,
        }
    }

    fn frame(img: ImageFrame, known: &[u32]) -> EvalFrame {
        EvalFrame {
            images: [("a".to_string(), img)].into_iter().collect(),
            known_classes: known.iter().map(|&c| ClassId(c)).collect(),
            iou_threshold: 0.5,
        }
    }

    #[test]
    fn matching_examples() {
        let g = bx(0.0, 0.0, 10.0, 10.0);
        let (m, f) = match_detections(&[g], &[0.9], &[g], 0.5);
        assert_eq!((m, f), (vec![Some(0)], vec![true]));
        let (m, _) = match_detections(&[g, g], &[0.4, 0.9], &[g], 0.5);
        assert_eq!(m, vec![None, Some(0)]);
    }

    #[test]
    fn ap_examples() {
        assert_eq!(
            average_precision_voc2010(&[(0.1, true), (0.9, true)], 2),
            Some(1.0)
        );
        assert_eq!(average_precision_voc2010(&[(0.5, false)], 1), Some(0.0));
        assert_eq!(average_precision_voc2010(&[], 0), None);
        // Ranked TP, FP, TP, FP, TP with 3 gts: precision 1, 1/2, 2/3, 1/2, 3/5
        // at recall 1/3, 1/3, 2/3, 2/3, 1. Envelope: 1, 2/3, 3/5.
        let o = [
            (0.9, true),
            (0.8, false),
            (0.7, true),
            (0.6, false),
            (0.5, true),
        ];
        let expected = (1.0 + 2.0 / 3.0 + 3.0 / 5.0) / 3.0;
        assert!((average_precision_voc2010(&o, 3).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn f1i_examples() {
        assert_eq!(f1i(0.3, 0.3), 0.3);
        assert_eq!(f1i(0.7, 0.0), 0.0);
        assert!((f1i(46.6, 46.6) - 46.6).abs() < 1e-12);
        assert_eq!(f1i(0.0, 0.0), 0.0);
    }

    #[test]
    fn recall_and_open_set_error() {
        let u = bx(20.0, 20.0, 30.0, 30.0);
        let k = bx(0.0, 0.0, 10.0, 10.0);
        let img = ImageFrame {
            known: vec![(ClassId(1), k)],
            unknown: vec![u],
            detections: vec![
                det(Label::Known(ClassId(1)), 0.9, k),
                det(Label::Known(ClassId(1)), 0.8, u),
            ],
        };
        let f = frame(img.clone(), &[1]);
        assert_eq!(u_recall(&f), Some(0.0));
        assert_eq!(a_ose(&f), 1);
        let mut img2 = img;
        img2.detections = vec![det(Label::Unknown, 0.7, u)];
        let f2 = frame(img2, &[1]);
        assert_eq!(u_recall(&f2), Some(1.0));
        assert_eq!(a_ose(&f2), 0);
        let up = unknown_precision(&f2).unwrap();
        assert_eq!(up.precision, Some(1.0));
        assert_eq!(up.ap50, Some(1.0));
    }

    #[test]
    fn wi_hand_frame() {
        // 10 known gts; ranked: 9 TP, then 1 plain FP and 2 open-set FPs
        // interleaved so recall 0.8 is reached at rank 12 with 8 TP.
        let mut known = Vec::new();
        let mut dets = Vec::new();
        let mut unknown = Vec::new();
        for i in 0..10 {
            let b = bx(i as f64 * 12.0, 0.0, i as f64 * 12.0 + 10.0, 10.0);
            known.push((ClassId(1), b));
        }
        for i in 0..2 {
            unknown.push(bx(i as f64 * 12.0, 50.0, i as f64 * 12.0 + 10.0, 60.0));
        }
        let mut score = 1.0;
        let mut next = || {
            score -= 0.01;
            score
        };
        for b in known.iter().take(4) {
            dets.push(det(Label::Known(ClassId(1)), next(), b.1));
        }
        dets.push(det(Label::Known(ClassId(1)), next(), unknown[0]));
        dets.push(det(Label::Known(ClassId(1)), next(), unknown[1]));
        dets.push(det(
            Label::Known(ClassId(1)),
            next(),
            bx(200.0, 200.0, 210.0, 210.0),
        ));
        dets.push(det(
            Label::Known(ClassId(1)),
            next(),
            bx(220.0, 200.0, 230.0, 210.0),
        ));
        for b in known.iter().skip(4).take(4) {
            dets.push(det(Label::Known(ClassId(1)), next(), b.1));
        }
        let f = frame(
            ImageFrame {
                known,
                unknown,
                detections: dets,
            },
            &[1],
        );
        // At recall 0.8: 8 TP, 2 plain FP, 2 open-set FP.
        // P_closed = 8/10, P_open = 8/12, WI = 0.2.
        assert!((wilderness_impact(&f, 0.8).unwrap() - 0.2).abs() < 1e-12);
        assert_eq!(wilderness_impact(&f, 0.95), None);
    }
}
