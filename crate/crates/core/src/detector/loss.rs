//! Loss composition, the prior-class exclusion mask, and output gradients.

use serde::{Deserialize, Serialize};

use crate::geometry::{iou, BoundingBox};

use super::network::{RoiOutputs, RpnGrads, RpnOutputs};
use super::targets::{BoxCoder, RoiLabel, RoiTarget, RpnTarget};

/// Weight on the classification term.
pub const CLS_WEIGHT: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ctr: f64,
    #[serde(rename = "box")]
    pub rpn_box: f64,
    pub cls: f64,
    pub clsbox: f64,
    pub agnbox: f64,
    pub iou: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn from_terms(
        ctr: f64,
        rpn_box: f64,
        cls: f64,
        clsbox: f64,
        agnbox: f64,
        iou: f64,
    ) -> Self {
        Self {
            ctr,
            rpn_box,
            cls,
            clsbox,
            agnbox,
            iou,
            total: ctr + rpn_box + CLS_WEIGHT * cls + clsbox + agnbox + iou,
        }
    }

    pub fn is_finite(&self) -> bool {
        [
            self.ctr,
            self.rpn_box,
            self.cls,
            self.clsbox,
            self.agnbox,
            self.iou,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    /// Term-wise sum, used to average over a batch.
    pub fn add(&self, o: &Self) -> Self {
        Self::from_terms(
            self.ctr + o.ctr,
            self.rpn_box + o.rpn_box,
            self.cls + o.cls,
            self.clsbox + o.clsbox,
            self.agnbox + o.agnbox,
            self.iou + o.iou,
        )
    }

    pub fn scale(&self, s: f64) -> Self {
        Self::from_terms(
            self.ctr * s,
            self.rpn_box * s,
            self.cls * s,
            self.clsbox * s,
            self.agnbox * s,
            self.iou * s,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossOptions {
    /// When off, `L_agnbox` and `L_iou` are zero and their heads get no gradient.
    pub class_agnostic: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            class_agnostic: true,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn l1_grad(residual: f64) -> f64 {
    if residual > 0.0 {
        1.0
    } else if residual < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Regions excluded from `L_cls`: a confident prior-class prediction
/// (`max softmax over prior > θ_cls`) with high objectness (`s_obj > θ_obj`)
/// that overlaps no ground-truth box.
pub fn build_exclusion_mask(
    roi: &RoiOutputs,
    s_obj: &[f64],
    regions: &[BoundingBox],
    gts: &[BoundingBox],
    prior: &[usize],
    theta_cls: f64,
    theta_obj: f64,
) -> Vec<bool> {
    (0..roi.len())
        .map(|r| {
            if prior.is_empty() {
                return false;
            }
            let p = softmax(roi.cls_logits(r));
            let s_cls = prior
                .iter()
                .map(|&k| p[k])
                .fold(f64::NEG_INFINITY, f64::max);
            let overlaps = gts.iter().any(|g| iou(&regions[r], g) > 0.0);
            s_cls > theta_cls && s_obj[r] > theta_obj && !overlaps
        })
        .collect()
}

/// Sets each overlapping region's `F_iou` target to the realised IoU between
/// its `F_agnbox` box and its matched gt. The value is treated as a constant.
pub fn attach_iou_targets(
    roi: &RoiOutputs,
    regions: &[BoundingBox],
    gts: &[BoundingBox],
    targets: &mut [RoiTarget],
    min_overlap: f64,
    coder: &BoxCoder,
    image_size: f64,
) {
    for (r, t) in targets.iter_mut().enumerate() {
        t.iou_target = match t.matched_gt {
            Some(g) if t.max_iou >= min_overlap => {
                let pred = coder.decode(&regions[r], &roi.agn_deltas(r), image_size, image_size);
                Some(iou(&pred, &gts[g]))
            }
            _ => None,
        };
    }
}

/// Loss terms only.
pub fn compute_losses(
    rpn: &RpnOutputs,
    rpn_targets: &[RpnTarget],
    roi: &RoiOutputs,
    roi_targets: &[RoiTarget],
    mask: &[bool],
    opts: &LossOptions,
) -> LossBreakdown {
    losses_and_grads(rpn, rpn_targets, roi, roi_targets, mask, opts).0
}

/// Loss terms with gradients of the total with respect to the network outputs.
pub(crate) fn losses_and_grads(
    rpn: &RpnOutputs,
    rpn_targets: &[RpnTarget],
    roi: &RoiOutputs,
    roi_targets: &[RoiTarget],
    mask: &[bool],
    opts: &LossOptions,
) -> (LossBreakdown, RpnGrads, RoiOutputs) {
    assert_eq!(mask.len(), roi.len(), "mask length must match region count");
    assert_eq!(roi_targets.len(), roi.len(), "one target per region");
    let mut d_rpn = RpnGrads {
        ctr: vec![0.0; rpn.ctr.len()],
        ltrb: vec![[0.0; 4]; rpn.ltrb.len()],
    };
    let mut d_roi = roi.zeros_like();

    let (mut l_ctr, mut l_box) = (0.0, 0.0);
    let n = rpn_targets.len() as f64;
    for t in rpn_targets {
        let s = sigmoid(rpn.ctr[t.anchor]);
        let res = s - t.centerness;
        l_ctr += res.abs();
        d_rpn.ctr[t.anchor] += l1_grad(res) * s * (1.0 - s) / n;
        let stride = rpn.anchors[t.anchor].stride;
        let target = [t.ltrb.l, t.ltrb.t, t.ltrb.r, t.ltrb.b].map(|v| v / stride);
        for k in 0..4 {
            let res = rpn.ltrb[t.anchor][k] - target[k];
            l_box += res.abs();
            d_rpn.ltrb[t.anchor][k] += l1_grad(res) / n;
        }
    }
    if n > 0.0 {
        l_ctr /= n;
        l_box /= n;
    }

    let kp1 = roi.num_known + 1;
    let cls_count = roi_targets
        .iter()
        .zip(mask)
        .filter(|(t, &m)| !m && t.label != RoiLabel::Ignore)
        .count() as f64;
    let pos_count = roi_targets
        .iter()
        .filter(|t| matches!(t.label, RoiLabel::Class(_)))
        .count() as f64;
    let iou_count = roi_targets
        .iter()
        .filter(|t| t.iou_target.is_some())
        .count() as f64;

    let (mut l_cls, mut l_clsbox, mut l_agnbox, mut l_iou) = (0.0, 0.0, 0.0, 0.0);
    for (r, t) in roi_targets.iter().enumerate() {
        let y = match t.label {
            RoiLabel::Class(k) => Some(k),
            RoiLabel::Background => Some(roi.num_known),
            RoiLabel::Ignore => None,
        };
        if let (Some(y), false) = (y, mask[r]) {
            let p = softmax(roi.cls_logits(r));
            l_cls += -p[y].max(f64::MIN_POSITIVE).ln();
            for (j, pj) in p.iter().enumerate() {
                let onehot = if j == y { 1.0 } else { 0.0 };
                d_roi.cls[r * kp1 + j] += CLS_WEIGHT * (pj - onehot) / cls_count;
            }
        }
        if let (RoiLabel::Class(k), Some(target)) = (t.label, t.deltas) {
            let pred = roi.class_deltas(r, k);
            let base = r * 4 * roi.num_known + 4 * k;
            for j in 0..4 {
                let res = pred[j] - target[j];
                l_clsbox += res.abs();
                d_roi.clsbox[base + j] += l1_grad(res) / pos_count;
            }
            if opts.class_agnostic {
                let pred = roi.agn_deltas(r);
                for j in 0..4 {
                    let res = pred[j] - target[j];
                    l_agnbox += res.abs();
                    d_roi.agnbox[4 * r + j] += l1_grad(res) / pos_count;
                }
            }
        }
        if let (Some(target), true) = (t.iou_target, opts.class_agnostic) {
            let s = sigmoid(roi.iou[r]);
            let res = s - target;
            l_iou += res.abs();
            d_roi.iou[r] += l1_grad(res) * s * (1.0 - s) / iou_count;
        }
    }
    let div = |v: f64, c: f64| if c > 0.0 { v / c } else { 0.0 };
    let breakdown = LossBreakdown::from_terms(
        l_ctr,
        l_box,
        div(l_cls, cls_count),
        div(l_clsbox, pos_count),
        div(l_agnbox, pos_count),
        div(l_iou, iou_count),
    );
    (breakdown, d_rpn, d_roi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::network::{anchors, Anchor};
    use crate::detector::params::ArchConfig;
    use crate::detector::targets::LtrbOffsets;
    use crate::geometry::Point;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2).unwrap()
    }

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    fn one_region(cls: Vec<f64>) -> RoiOutputs {
        let k = cls.len() - 1;
        RoiOutputs {
            num_known: k,
            cls,
            clsbox: vec![0.0; 4 * k],
            agnbox: vec![0.0; 4],
            iou: vec![0.0],
        }
    }

    #[test]
    fn identity_holds() {
        let l = LossBreakdown::from_terms(0.1, 0.2, 0.3, 0.4, 0.5, 0.6);
        assert!((l.total - (0.1 + 0.2 + 0.9 + 0.4 + 0.5 + 0.6)).abs() < 1e-15);
        let l2 = LossBreakdown::from_terms(0.1, 0.2, 0.6, 0.4, 0.5, 0.6);
        assert!((l2.total - l.total - 3.0 * 0.3).abs() < 1e-12);
    }

    #[test]
    fn mask_first_task_is_inert() {
        let roi = one_region(vec![5.0, -5.0, -5.0]);
        let m = build_exclusion_mask(&roi, &[0.9], &[bx(0.0, 0.0, 5.0, 5.0)], &[], &[], 0.5, 0.69);
        assert_eq!(m, vec![false]);
    }

    #[test]
    fn mask_confident_prior_disjoint_is_excluded() {
        let roi = one_region(vec![5.0, -5.0, -5.0]);
        let region = [bx(0.0, 0.0, 5.0, 5.0)];
        let far = [bx(50.0, 50.0, 60.0, 60.0)];
        assert_eq!(
            build_exclusion_mask(&roi, &[0.9], &region, &far, &[0], 0.5, 0.69),
            vec![true]
        );
        let touching = [bx(4.0, 4.0, 10.0, 10.0)];
        assert_eq!(
            build_exclusion_mask(&roi, &[0.9], &region, &touching, &[0], 0.5, 0.69),
            vec![false]
        );
        assert_eq!(
            build_exclusion_mask(&roi, &[0.6], &region, &far, &[0], 0.5, 0.69),
            vec![false]
        );
        // class 1 is not a prior class
        let roi = one_region(vec![-5.0, 5.0, -5.0]);
        assert_eq!(
            build_exclusion_mask(&roi, &[0.9], &region, &far, &[0], 0.5, 0.69),
            vec![false]
        );
    }

    #[test]
    fn perfect_outputs_give_zero_l1_terms() {
        let arch = ArchConfig {
            image_size: 32,
            ..ArchConfig::default()
        };
        let a: Vec<Anchor> = anchors(&arch);
        let c: Point = a[0].center;
        let ltrb = LtrbOffsets {
            l: c.x - 1.0,
            t: c.y - 2.0,
            r: 13.0 - c.x,
            b: 10.0 - c.y,
        };
        let ctr_t = 0.6;
        let mut rpn = RpnOutputs {
            ctr: vec![0.0; a.len()],
            ltrb: vec![[0.0; 4]; a.len()],
            anchors: a,
        };
        rpn.ctr[0] = logit(ctr_t);
        rpn.ltrb[0] = [ltrb.l / 8.0, ltrb.t / 8.0, ltrb.r / 8.0, ltrb.b / 8.0];
        let rpn_t = [RpnTarget {
            anchor: 0,
            gt: 0,
            centerness: ctr_t,
            ltrb,
        }];
        let deltas = [0.5, -0.25, 0.1, 0.2];
        let mut roi = one_region(vec![0.0, 0.0, 0.0]);
        roi.clsbox[4..8].copy_from_slice(&deltas);
        roi.agnbox.copy_from_slice(&deltas);
        roi.iou[0] = logit(0.7);
        let roi_t = [RoiTarget {
            label: RoiLabel::Class(1),
            matched_gt: Some(0),
            max_iou: 0.8,
            deltas: Some(deltas),
            iou_target: Some(0.7),
        }];
        let l = compute_losses(
            &rpn,
            &rpn_t,
            &roi,
            &roi_t,
            &[false],
            &LossOptions::default(),
        );
        assert!(
            l.ctr < 1e-12
                && l.rpn_box < 1e-12
                && l.clsbox == 0.0
                && l.agnbox == 0.0
                && l.iou < 1e-12
        );
        assert!((l.cls - 3f64.ln()).abs() < 1e-12);
        let masked = compute_losses(&rpn, &rpn_t, &roi, &roi_t, &[true], &LossOptions::default());
        assert_eq!(masked.cls, 0.0);
    }

    #[test]
    fn empty_sets_contribute_zero() {
        let rpn = RpnOutputs {
            anchors: vec![],
            ctr: vec![],
            ltrb: vec![],
        };
        let roi = RoiOutputs {
            num_known: 2,
            cls: vec![],
            clsbox: vec![],
            agnbox: vec![],
            iou: vec![],
        };
        let l = compute_losses(&rpn, &[], &roi, &[], &[], &LossOptions::default());
        assert_eq!(l, LossBreakdown::default());
    }

    #[test]
    fn softmax_is_a_simplex() {
        let p = softmax(&[1000.0, 0.0, -1000.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(p.iter().all(|v| v.is_finite() && *v >= 0.0));
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }
}
