//! RPN and RoI target assignment.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox, Point};

use super::network::{Anchor, RpnOutputs};

/// Distances from an anchor centre to the left, top, right and bottom edges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LtrbOffsets {
    pub l: f64,
    pub t: f64,
    pub r: f64,
    pub b: f64,
}

/// `sqrt(min(l,r)/max(l,r) * min(t,b)/max(t,b))`.
pub fn centerness_target(o: &LtrbOffsets) -> Result<f64> {
    let vals = [o.l, o.t, o.r, o.b];
    if vals.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::DegenerateOffsets(format!(
            "offsets must be finite and non-negative, got {vals:?}"
        )));
    }
    let (h_max, v_max) = (o.l.max(o.r), o.t.max(o.b));
    if h_max == 0.0 || v_max == 0.0 {
        return Err(Error::DegenerateOffsets(format!(
            "zero-extent box, got {vals:?}"
        )));
    }
    Ok(((o.l.min(o.r) / h_max) * (o.t.min(o.b) / v_max)).sqrt())
}

pub fn encode_ltrb(center: Point, gt: &BoundingBox) -> Result<LtrbOffsets> {
    if !gt.contains_strictly(center) {
        return Err(Error::CenterOutsideBox {
            x: center.x,
            y: center.y,
        });
    }
    Ok(LtrbOffsets {
        l: center.x - gt.x1(),
        t: center.y - gt.y1(),
        r: gt.x2() - center.x,
        b: gt.y2() - center.y,
    })
}

pub fn decode_ltrb(center: Point, o: &LtrbOffsets) -> Result<BoundingBox> {
    BoundingBox::new(
        center.x - o.l,
        center.y - o.t,
        center.x + o.r,
        center.y + o.b,
    )
}

/// One supervised anchor for `R_ctr` and `R_box`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RpnTarget {
    pub anchor: usize,
    pub gt: usize,
    pub centerness: f64,
    /// Offsets in pixels.
    pub ltrb: LtrbOffsets,
}

/// Samples up to `sample_size` anchors whose centres fall strictly inside a
/// gt box. An anchor inside several boxes belongs to the one with the nearest
/// centre (lowest index on ties).
pub fn assign_rpn_targets<R: Rng + ?Sized>(
    anchors: &[Anchor],
    gts: &[BoundingBox],
    sample_size: usize,
    rng: &mut R,
) -> Vec<RpnTarget> {
    let mut candidates = Vec::new();
    for (ai, a) in anchors.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if !g.contains_strictly(a.center) {
                continue;
            }
            let d = g.center().distance_sq(&a.center);
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((gi, d));
            }
        }
        if let Some((gi, _)) = best {
            let ltrb = encode_ltrb(a.center, &gts[gi]).expect("centre checked inside");
            let centerness = centerness_target(&ltrb).expect("strictly inside");
            candidates.push(RpnTarget {
                anchor: ai,
                gt: gi,
                centerness,
                ltrb,
            });
        }
    }
    if candidates.len() <= sample_size {
        return candidates;
    }
    let mut picked = sample(rng, candidates.len(), sample_size).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| candidates[i]).collect()
}

/// A region proposal with the anchor it was decoded from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub bbox: BoundingBox,
    pub anchor: usize,
    pub ctr_logit: f64,
}

/// Box decoded from an anchor's raw `R_box` output, clipped to the image.
pub fn decode_anchor(rpn: &RpnOutputs, i: usize, image_size: f64) -> BoundingBox {
    let a = &rpn.anchors[i];
    let [l, t, r, b] = rpn.ltrb[i].map(|v| v.max(0.0) * a.stride);
    BoundingBox::clip_to(
        a.center.x - l,
        a.center.y - t,
        a.center.x + r,
        a.center.y + b,
        image_size,
        image_size,
    )
}

/// Top-`k` anchors by centerness, decoded and clipped. No NMS is applied.
pub fn select_proposals(rpn: &RpnOutputs, k: usize, image_size: f64) -> Vec<Proposal> {
    let mut order: Vec<usize> = (0..rpn.ctr.len()).collect();
    // Logistic is monotone, so ranking by logit ranks by σ(logit).
    order.sort_by(|&a, &b| rpn.ctr[b].total_cmp(&rpn.ctr[a]).then(a.cmp(&b)));
    order
        .into_iter()
        .take(k)
        .map(|i| Proposal {
            bbox: decode_anchor(rpn, i, image_size),
            anchor: i,
            ctr_logit: rpn.ctr[i],
        })
        .collect()
}

/// Standard `(dx, dy, dw, dh)` box deltas relative to a reference box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxCoder {
    pub weights: [f64; 4],
}

impl Default for BoxCoder {
    fn default() -> Self {
        Self {
            weights: [10.0, 10.0, 5.0, 5.0],
        }
    }
}

const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

impl BoxCoder {
    pub fn encode(&self, reference: &BoundingBox, target: &BoundingBox) -> [f64; 4] {
        let (rc, tc) = (reference.center(), target.center());
        let [wx, wy, ww, wh] = self.weights;
        [
            wx * (tc.x - rc.x) / reference.width(),
            wy * (tc.y - rc.y) / reference.height(),
            ww * (target.width() / reference.width()).ln(),
            wh * (target.height() / reference.height()).ln(),
        ]
    }

    pub fn decode(
        &self,
        reference: &BoundingBox,
        d: &[f64; 4],
        width: f64,
        height: f64,
    ) -> BoundingBox {
        let c = reference.center();
        let [wx, wy, ww, wh] = self.weights;
        let cx = c.x + d[0] / wx * reference.width();
        let cy = c.y + d[1] / wy * reference.height();
        let w = reference.width() * (d[2] / ww).min(MAX_LOG_SCALE).exp();
        let h = reference.height() * (d[3] / wh).min(MAX_LOG_SCALE).exp();
        BoundingBox::clip_to(
            cx - w / 2.0,
            cy - h / 2.0,
            cx + w / 2.0,
            cy + h / 2.0,
            width,
            height,
        )
    }
}

/// Classification target of a training region.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoiLabel {
    /// Dense index into `K^t`.
    Class(usize),
    Background,
    /// Between the background and positive IoU bands.
    Ignore,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiTarget {
    pub label: RoiLabel,
    /// Index of the highest-IoU gt, if any gt overlaps.
    pub matched_gt: Option<usize>,
    pub max_iou: f64,
    /// Deltas from the region to its matched gt.
    pub deltas: Option<[f64; 4]>,
    /// `F_iou` target, attached after the forward pass and frozen.
    pub iou_target: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoiSampling {
    pub jitter_per_gt: usize,
    pub jitter_scale: f64,
    pub proposals: usize,
    pub random: usize,
    pub positive_iou: f64,
    pub background_iou: f64,
    /// Minimum IoU with a gt for a region to supervise `F_iou`.
    pub iou_head_min_overlap: f64,
}

impl Default for RoiSampling {
    fn default() -> Self {
        Self {
            jitter_per_gt: 4,
            jitter_scale: 0.15,
            proposals: 24,
            random: 8,
            positive_iou: 0.5,
            background_iou: 0.3,
            iou_head_min_overlap: 0.2,
        }
    }
}

/// Training regions: the gt boxes, jittered copies, top proposals and random boxes.
pub fn sample_training_rois<R: Rng + ?Sized>(
    gts: &[BoundingBox],
    proposals: &[Proposal],
    cfg: &RoiSampling,
    image_size: f64,
    rng: &mut R,
) -> Vec<BoundingBox> {
    let mut out: Vec<BoundingBox> = gts.to_vec();
    for g in gts {
        for _ in 0..cfg.jitter_per_gt {
            let (w, h) = (g.width(), g.height());
            let mut j =
                |v: f64, s: f64| v + rng.random_range(-cfg.jitter_scale..=cfg.jitter_scale) * s;
            let (x1, y1) = (j(g.x1(), w), j(g.y1(), h));
            let (x2, y2) = (j(g.x2(), w), j(g.y2(), h));
            out.push(BoundingBox::clip_to(x1, y1, x2, y2, image_size, image_size));
        }
    }
    out.extend(proposals.iter().take(cfg.proposals).map(|p| p.bbox));
    let max_side = image_size / 2.0;
    for _ in 0..cfg.random {
        let w = rng.random_range(8.0..max_side);
        let h = rng.random_range(8.0..max_side);
        let x = rng.random_range(0.0..image_size - w);
        let y = rng.random_range(0.0..image_size - h);
        out.push(BoundingBox::clip_to(
            x,
            y,
            x + w,
            y + h,
            image_size,
            image_size,
        ));
    }
    out
}

/// Labels regions by their highest-IoU gt using the two-threshold rule.
pub fn label_rois(
    rois: &[BoundingBox],
    gts: &[(BoundingBox, usize)],
    cfg: &RoiSampling,
    coder: &BoxCoder,
) -> Vec<RoiTarget> {
    rois.iter()
        .map(|r| {
            let mut best: Option<(usize, f64)> = None;
            for (gi, (g, _)) in gts.iter().enumerate() {
                let v = iou(r, g);
                if v > 0.0 && best.is_none_or(|(_, b)| v > b) {
                    best = Some((gi, v));
                }
            }
            let max_iou = best.map_or(0.0, |(_, v)| v);
            let label = match best {
                Some((gi, v)) if v >= cfg.positive_iou => RoiLabel::Class(gts[gi].1),
                _ if max_iou < cfg.background_iou => RoiLabel::Background,
                _ => RoiLabel::Ignore,
            };
            RoiTarget {
                label,
                matched_gt: best.map(|(gi, _)| gi),
                max_iou,
                deltas: best.map(|(gi, _)| coder.encode(r, &gts[gi].0)),
                iou_target: None,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::network::anchors;
    use crate::detector::params::ArchConfig;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2).unwrap()
    }

    fn o(l: f64, t: f64, r: f64, b: f64) -> LtrbOffsets {
        LtrbOffsets { l, t, r, b }
    }

    #[test]
    fn centerness_examples() {
        assert_eq!(centerness_target(&o(3.0, 2.0, 3.0, 2.0)).unwrap(), 1.0);
        assert_eq!(centerness_target(&o(1.0, 1.0, 4.0, 4.0)).unwrap(), 0.25);
        assert_eq!(centerness_target(&o(0.0, 1.0, 4.0, 1.0)).unwrap(), 0.0);
        assert!(centerness_target(&o(0.0, 1.0, 0.0, 1.0)).is_err());
        assert!(centerness_target(&o(-1.0, 1.0, 2.0, 1.0)).is_err());
    }

    #[test]
    fn encode_examples() {
        let g = bx(0.0, 0.0, 10.0, 10.0);
        assert_eq!(
            encode_ltrb(Point::new(2.0, 3.0), &g).unwrap(),
            o(2.0, 3.0, 8.0, 7.0)
        );
        let c = encode_ltrb(g.center(), &g).unwrap();
        assert_eq!((c.l, c.t), (c.r, c.b));
        assert!(matches!(
            encode_ltrb(Point::new(10.0, 5.0), &g),
            Err(Error::CenterOutsideBox { .. })
        ));
    }

    proptest! {
        #[test]
        fn centerness_bounded_and_scale_invariant(
            l in 0.01f64..50.0, t in 0.01f64..50.0, r in 0.01f64..50.0, b in 0.01f64..50.0,
            s in 0.1f64..10.0,
        ) {
            let c = centerness_target(&o(l, t, r, b)).unwrap();
            prop_assert!((0.0..=1.0).contains(&c));
            let cs = centerness_target(&o(l * s, t * s, r * s, b * s)).unwrap();
            prop_assert!((c - cs).abs() < 1e-12);
        }

        #[test]
        fn ltrb_round_trip(
            x1 in -50.0f64..50.0, y1 in -50.0f64..50.0, w in 1.0f64..80.0, h in 1.0f64..80.0,
            fx in 0.01f64..0.99, fy in 0.01f64..0.99,
        ) {
            let g = bx(x1, y1, x1 + w, y1 + h);
            let c = Point::new(x1 + fx * w, y1 + fy * h);
            let back = decode_ltrb(c, &encode_ltrb(c, &g).unwrap()).unwrap();
            for (a, b) in [(back.x1(), g.x1()), (back.y1(), g.y1()), (back.x2(), g.x2()), (back.y2(), g.y2())] {
                prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
        }

        #[test]
        fn box_coder_round_trip(
            x1 in 0.0f64..60.0, y1 in 0.0f64..60.0, w in 2.0f64..60.0, h in 2.0f64..60.0,
            dx in -10.0f64..10.0, dy in -10.0f64..10.0, sw in 0.5f64..2.0, sh in 0.5f64..2.0,
        ) {
            let r = bx(x1, y1, x1 + w, y1 + h);
            let t = bx(x1 + dx + 20.0, y1 + dy + 20.0, x1 + dx + 20.0 + w * sw, y1 + dy + 20.0 + h * sh);
            let coder = BoxCoder::default();
            let back = coder.decode(&r, &coder.encode(&r, &t), 1e6, 1e6);
            prop_assert!((back.x1() - t.x1()).abs() < 1e-9);
            prop_assert!((back.y2() - t.y2()).abs() < 1e-9);
        }
    }

    #[test]
    fn integer_round_trip_is_exact() {
        let g = bx(3.0, 4.0, 17.0, 29.0);
        let c = Point::new(8.0, 12.0);
        assert_eq!(decode_ltrb(c, &encode_ltrb(c, &g).unwrap()).unwrap(), g);
    }

    fn anchor_at(x: f64, y: f64) -> Anchor {
        Anchor {
            level: 0,
            center: Point::new(x, y),
            stride: 8.0,
        }
    }

    #[test]
    fn single_anchor_forced_choice() {
        let anchors = vec![anchor_at(4.0, 4.0), anchor_at(12.0, 4.0)];
        let g = bx(0.0, 0.0, 8.0, 6.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = assign_rpn_targets(&anchors, &[g], 10, &mut rng);
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].anchor, 0);
        let expected = ((4.0f64 / 4.0) * (2.0 / 4.0)).sqrt();
        assert!((t[0].centerness - expected).abs() < 1e-15);
    }

    #[test]
    fn overlapping_gts_nearest_center_wins() {
        let anchors = vec![anchor_at(10.0, 10.0)];
        let far = bx(0.0, 0.0, 40.0, 40.0); // centre (20,20), d^2 = 200
        let near = bx(5.0, 5.0, 17.0, 17.0); // centre (11,11), d^2 = 2
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = assign_rpn_targets(&anchors, &[far, near], 10, &mut rng);
        assert_eq!(t[0].gt, 1);
        assert_eq!(t[0].ltrb, o(5.0, 5.0, 7.0, 7.0));
        // Equidistant centres: lower index wins.
        let a = bx(0.0, 8.0, 12.0, 12.0);
        let b = bx(8.0, 0.0, 12.0, 12.0);
        assert_eq!(a.center().distance_sq(&Point::new(10.0, 10.0)), 16.0 + 0.0);
        assert_eq!(b.center().distance_sq(&Point::new(10.0, 10.0)), 0.0 + 16.0);
        let t = assign_rpn_targets(&anchors, &[a, b], 10, &mut rng);
        assert_eq!(t[0].gt, 0);
    }

    #[test]
    fn no_overlap_gives_empty_supervision() {
        let anchors = anchors(&ArchConfig::default());
        let g = bx(0.5, 0.5, 3.0, 3.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(assign_rpn_targets(&anchors, &[g], 64, &mut rng).is_empty());
    }

    #[test]
    fn sampled_anchors_are_inside_and_bounded() {
        let anchors = anchors(&ArchConfig::default());
        let gts = [bx(10.0, 10.0, 70.0, 60.0), bx(50.0, 40.0, 120.0, 110.0)];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = assign_rpn_targets(&anchors, &gts, 20, &mut rng);
        assert_eq!(t.len(), 20);
        for s in &t {
            assert!(gts[s.gt].contains_strictly(anchors[s.anchor].center));
            assert!(t.iter().filter(|u| u.anchor == s.anchor).count() == 1);
        }
    }

    #[test]
    fn proposals_follow_sorted_centerness() {
        let arch = ArchConfig {
            image_size: 32,
            ..ArchConfig::default()
        };
        let a = anchors(&arch);
        let ctr: Vec<f64> = (0..a.len())
            .map(|i| ((i * 7919) % 13) as f64 - 6.0)
            .collect();
        let rpn = RpnOutputs {
            ltrb: vec![[1.0, 1.0, 1.0, 1.0]; a.len()],
            anchors: a,
            ctr: ctr.clone(),
        };
        let all = select_proposals(&rpn, 1000, 32.0);
        assert_eq!(all.len(), ctr.len());
        let mut oracle: Vec<(f64, usize)> = ctr
            .iter()
            .map(|&c| 1.0 / (1.0 + (-c).exp()))
            .enumerate()
            .map(|(i, s)| (s, i))
            .collect();
        oracle.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap().then(x.1.cmp(&y.1)));
        let got: Vec<usize> = all.iter().map(|p| p.anchor).collect();
        let want: Vec<usize> = oracle.iter().map(|p| p.1).collect();
        assert_eq!(got, want);
        let top = select_proposals(&rpn, 1, 32.0);
        assert_eq!(top[0].anchor, want[0]);
        let c = rpn.anchors[want[0]].center;
        let s = rpn.anchors[want[0]].stride;
        assert_eq!(
            top[0].bbox,
            BoundingBox::clip_to(c.x - s, c.y - s, c.x + s, c.y + s, 32.0, 32.0)
        );
    }

    #[test]
    fn roi_labels_use_two_thresholds() {
        let g = bx(0.0, 0.0, 10.0, 10.0);
        let rois = [
            g,
            bx(0.0, 0.0, 10.0, 25.0),
            bx(0.0, 0.0, 10.0, 16.0),
            bx(50.0, 50.0, 60.0, 60.0),
        ];
        let t = label_rois(
            &rois,
            &[(g, 2)],
            &RoiSampling::default(),
            &BoxCoder::default(),
        );
        assert_eq!(t[0].label, RoiLabel::Class(2));
        assert_eq!(t[0].deltas, Some([0.0; 4]));
        assert_eq!(t[1].label, RoiLabel::Ignore); // IoU 0.4
        assert_eq!(t[2].label, RoiLabel::Class(2)); // IoU 0.625
        assert_eq!(t[3].label, RoiLabel::Background);
        assert_eq!(t[3].matched_gt, None);
    }
}
