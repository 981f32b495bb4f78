//! Backbone, two-level feature pyramid, RPN heads and RoI heads with their
//! hand-written backward passes.

use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, Point};

use super::layers::{self, BinTaps, Conv, ConvOut, Linear};
use super::params::{ArchConfig, ModelParams};

/// One anchor point per feature cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub level: usize,
    pub center: Point,
    pub stride: f64,
}

pub fn anchors(arch: &ArchConfig) -> Vec<Anchor> {
    let mut out = Vec::new();
    for (level, &stride) in arch.strides().iter().enumerate() {
        let n = arch.image_size / stride;
        for y in 0..n {
            for x in 0..n {
                out.push(Anchor {
                    level,
                    center: Point::new(
                        (x as f64 + 0.5) * stride as f64,
                        (y as f64 + 0.5) * stride as f64,
                    ),
                    stride: stride as f64,
                });
            }
        }
    }
    out
}

/// Per-anchor RPN outputs across both pyramid levels (stride 8 first).
#[derive(Debug, Clone, PartialEq)]
pub struct RpnOutputs {
    pub anchors: Vec<Anchor>,
    /// Centerness logits `R_ctr`.
    pub ctr: Vec<f64>,
    /// Raw `R_box` outputs: `(l, t, r, b)` in units of the anchor's stride.
    pub ltrb: Vec<[f64; 4]>,
}

impl RpnOutputs {
    /// Centerness logit of the cell containing `p` on `level`.
    pub fn ctr_logit_at(&self, arch: &ArchConfig, level: usize, p: Point) -> f64 {
        let stride = arch.strides()[level];
        let n = arch.image_size / stride;
        let offset: usize = arch.strides()[..level]
            .iter()
            .map(|s| (arch.image_size / s).pow(2))
            .sum();
        let cx = ((p.x / stride as f64).floor().max(0.0) as usize).min(n - 1);
        let cy = ((p.y / stride as f64).floor().max(0.0) as usize).min(n - 1);
        self.ctr[offset + cy * n + cx]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub stride: f64,
    pub data: Vec<f64>,
}

/// Pyramid features `[P3, P4]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub levels: [FeatureMap; 2],
}

/// The four RoI head outputs for a batch of regions.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiOutputs {
    pub num_known: usize,
    /// `F_cls`: `|K^t| + 1` logits per region, background last.
    pub cls: Vec<f64>,
    /// `F_clsbox`: four deltas per known class per region.
    pub clsbox: Vec<f64>,
    /// `F_agnbox`: four class-agnostic deltas per region.
    pub agnbox: Vec<f64>,
    /// `F_iou` logit per region.
    pub iou: Vec<f64>,
}

impl RoiOutputs {
    pub fn len(&self) -> usize {
        self.iou.len()
    }

    pub fn is_empty(&self) -> bool {
        self.iou.is_empty()
    }

    pub fn cls_logits(&self, r: usize) -> &[f64] {
        let k = self.num_known + 1;
        &self.cls[r * k..(r + 1) * k]
    }

    pub fn class_deltas(&self, r: usize, class: usize) -> [f64; 4] {
        let base = r * 4 * self.num_known + 4 * class;
        self.clsbox[base..base + 4].try_into().expect("4 deltas")
    }

    pub fn agn_deltas(&self, r: usize) -> [f64; 4] {
        self.agnbox[4 * r..4 * r + 4].try_into().expect("4 deltas")
    }

    /// Gradient buffer of matching shape.
    pub(crate) fn zeros_like(&self) -> RoiOutputs {
        RoiOutputs {
            num_known: self.num_known,
            cls: vec![0.0; self.cls.len()],
            clsbox: vec![0.0; self.clsbox.len()],
            agnbox: vec![0.0; self.agnbox.len()],
            iou: vec![0.0; self.iou.len()],
        }
    }
}

pub(crate) struct Modules {
    pub convs: [Conv; 4],
    pub lat3: Conv,
    pub lat4: Conv,
    pub rpn: Conv,
    pub rpn_ctr: Conv,
    pub rpn_box: Conv,
    pub fc1: Linear,
    pub fc2: Linear,
    pub cls: Linear,
    pub clsbox: Linear,
    pub agnbox: Linear,
    pub iou: Linear,
}

impl Modules {
    pub fn new(p: &ModelParams) -> Self {
        let a = &p.arch;
        let l = &p.layout;
        let [c1, c2, c3, c4] = a.backbone_channels;
        let f = a.fpn_channels;
        let h = a.roi_hidden;
        let k = p.num_known();
        let conv = |name: &str, cin, cout, k, stride, relu| Conv {
            w: l.offset(&format!("{name}.w")),
            b: l.offset(&format!("{name}.b")),
            cin,
            cout,
            k,
            stride,
            relu,
        };
        let lin = |name: &str, din, dout, relu| Linear {
            w: l.offset(&format!("{name}.w")),
            b: l.offset(&format!("{name}.b")),
            din,
            dout,
            relu,
        };
        Self {
            convs: [
                conv("c1", 3, c1, 3, 2, true),
                conv("c2", c1, c2, 3, 2, true),
                conv("c3", c2, c3, 3, 2, true),
                conv("c4", c3, c4, 3, 2, true),
            ],
            lat3: conv("lat3", c3, f, 1, 1, false),
            lat4: conv("lat4", c4, f, 1, 1, false),
            rpn: conv("rpn", f, f, 3, 1, true),
            rpn_ctr: conv("rpn_ctr", f, 1, 1, 1, false),
            rpn_box: conv("rpn_box", f, 4, 1, 1, false),
            fc1: lin("fc1", a.roi_features(), h, true),
            fc2: lin("fc2", h, h, true),
            cls: lin("cls", h, k + 1, false),
            clsbox: lin("clsbox", h, 4 * k, false),
            agnbox: lin("agnbox", h, 4, false),
            iou: lin("iou", h, 1, false),
        }
    }
}

pub(crate) struct BackboneCache {
    blocks: Vec<ConvOut>,
    lat3: ConvOut,
    lat4: ConvOut,
    rpn: Vec<ConvOut>,
    rpn_ctr: Vec<ConvOut>,
    rpn_box: Vec<ConvOut>,
}

/// Image-level forward pass: backbone, pyramid and RPN.
pub fn forward(params: &ModelParams, input: &[f64]) -> Result<(RpnOutputs, Features)> {
    let (rpn, feats, _) = forward_cached(params, input)?;
    Ok((rpn, feats))
}

pub(crate) fn forward_cached(
    params: &ModelParams,
    input: &[f64],
) -> Result<(RpnOutputs, Features, BackboneCache)> {
    let a = &params.arch;
    let s = a.image_size;
    if input.len() != 3 * s * s {
        return Err(Error::Shape(format!(
            "expected a 3x{s}x{s} input ({} values), got {}",
            3 * s * s,
            input.len()
        )));
    }
    let m = Modules::new(params);
    let p = &params.values;

    let mut blocks: Vec<ConvOut> = Vec::with_capacity(4);
    let (mut h, mut w) = (s, s);
    for (i, conv) in m.convs.iter().enumerate() {
        let out = {
            let x = if i == 0 { input } else { &blocks[i - 1].y };
            conv.forward(p, x, h, w)
        };
        h = out.oh;
        w = out.ow;
        blocks.push(out);
    }
    let f = a.fpn_channels;
    let lat4 = m.lat4.forward(p, &blocks[3].y, blocks[3].oh, blocks[3].ow);
    let lat3 = m.lat3.forward(p, &blocks[2].y, blocks[2].oh, blocks[2].ow);
    let p4 = lat4.y.clone();
    let up = layers::upsample2(&p4, f, lat4.oh, lat4.ow);
    let p3: Vec<f64> = lat3.y.iter().zip(&up).map(|(a, b)| a + b).collect();

    let strides = a.strides();
    let maps = [
        FeatureMap {
            channels: f,
            height: lat3.oh,
            width: lat3.ow,
            stride: strides[0] as f64,
            data: p3,
        },
        FeatureMap {
            channels: f,
            height: lat4.oh,
            width: lat4.ow,
            stride: strides[1] as f64,
            data: p4,
        },
    ];

    let mut ctr = Vec::new();
    let mut ltrb = Vec::new();
    let mut rpn_c = Vec::new();
    let mut ctr_c = Vec::new();
    let mut box_c = Vec::new();
    for map in &maps {
        let hidden = m.rpn.forward(p, &map.data, map.height, map.width);
        let c = m.rpn_ctr.forward(p, &hidden.y, map.height, map.width);
        let b = m.rpn_box.forward(p, &hidden.y, map.height, map.width);
        let n = map.height * map.width;
        ctr.extend_from_slice(&c.y);
        for i in 0..n {
            ltrb.push([b.y[i], b.y[n + i], b.y[2 * n + i], b.y[3 * n + i]]);
        }
        rpn_c.push(hidden);
        ctr_c.push(c);
        box_c.push(b);
    }

    let rpn = RpnOutputs {
        anchors: anchors(a),
        ctr,
        ltrb,
    };
    let cache = BackboneCache {
        blocks,
        lat3,
        lat4,
        rpn: rpn_c,
        rpn_ctr: ctr_c,
        rpn_box: box_c,
    };
    Ok((rpn, Features { levels: maps }, cache))
}

/// Gradients with respect to the RPN outputs.
#[derive(Debug, Clone)]
pub(crate) struct RpnGrads {
    pub ctr: Vec<f64>,
    pub ltrb: Vec<[f64; 4]>,
}

/// Backpropagates RPN and pyramid-feature gradients into `g`.
pub(crate) fn backward(
    params: &ModelParams,
    cache: &BackboneCache,
    d_rpn: &RpnGrads,
    mut d_feat: [Vec<f64>; 2],
    g: &mut [f64],
) {
    let m = Modules::new(params);
    let p = &params.values;
    let f = params.arch.fpn_channels;

    let mut anchor_offset = 0;
    for level in 0..2 {
        let hidden = &cache.rpn[level];
        let n = hidden.oh * hidden.ow;
        let mut dc: Vec<f64> = d_rpn.ctr[anchor_offset..anchor_offset + n].to_vec();
        let mut db = vec![0.0; 4 * n];
        for i in 0..n {
            let d = d_rpn.ltrb[anchor_offset + i];
            for (k, v) in d.iter().enumerate() {
                db[k * n + i] = *v;
            }
        }
        anchor_offset += n;
        let mut dh = m
            .rpn_ctr
            .backward(p, &cache.rpn_ctr[level], &mut dc, g, true)
            .expect("dx requested");
        let dh_box = m
            .rpn_box
            .backward(p, &cache.rpn_box[level], &mut db, g, true)
            .expect("dx requested");
        for (a, b) in dh.iter_mut().zip(&dh_box) {
            *a += b;
        }
        let dmap = m
            .rpn
            .backward(p, hidden, &mut dh, g, true)
            .expect("dx requested");
        for (a, b) in d_feat[level].iter_mut().zip(&dmap) {
            *a += b;
        }
    }

    // P3 = lat3(C3) + up(P4); P4 = lat4(C4)
    let [mut dp3, mut dp4] = d_feat;
    let down = layers::upsample2_backward(&dp3, f, cache.lat4.oh, cache.lat4.ow);
    for (a, b) in dp4.iter_mut().zip(&down) {
        *a += b;
    }
    let mut dc3 = m
        .lat3
        .backward(p, &cache.lat3, &mut dp3, g, true)
        .expect("dx requested");
    let mut dc4 = m
        .lat4
        .backward(p, &cache.lat4, &mut dp4, g, true)
        .expect("dx requested");

    let dc3_from4 = m.convs[3]
        .backward(p, &cache.blocks[3], &mut dc4, g, true)
        .expect("dx requested");
    for (a, b) in dc3.iter_mut().zip(&dc3_from4) {
        *a += b;
    }
    let mut dc2 = m.convs[2]
        .backward(p, &cache.blocks[2], &mut dc3, g, true)
        .expect("dx requested");
    let mut dc1 = m.convs[1]
        .backward(p, &cache.blocks[1], &mut dc2, g, true)
        .expect("dx requested");
    m.convs[0].backward(p, &cache.blocks[0], &mut dc1, g, false);
}

/// Pyramid level a box pools from.
pub fn level_for_box(arch: &ArchConfig, b: &BoundingBox) -> usize {
    if b.area().sqrt() < arch.level_split {
        0
    } else {
        1
    }
}

pub(crate) struct RoiCache {
    levels: Vec<usize>,
    taps: Vec<Vec<BinTaps>>,
    pooled: Vec<f64>,
    h1: Vec<f64>,
    h2: Vec<f64>,
}

/// RoI heads over `proposals`: RoIAlign from the scale-matched level, two
/// hidden layers, then the four heads.
pub fn roi_forward(
    params: &ModelParams,
    feats: &Features,
    proposals: &[BoundingBox],
) -> RoiOutputs {
    roi_forward_cached(params, feats, proposals).0
}

pub(crate) fn roi_forward_cached(
    params: &ModelParams,
    feats: &Features,
    proposals: &[BoundingBox],
) -> (RoiOutputs, RoiCache) {
    let a = &params.arch;
    let m = Modules::new(params);
    let p = &params.values;
    let d = a.roi_features();
    let r = proposals.len();
    let mut pooled = vec![0.0; r * d];
    let mut levels = Vec::with_capacity(r);
    let mut taps = Vec::with_capacity(r);
    for (i, b) in proposals.iter().enumerate() {
        let level = level_for_box(a, b);
        let map = &feats.levels[level];
        let (out, t) = layers::roi_align(
            &map.data,
            map.channels,
            map.height,
            map.width,
            map.stride,
            [b.x1(), b.y1(), b.x2(), b.y2()],
            a.roi_grid,
            a.roi_sampling,
        );
        pooled[i * d..(i + 1) * d].copy_from_slice(&out);
        levels.push(level);
        taps.push(t);
    }
    let h1 = m.fc1.forward(p, &pooled, r);
    let h2 = m.fc2.forward(p, &h1, r);
    let outputs = RoiOutputs {
        num_known: params.num_known(),
        cls: m.cls.forward(p, &h2, r),
        clsbox: m.clsbox.forward(p, &h2, r),
        agnbox: m.agnbox.forward(p, &h2, r),
        iou: m.iou.forward(p, &h2, r),
    };
    let cache = RoiCache {
        levels,
        taps,
        pooled,
        h1,
        h2,
    };
    (outputs, cache)
}

/// Backpropagates RoI-output gradients; returns gradients for `[P3, P4]`.
pub(crate) fn roi_backward(
    params: &ModelParams,
    feats: &Features,
    cache: &RoiCache,
    d_out: &RoiOutputs,
    g: &mut [f64],
) -> [Vec<f64>; 2] {
    let m = Modules::new(params);
    let p = &params.values;
    let r = cache.levels.len();
    let mut d_feat = [
        vec![0.0; feats.levels[0].data.len()],
        vec![0.0; feats.levels[1].data.len()],
    ];
    if r == 0 {
        return d_feat;
    }
    let mut dh2 = vec![0.0; cache.h2.len()];
    for (head, dy) in [
        (&m.cls, &d_out.cls),
        (&m.clsbox, &d_out.clsbox),
        (&m.agnbox, &d_out.agnbox),
        (&m.iou, &d_out.iou),
    ] {
        if head.dout == 0 {
            continue;
        }
        let mut dy = dy.clone();
        let dx = head.backward(p, &cache.h2, &[], &mut dy, r, g);
        for (a, b) in dh2.iter_mut().zip(&dx) {
            *a += b;
        }
    }
    let mut dh1 = m.fc2.backward(p, &cache.h1, &cache.h2, &mut dh2, r, g);
    let dpooled = m.fc1.backward(p, &cache.pooled, &cache.h1, &mut dh1, r, g);
    let dd = params.arch.roi_features();
    for i in 0..r {
        let level = cache.levels[i];
        let map = &feats.levels[level];
        layers::roi_align_backward(
            &dpooled[i * dd..(i + 1) * dd],
            &cache.taps[i],
            map.channels,
            map.height * map.width,
            &mut d_feat[level],
        );
    }
    d_feat
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ClassId;

    fn small_arch() -> ArchConfig {
        ArchConfig {
            image_size: 32,
            backbone_channels: [3, 4, 5, 6],
            fpn_channels: 4,
            roi_grid: 2,
            roi_sampling: 2,
            roi_hidden: 8,
            level_split: 12.0,
        }
    }

    fn model() -> ModelParams {
        ModelParams::init(&small_arch(), &[ClassId(1), ClassId(2)], 3).unwrap()
    }

    #[test]
    fn zero_input_gives_finite_outputs() {
        let m = model();
        let (rpn, feats) = forward(&m, &vec![0.0; 3 * 32 * 32]).unwrap();
        assert_eq!(rpn.ctr.len(), 16 + 4);
        assert!(rpn.ctr.iter().all(|v| v.is_finite()));
        assert!(rpn.ltrb.iter().flatten().all(|v| v.is_finite()));
        assert_eq!(feats.levels[0].height, 4);
        assert_eq!(feats.levels[1].height, 2);
    }

    #[test]
    fn forward_is_deterministic_and_checks_shape() {
        let m = model();
        let x: Vec<f64> = (0..3 * 32 * 32)
            .map(|i| ((i * 37) % 101) as f64 / 101.0 - 0.5)
            .collect();
        assert_eq!(forward(&m, &x).unwrap(), forward(&m, &x).unwrap());
        assert!(matches!(forward(&m, &x[1..]), Err(Error::Shape(_))));
    }

    #[test]
    fn forward_sensitive_to_parameters() {
        let m = model();
        let x: Vec<f64> = (0..3 * 32 * 32)
            .map(|i| ((i * 37) % 101) as f64 / 101.0 - 0.5)
            .collect();
        let (base, _) = forward(&m, &x).unwrap();
        let mut changed = m.clone();
        let i = changed.layout.offset("rpn_ctr.b");
        changed.values[i] += 0.1;
        let (out, _) = forward(&changed, &x).unwrap();
        assert_ne!(base.ctr, out.ctr);
    }

    #[test]
    fn roi_shapes_and_duplicates() {
        let m = model();
        let x: Vec<f64> = (0..3 * 32 * 32)
            .map(|i| ((i * 13) % 29) as f64 / 29.0 - 0.5)
            .collect();
        let (_, feats) = forward(&m, &x).unwrap();
        let b = BoundingBox::new(3.0, 4.0, 20.0, 25.0).unwrap();
        let out = roi_forward(&m, &feats, &[b, b]);
        assert_eq!(out.len(), 2);
        assert_eq!(out.cls_logits(0).len(), 3);
        assert_eq!(out.cls_logits(0), out.cls_logits(1));
        assert_eq!(out.class_deltas(0, 1), out.class_deltas(1, 1));
        assert_eq!(out.agn_deltas(0), out.agn_deltas(1));
        assert_eq!(out.iou[0], out.iou[1]);
    }

    #[test]
    fn anchor_grid() {
        let a = anchors(&ArchConfig::default());
        assert_eq!(a.len(), 16 * 16 + 8 * 8);
        assert_eq!(a[0].center, Point::new(4.0, 4.0));
        assert_eq!(a[256].center, Point::new(8.0, 8.0));
        assert_eq!(a[256].level, 1);
    }
}
