//! End-to-end detection, the thresholded baseline, logit collection for
//! mixture fitting, and the detection dump format.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{ClassId, Detection, ImageRecord, Label, Provenance, Raster};
use crate::detector::loss::softmax;
use crate::detector::network::{self, RoiOutputs};
use crate::detector::targets::{select_proposals, BoxCoder, Proposal};
use crate::detector::ModelParams;
use crate::error::{io_err, Error, Result};
use crate::geometry::BoundingBox;
use crate::par::{self, Exec};

use super::gmm::GmmStore;
use super::nms::nms;
use super::scoring::{
    calculate_class_scores_and_boxes, handle_overconfident, objectness, ClassScores, Thresholds,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub thresholds: Thresholds,
    /// Proposals passed to the RoI heads per image.
    pub proposals: usize,
    pub score_floor: f64,
    pub nms_iou: f64,
    /// Highest-scoring detections kept per image.
    pub max_per_image: usize,
    /// The objectness-driven unknown branch.
    pub unknown_detection: bool,
    /// The mixture-based overconfidence check.
    pub gmm_correction: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            thresholds: Thresholds::default(),
            proposals: 100,
            score_floor: 0.05,
            nms_iou: 0.5,
            max_per_image: 50,
            unknown_detection: true,
            gmm_correction: true,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        self.thresholds.validate()?;
        if self.proposals == 0 || self.max_per_image == 0 {
            return Err(Error::Config(
                "inference.proposals and max_per_image must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.score_floor) || !(self.nms_iou > 0.0 && self.nms_iou <= 1.0) {
            return Err(Error::Config(
                "inference.score_floor must be in [0,1) and nms_iou in (0,1]".into(),
            ));
        }
        Ok(())
    }
}

/// Network outputs for one image, kept so thresholds can be re-applied
/// without another forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionEvidence {
    pub proposals: Vec<Proposal>,
    pub roi: RoiOutputs,
    pub classes: Vec<ClassId>,
    pub image_size: f64,
}

impl RegionEvidence {
    pub fn compute(raster: &Raster, params: &ModelParams, proposals: usize) -> Result<Self> {
        let size = params.arch.image_size;
        if raster.width != size || raster.height != size {
            return Err(Error::Shape(format!(
                "raster is {}x{}, the model expects {size}x{size}",
                raster.width, raster.height
            )));
        }
        let (rpn, feats) = network::forward(params, &raster.to_planar())?;
        let proposals = select_proposals(&rpn, proposals, size as f64);
        let boxes: Vec<BoundingBox> = proposals.iter().map(|p| p.bbox).collect();
        let roi = network::roi_forward(params, &feats, &boxes);
        Ok(Self {
            proposals,
            roi,
            classes: params.classes.clone(),
            image_size: size as f64,
        })
    }

    pub fn s_obj(&self, r: usize) -> f64 {
        objectness(self.proposals[r].ctr_logit, self.roi.iou[r])
    }

    pub fn class_scores(&self, r: usize, th: &Thresholds) -> ClassScores {
        let coder = BoxCoder::default();
        let p = &self.proposals[r].bbox;
        let s = self.image_size;
        let known_boxes = (0..self.classes.len())
            .map(|k| coder.decode(p, &self.roi.class_deltas(r, k), s, s))
            .collect();
        let unknown_box = coder.decode(p, &self.roi.agn_deltas(r), s, s);
        calculate_class_scores_and_boxes(
            self.roi.cls_logits(r),
            known_boxes,
            unknown_box,
            self.s_obj(r),
            th,
        )
    }

    /// Open-world decision per region, then NMS, floor and cap. Known
    /// predictions below the score floor are dropped before the mixture
    /// check, so it never promotes a region that was not a detection.
    pub fn detect(&self, gmms: Option<&GmmStore>, cfg: &InferenceConfig) -> Vec<Detection> {
        let th = &cfg.thresholds;
        let mut dets = Vec::with_capacity(self.proposals.len());
        for r in 0..self.proposals.len() {
            let mut scores = self.class_scores(r, th);
            if !cfg.unknown_detection {
                scores.unknown = 0.0;
            }
            let det = match scores.argmax() {
                (Some(_), s_cls) if s_cls < cfg.score_floor => continue,
                (Some(k), s_cls) => {
                    let class = self.classes[k];
                    let revised = match (cfg.gmm_correction, gmms) {
                        (true, Some(g)) => handle_overconfident(
                            class,
                            s_cls,
                            self.roi.cls_logits(r),
                            self.s_obj(r),
                            g,
                            th,
                        ),
                        _ => super::scoring::Revised {
                            label: Label::Known(class),
                            score: s_cls,
                            provenance: Provenance::Classifier,
                        },
                    };
                    Detection {
                        label: revised.label,
                        score: revised.score,
                        bbox: scores.known_boxes[k],
                        provenance: revised.provenance,
                    }
                }
                (None, s) => Detection {
                    label: Label::Unknown,
                    score: s,
                    bbox: scores.unknown_box,
                    provenance: Provenance::Objectness,
                },
            };
            dets.push(det);
        }
        finish(dets, cfg)
    }

    /// Closed-set detection; known detections scoring below
    /// `baseline_unknown` are then relabelled unknown with their score kept.
    pub fn baseline_detect(&self, cfg: &InferenceConfig) -> Vec<Detection> {
        let th = &cfg.thresholds;
        let coder = BoxCoder::default();
        let s = self.image_size;
        let dets: Vec<Detection> = (0..self.proposals.len())
            .filter_map(|r| {
                let p = softmax(self.roi.cls_logits(r));
                let k = (0..self.classes.len())
                    .max_by(|&a, &b| p[a].total_cmp(&p[b]).then(b.cmp(&a)))?;
                Some(Detection {
                    label: Label::Known(self.classes[k]),
                    score: p[k],
                    bbox: coder.decode(&self.proposals[r].bbox, &self.roi.class_deltas(r, k), s, s),
                    provenance: Provenance::Classifier,
                })
            })
            .collect();
        relabel_low_confidence(finish(dets, cfg), th.baseline_unknown)
    }
}

/// Relabels known detections scoring below `threshold` as unknown.
pub fn relabel_low_confidence(dets: Vec<Detection>, threshold: f64) -> Vec<Detection> {
    dets.into_iter()
        .map(|mut d| {
            if matches!(d.label, Label::Known(_)) && d.score < threshold {
                d.label = Label::Unknown;
            }
            d
        })
        .collect()
}

fn finish(dets: Vec<Detection>, cfg: &InferenceConfig) -> Vec<Detection> {
    let mut kept: Vec<Detection> = nms(&dets, cfg.nms_iou)
        .into_iter()
        .filter(|d| d.score >= cfg.score_floor)
        .collect();
    kept.truncate(cfg.max_per_image);
    kept
}

pub fn detect(
    raster: &Raster,
    params: &ModelParams,
    gmms: Option<&GmmStore>,
    cfg: &InferenceConfig,
) -> Result<Vec<Detection>> {
    Ok(RegionEvidence::compute(raster, params, cfg.proposals)?.detect(gmms, cfg))
}

pub fn baseline_threshold_detect(
    raster: &Raster,
    params: &ModelParams,
    cfg: &InferenceConfig,
) -> Result<Vec<Detection>> {
    Ok(RegionEvidence::compute(raster, params, cfg.proposals)?.baseline_detect(cfg))
}

fn raster_of(rec: &ImageRecord) -> Result<&Raster> {
    rec.raster
        .as_ref()
        .ok_or_else(|| Error::MissingRaster(rec.image_id.clone()))
}

/// Region evidence for every image, in order.
pub fn evidence_batch(
    records: &[ImageRecord],
    params: &ModelParams,
    proposals: usize,
    exec: Exec,
) -> Result<Vec<RegionEvidence>> {
    par::map(exec, records, |rec| {
        RegionEvidence::compute(raster_of(rec)?, params, proposals)
    })
    .into_iter()
    .collect()
}

/// `F_cls` logits for every known-class annotation, using the gt box as the
/// region proposal.
pub fn collect_class_logits(
    records: &[ImageRecord],
    params: &ModelParams,
    exec: Exec,
) -> Result<BTreeMap<ClassId, Vec<Vec<f64>>>> {
    let per_image = par::map(exec, records, |rec| -> Result<Vec<(ClassId, Vec<f64>)>> {
        let anns: Vec<_> = rec
            .annotations
            .iter()
            .filter(|a| params.classes.contains(&a.class_id))
            .collect();
        if anns.is_empty() {
            return Ok(vec![]);
        }
        let (_, feats) = network::forward(params, &raster_of(rec)?.to_planar())?;
        let boxes: Vec<BoundingBox> = anns.iter().map(|a| a.bbox).collect();
        let roi = network::roi_forward(params, &feats, &boxes);
        Ok(anns
            .iter()
            .enumerate()
            .map(|(r, a)| (a.class_id, roi.cls_logits(r).to_vec()))
            .collect())
    });
    let mut out: BTreeMap<ClassId, Vec<Vec<f64>>> =
        params.classes.iter().map(|&c| (c, Vec::new())).collect();
    for img in per_image {
        for (c, v) in img? {
            out.entry(c).or_default().push(v);
        }
    }
    Ok(out)
}

/// One line of the detection dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub image_id: String,
    pub label: Label,
    pub score: f64,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub provenance: Provenance,
}

impl DetectionRecord {
    pub fn new(image_id: &str, d: &Detection) -> Self {
        Self {
            image_id: image_id.to_string(),
            label: d.label,
            score: d.score,
            bbox: d.bbox.to_xywh(),
            provenance: d.provenance,
        }
    }

    pub fn to_detection(&self) -> Result<Detection> {
        let [x, y, w, h] = self.bbox;
        Ok(Detection {
            label: self.label,
            score: self.score,
            bbox: BoundingBox::from_xywh(x, y, w, h)?,
            provenance: self.provenance,
        })
    }
}

pub type DetectionsByImage = BTreeMap<String, Vec<Detection>>;

pub fn write_detections(path: &Path, dets: &DetectionsByImage) -> Result<()> {
    let mut out = Vec::new();
    for (id, ds) in dets {
        for d in ds {
            serde_json::to_writer(&mut out, &DetectionRecord::new(id, d))?;
            out.push(b'\n');
        }
    }
    let mut f = std::fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&out).map_err(io_err(path))
}

/// Reads a JSON-lines dump; schema violations report the 1-based line.
pub fn read_detections(path: &Path) -> Result<DetectionsByImage> {
    let f = std::fs::File::open(path).map_err(io_err(path))?;
    let mut out = DetectionsByImage::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let schema = |message: String| Error::Schema {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let rec: DetectionRecord =
            serde_json::from_str(&line).map_err(|e| schema(e.to_string()))?;
        if !(0.0..=1.0).contains(&rec.score) {
            return Err(schema(format!("score {} outside [0,1]", rec.score)));
        }
        let det = rec.to_detection().map_err(|e| schema(e.to_string()))?;
        out.entry(rec.image_id).or_default().push(det);
    }
    Ok(out)
}
