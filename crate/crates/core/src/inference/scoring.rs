//! Objectness fusion, unknown-aware class scoring and the overconfidence check.

use serde::{Deserialize, Serialize};

use crate::dataset::{ClassId, Label, Provenance};
use crate::detector::loss::{sigmoid, softmax};
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;

use super::gmm::{GmmEntry, GmmStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    /// Objectness needed to promote a region to unknown.
    pub theta_obj: f64,
    /// Classifier confidence below which the mixture check runs.
    pub theta_cls: f64,
    /// Every known score must be below this for the unknown branch.
    pub theta_conf: f64,
    /// Baseline: known detections scoring below this become unknown.
    pub baseline_unknown: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            theta_obj: 0.69,
            theta_cls: 0.5,
            theta_conf: 0.05,
            baseline_unknown: 0.2,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("theta_obj", self.theta_obj),
            ("theta_cls", self.theta_cls),
            ("theta_conf", self.theta_conf),
            ("baseline_unknown", self.baseline_unknown),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!(
                    "thresholds.{name} must be in (0,1), got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// `sqrt(σ(ctr) · σ(iou))`.
pub fn objectness(ctr_logit: f64, iou_logit: f64) -> f64 {
    (sigmoid(ctr_logit) * sigmoid(iou_logit)).sqrt()
}

/// Scores over `K^t ∪ {unknown, background}` with one box per known class
/// and a class-agnostic box for unknown.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassScores {
    pub known: Vec<f64>,
    pub unknown: f64,
    pub background: f64,
    pub known_boxes: Vec<BoundingBox>,
    pub unknown_box: BoundingBox,
}

impl ClassScores {
    /// Highest-scoring non-background entry: `Some(k)` for a known class,
    /// `None` for unknown. Known classes win ties.
    pub fn argmax(&self) -> (Option<usize>, f64) {
        let mut best = (None, f64::NEG_INFINITY);
        for (k, &s) in self.known.iter().enumerate() {
            if s > best.1 {
                best = (Some(k), s);
            }
        }
        if self.unknown > best.1 {
            best = (None, self.unknown);
        }
        best
    }
}

/// Softmax over `F_cls`, then the unknown branch: when every known score is
/// below `θ_conf` and `s_obj > θ_obj`, unknown takes `s_obj` and background
/// is zeroed.
pub fn calculate_class_scores_and_boxes(
    cls_logits: &[f64],
    known_boxes: Vec<BoundingBox>,
    unknown_box: BoundingBox,
    s_obj: f64,
    th: &Thresholds,
) -> ClassScores {
    let p = softmax(cls_logits);
    let k = cls_logits.len() - 1;
    let mut scores = ClassScores {
        known: p[..k].to_vec(),
        unknown: 0.0,
        background: p[k],
        known_boxes,
        unknown_box,
    };
    if scores.known.iter().all(|&s| s < th.theta_conf) && s_obj > th.theta_obj {
        scores.unknown = s_obj;
        scores.background = 0.0;
    }
    scores
}

/// A label decision after the overconfidence check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Revised {
    pub label: Label,
    pub score: f64,
    pub provenance: Provenance,
}

/// Low-confidence known predictions (`s_cls < θ_cls`) whose logits fall below
/// the class mixture's likelihood threshold become unknown with score `s_obj`.
/// Classes without a fitted mixture pass through.
pub fn handle_overconfident(
    class: ClassId,
    s_cls: f64,
    cls_logits: &[f64],
    s_obj: f64,
    gmms: &GmmStore,
    th: &Thresholds,
) -> Revised {
    let keep = Revised {
        label: Label::Known(class),
        score: s_cls,
        provenance: Provenance::Classifier,
    };
    if s_cls >= th.theta_cls {
        return keep;
    }
    match gmms.get(class) {
        Some(GmmEntry::Fitted(g)) => {
            if g.mixture.log_likelihood(cls_logits) < g.theta_like {
                Revised {
                    label: Label::Unknown,
                    score: s_obj,
                    provenance: Provenance::Objectness,
                }
            } else {
                keep
            }
        }
        Some(GmmEntry::Bypass { .. }) => keep,
        None => {
            log::debug!("no mixture for class {class}; prediction passes through");
            keep
        }
    }
}
