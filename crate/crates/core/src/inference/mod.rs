//! Decision logic on top of the network outputs.

pub mod gmm;
pub mod nms;
pub mod pipeline;
pub mod scoring;

pub use gmm::{fit_gmms, GaussianMixturePerClass, GmmConfig, GmmEntry, GmmStore};
pub use nms::nms;
pub use pipeline::{
    baseline_threshold_detect, detect, read_detections, write_detections, DetectionsByImage,
    InferenceConfig, RegionEvidence,
};
pub use scoring::{
    calculate_class_scores_and_boxes, handle_overconfident, objectness, ClassScores, Thresholds,
};
