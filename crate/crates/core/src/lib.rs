//! Open-world object detection at desk scale.
//!
//! A compact two-stage detector whose proposals are ranked by a learned
//! centerness score, whose RoI heads add a class-agnostic box and an IoU
//! estimate, and whose post-processing flags unknown objects by objectness
//! and per-class Gaussian mixtures over classification logits. Tasks are
//! learned incrementally from a fixed base model using exemplar replay.

pub mod coco;
pub mod continual;
pub mod dataset;
pub mod detector;
pub mod error;
pub mod experiment;
pub mod geometry;
pub mod inference;
pub mod metrics;
pub mod par;
pub mod raster_io;
pub mod synth;

pub use dataset::{
    known_and_unknown, make_task_view, Annotation, ClassId, ClassRegistry, Detection, ImageRecord,
    Label, Provenance, Raster, TaskSchedule,
};
pub use error::{Error, Result};
pub use geometry::{iou, BoundingBox, Point};
pub use par::Exec;
