//! The trainable two-stage detector.

pub mod checkpoint;
pub(crate) mod layers;
pub mod loss;
pub mod network;
pub mod params;
pub mod targets;
pub mod train;

pub use checkpoint::Checkpoint;
pub use loss::{build_exclusion_mask, compute_losses, LossBreakdown, LossOptions};
pub use network::{forward, roi_forward, Features, RoiOutputs, RpnOutputs};
pub use params::{ArchConfig, ModelParams};
pub use targets::{
    assign_rpn_targets, centerness_target, decode_ltrb, encode_ltrb, select_proposals, LtrbOffsets,
    Proposal,
};
pub use train::{train, TrainConfig, TrainOutcome};
