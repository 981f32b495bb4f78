//! Per-image target planning, loss gradients and the SGD loop.

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{ClassId, ImageRecord};
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::par::{self, Exec};

use super::loss::{
    attach_iou_targets, build_exclusion_mask, losses_and_grads, sigmoid, LossBreakdown, LossOptions,
};
use super::network::{self, level_for_box};
use super::params::ModelParams;
use super::targets::{
    assign_rpn_targets, label_rois, sample_training_rois, select_proposals, BoxCoder, RoiSampling,
    RoiTarget, RpnTarget,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs (0-based) at which the learning rate is multiplied by `lr_decay`.
    pub lr_steps: Vec<usize>,
    pub lr_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Anchors supervised per image for `R_ctr` and `R_box`.
    pub anchor_samples: usize,
    pub rois: RoiSampling,
    pub seed: u64,
    /// Exclusion-mask gate on prior-class softmax.
    pub theta_cls: f64,
    /// Exclusion-mask gate on objectness.
    pub theta_obj: f64,
    pub class_agnostic: bool,
    pub prior_class_handling: bool,
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 24,
            batch_size: 8,
            learning_rate: 0.02,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_steps: vec![16, 21],
            lr_decay: 0.1,
            grad_clip: 10.0,
            anchor_samples: 64,
            rois: RoiSampling::default(),
            seed: 0,
            theta_cls: 0.5,
            theta_obj: 0.69,
            class_agnostic: true,
            prior_class_handling: true,
            exec: Exec::Parallel,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train.{m}")));
        if self.epochs == 0 || self.batch_size == 0 || self.anchor_samples == 0 {
            return bad("epochs, batch_size and anchor_samples must be positive");
        }
        if !(self.learning_rate > 0.0) || !(self.lr_decay > 0.0) {
            return bad("learning_rate and lr_decay must be > 0");
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return bad("momentum must be in [0,1), weight_decay and grad_clip >= 0");
        }
        for v in [self.theta_cls, self.theta_obj] {
            if !(v > 0.0 && v < 1.0) {
                return bad("theta_cls and theta_obj must be in (0,1)");
            }
        }
        let r = &self.rois;
        if !(r.background_iou <= r.positive_iou && r.positive_iou <= 1.0) {
            return bad("rois thresholds must satisfy background_iou <= positive_iou <= 1");
        }
        Ok(())
    }

    pub fn loss_options(&self) -> LossOptions {
        LossOptions {
            class_agnostic: self.class_agnostic,
        }
    }
}

/// Frozen supervision for one image: sampled anchors, regions, their
/// targets (including `F_iou` targets) and the exclusion mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlan {
    pub input: Vec<f64>,
    pub gts: Vec<(BoundingBox, usize)>,
    pub rpn_targets: Vec<RpnTarget>,
    pub regions: Vec<BoundingBox>,
    pub roi_targets: Vec<RoiTarget>,
    pub mask: Vec<bool>,
}

fn image_input(params: &ModelParams, rec: &ImageRecord) -> Result<Vec<f64>> {
    let raster = rec
        .raster
        .as_ref()
        .ok_or_else(|| Error::MissingRaster(rec.image_id.clone()))?;
    let s = params.arch.image_size;
    if raster.width != s || raster.height != s {
        return Err(Error::Shape(format!(
            "image {} is {}x{}, the model expects {s}x{s}",
            rec.image_id, raster.width, raster.height
        )));
    }
    Ok(raster.to_planar())
}

/// Samples targets for `rec` under the current parameters.
pub fn plan_image(
    params: &ModelParams,
    rec: &ImageRecord,
    cfg: &TrainConfig,
    prior: &[ClassId],
    rng: &mut ChaCha8Rng,
) -> Result<ImagePlan> {
    let input = image_input(params, rec)?;
    let size = params.arch.image_size as f64;
    let gts: Vec<(BoundingBox, usize)> = rec
        .annotations
        .iter()
        .filter_map(|a| {
            let k = params.classes.iter().position(|c| *c == a.class_id)?;
            Some((a.bbox, k))
        })
        .collect();
    let gt_boxes: Vec<BoundingBox> = gts.iter().map(|g| g.0).collect();
    let (rpn, feats) = network::forward(params, &input)?;
    let rpn_targets = assign_rpn_targets(&rpn.anchors, &gt_boxes, cfg.anchor_samples, rng);
    let proposals = select_proposals(&rpn, cfg.rois.proposals, size);
    let regions = sample_training_rois(&gt_boxes, &proposals, &cfg.rois, size, rng);
    let roi = network::roi_forward(params, &feats, &regions);
    let coder = BoxCoder::default();
    let mut roi_targets = label_rois(&regions, &gts, &cfg.rois, &coder);
    attach_iou_targets(
        &roi,
        &regions,
        &gt_boxes,
        &mut roi_targets,
        cfg.rois.iou_head_min_overlap,
        &coder,
        size,
    );
    let prior_idx: Vec<usize> = prior
        .iter()
        .filter_map(|c| params.classes.iter().position(|k| k == c))
        .collect();
    let mask = if cfg.prior_class_handling && !prior_idx.is_empty() {
        let s_obj: Vec<f64> = regions
            .iter()
            .enumerate()
            .map(|(r, b)| {
                let level = level_for_box(&params.arch, b);
                let ctr = rpn.ctr_logit_at(&params.arch, level, b.center());
                (sigmoid(ctr) * sigmoid(roi.iou[r])).sqrt()
            })
            .collect();
        build_exclusion_mask(
            &roi,
            &s_obj,
            &regions,
            &gt_boxes,
            &prior_idx,
            cfg.theta_cls,
            cfg.theta_obj,
        )
    } else {
        vec![false; regions.len()]
    };
    Ok(ImagePlan {
        input,
        gts,
        rpn_targets,
        regions,
        roi_targets,
        mask,
    })
}

/// Total loss for a frozen plan.
pub fn plan_loss(
    params: &ModelParams,
    plan: &ImagePlan,
    opts: &LossOptions,
) -> Result<LossBreakdown> {
    let (rpn, feats) = network::forward(params, &plan.input)?;
    let roi = network::roi_forward(params, &feats, &plan.regions);
    Ok(super::loss::compute_losses(
        &rpn,
        &plan.rpn_targets,
        &roi,
        &plan.roi_targets,
        &plan.mask,
        opts,
    ))
}

/// Loss and its gradient with respect to every parameter, for a frozen plan.
pub fn plan_gradient(
    params: &ModelParams,
    plan: &ImagePlan,
    opts: &LossOptions,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let (rpn, feats, cache) = network::forward_cached(params, &plan.input)?;
    let (roi, roi_cache) = network::roi_forward_cached(params, &feats, &plan.regions);
    let (loss, d_rpn, d_roi) = losses_and_grads(
        &rpn,
        &plan.rpn_targets,
        &roi,
        &plan.roi_targets,
        &plan.mask,
        opts,
    );
    let mut g = vec![0.0; params.values.len()];
    let d_feat = network::roi_backward(params, &feats, &roi_cache, &d_roi, &mut g);
    network::backward(params, &cache, &d_rpn, d_feat, &mut g);
    Ok((loss, g))
}

/// Per-image RNG keyed by seed, epoch and image position.
fn image_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Mean loss per epoch.
    pub epoch_losses: Vec<LossBreakdown>,
    pub steps: usize,
}

/// SGD with momentum, weight decay, step decay and gradient clipping.
///
/// Per-image gradients are computed through [`par::map`] and summed in
/// image order, so results do not depend on the execution mode.
pub fn train(
    params: &ModelParams,
    view: &[ImageRecord],
    cfg: &TrainConfig,
    prior: &[ClassId],
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if view.is_empty() {
        return Err(Error::Config(
            "cannot train on an empty dataset view".into(),
        ));
    }
    let mut params = params.clone();
    let mut velocity = vec![0.0; params.values.len()];
    let mut order: Vec<usize> = (0..view.len()).collect();
    let opts = cfg.loss_options();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut lr = cfg.learning_rate;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        if cfg.lr_steps.contains(&epoch) {
            lr *= cfg.lr_decay;
        }
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        shuffle_rng.set_stream(u64::MAX - epoch as u64);
        order.shuffle(&mut shuffle_rng);
        let mut sum = LossBreakdown::default();
        for batch in order.chunks(cfg.batch_size) {
            let current = &params;
            let results = par::map(cfg.exec, batch, |&i| {
                let mut rng = image_rng(cfg.seed, epoch, i);
                let plan = plan_image(current, &view[i], cfg, prior, &mut rng)?;
                plan_gradient(current, &plan, &opts)
            });
            let mut grad = vec![0.0; params.values.len()];
            let mut batch_loss = LossBreakdown::default();
            for r in results {
                let (loss, g) = r?;
                batch_loss = batch_loss.add(&loss);
                for (a, b) in grad.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    detail: format!("{batch_loss:?}"),
                });
            }
            let inv = 1.0 / batch.len() as f64;
            for (gi, w) in grad.iter_mut().zip(&params.values) {
                *gi = *gi * inv + cfg.weight_decay * w;
            }
            let norm = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !norm.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    detail: "non-finite gradient".into(),
                });
            }
            let clip = if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
                cfg.grad_clip / norm
            } else {
                1.0
            };
            for ((w, v), g) in params.values.iter_mut().zip(&mut velocity).zip(&grad) {
                *v = cfg.momentum * *v + g * clip;
                *w -= lr * *v;
            }
            sum = sum.add(&batch_loss);
            step += 1;
        }
        let mean = sum.scale(1.0 / view.len() as f64);
        debug!("epoch {epoch}: {mean:?}");
        epoch_losses.push(mean);
    }
    if let Some(last) = epoch_losses.last() {
        info!(
            "trained {} images for {} epochs, final loss {:.4}",
            view.len(),
            cfg.epochs,
            last.total
        );
    }
    Ok(TrainOutcome {
        params,
        epoch_losses,
        steps: step,
    })
}
