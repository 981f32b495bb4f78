//! The task loop: exemplar selection, the fine-tune-only regime from a fixed
//! base model, and mixture refresh.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::dataset::{Annotation, ClassId, ClassRegistry, ImageRecord, TaskSchedule};
use crate::detector::{train, LossBreakdown, ModelParams, TrainConfig};
use crate::error::{Error, Result};
use crate::inference::gmm::{fit_gmms, GmmConfig, GmmStore};
use crate::inference::pipeline::collect_class_logits;
use crate::par::Exec;

/// Result of exemplar selection for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExemplarSet {
    pub task: usize,
    /// Unique images in first-queued order.
    pub image_ids: Vec<String>,
    /// Instances of each class of `C^t` contained in the selected images.
    pub class_counts: BTreeMap<ClassId, usize>,
    /// Classes whose queue never reached `n`.
    pub under_sampled: Vec<ClassId>,
    /// True when the data ran out before every queue reached `n`.
    pub exhausted: bool,
    /// `|D^t|`.
    pub source_images: usize,
    #[serde(skip)]
    pub records: Vec<ImageRecord>,
}

/// One bounded FIFO queue per class; each instance pushes its image into its
/// class queue unless that queue already holds `n` entries. Returns the unique
/// union once every queue holds `n` entries, or the partial union with a
/// warning when the data runs out first.
pub fn build_exemplar_set(
    view: &[ImageRecord],
    classes: &[ClassId],
    n: usize,
    task: usize,
) -> ExemplarSet {
    let mut queues: BTreeMap<ClassId, VecDeque<usize>> = classes
        .iter()
        .map(|&c| (c, VecDeque::with_capacity(n)))
        .collect();
    let full = |q: &BTreeMap<ClassId, VecDeque<usize>>| q.values().all(|v| v.len() >= n);
    let mut exhausted = true;
    if n == 0 || full(&queues) {
        exhausted = false;
    } else {
        for (i, img) in view.iter().enumerate() {
            for a in &img.annotations {
                if let Some(q) = queues.get_mut(&a.class_id) {
                    if q.len() < n {
                        q.push_back(i);
                    }
                }
            }
            if full(&queues) {
                exhausted = false;
                break;
            }
        }
    }
    let mut chosen: Vec<usize> = Vec::new();
    let mut seen = BTreeSet::new();
    for q in queues.values() {
        for &i in q {
            if seen.insert(i) {
                chosen.push(i);
            }
        }
    }
    chosen.sort_unstable();
    let under_sampled: Vec<ClassId> = queues
        .iter()
        .filter(|(_, q)| q.len() < n)
        .map(|(c, _)| *c)
        .collect();
    if exhausted {
        log::warn!(
            "task {task}: data exhausted before every class reached {n} exemplar instances; under-sampled: {under_sampled:?}"
        );
    }
    let records: Vec<ImageRecord> = chosen.iter().map(|&i| view[i].clone()).collect();
    let mut class_counts: BTreeMap<ClassId, usize> = classes.iter().map(|&c| (c, 0)).collect();
    for r in &records {
        for a in &r.annotations {
            if let Some(c) = class_counts.get_mut(&a.class_id) {
                *c += 1;
            }
        }
    }
    ExemplarSet {
        task,
        image_ids: records.iter().map(|r| r.image_id.clone()).collect(),
        class_counts,
        under_sampled,
        exhausted,
        source_images: view.len(),
        records,
    }
}

/// Exemplar sets `R^1..R^t`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ExemplarStore {
    pub sets: BTreeMap<usize, ExemplarSet>,
}

impl ExemplarStore {
    /// Union of `R^1..R^t` with annotations merged across sets.
    pub fn union_up_to(&self, t: usize) -> Result<Vec<ImageRecord>> {
        let mut merged: BTreeMap<String, ImageRecord> = BTreeMap::new();
        let mut order = Vec::new();
        for u in 1..=t {
            let set = self.sets.get(&u).ok_or(Error::MissingExemplars(u))?;
            for r in &set.records {
                match merged.get_mut(&r.image_id) {
                    Some(existing) => {
                        for a in &r.annotations {
                            if !existing.annotations.contains(a) {
                                existing.annotations.push(*a);
                            }
                        }
                    }
                    None => {
                        order.push(r.image_id.clone());
                        merged.insert(r.image_id.clone(), r.clone());
                    }
                }
            }
        }
        Ok(order
            .into_iter()
            .map(|id| merged.remove(&id).expect("inserted"))
            .collect())
    }

    /// True when `|R^u| ≤ fraction · |D^u|` for every stored task.
    pub fn within_fraction(&self, fraction: f64) -> bool {
        self.sets
            .values()
            .all(|s| s.image_ids.len() as f64 <= fraction * s.source_images as f64)
    }
}

/// Source of per-task labelled data `D^t`.
pub trait DataProvider: Sync {
    /// Images containing `C^t` objects, annotations restricted to `C^t`.
    fn task_view(&self, t: usize) -> Result<Vec<ImageRecord>>;
}

/// In-memory provider that logs which task views were requested.
pub struct InMemoryProvider {
    dataset: Vec<ImageRecord>,
    registry: ClassRegistry,
    overrides: BTreeMap<usize, Vec<ImageRecord>>,
    accesses: Mutex<Vec<usize>>,
}

impl InMemoryProvider {
    pub fn new(dataset: Vec<ImageRecord>, schedule: TaskSchedule) -> Result<Self> {
        Ok(Self {
            dataset,
            registry: ClassRegistry::new(schedule, 1)?,
            overrides: BTreeMap::new(),
            accesses: Mutex::new(Vec::new()),
        })
    }

    /// Replaces `D^t`, e.g. with a practical-mode harvest.
    pub fn set_task_view(&mut self, t: usize, view: Vec<ImageRecord>) {
        self.overrides.insert(t, view);
    }

    /// Task indices requested so far, in order.
    pub fn accesses(&self) -> Vec<usize> {
        self.accesses.lock().expect("access log").clone()
    }
}

impl DataProvider for InMemoryProvider {
    fn task_view(&self, t: usize) -> Result<Vec<ImageRecord>> {
        self.accesses.lock().expect("access log").push(t);
        if let Some(v) = self.overrides.get(&t) {
            return Ok(v.clone());
        }
        crate::dataset::make_task_view(&self.dataset, &self.registry, t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContinualConfig {
    /// Minimum instances per class in each exemplar set.
    pub exemplars_per_class: usize,
    /// Bound on `|R^t| / |D^t|`; exceeding it is logged.
    pub max_exemplar_fraction: f64,
    /// Train every task from the base model on exemplars only. When off,
    /// task `t` starts from `M^{t-1}`, trains on `D^t`, then fine-tunes on
    /// the exemplar union.
    pub fine_tune_only: bool,
    /// Epochs of exemplar training for `t > 1`: the whole run under
    /// `fine_tune_only`, otherwise the stage after training on `D^t`.
    pub finetune_epochs: usize,
    pub gmm: GmmConfig,
}

impl Default for ContinualConfig {
    fn default() -> Self {
        Self {
            exemplars_per_class: 25,
            max_exemplar_fraction: 0.2,
            fine_tune_only: true,
            finetune_epochs: 60,
            gmm: GmmConfig::default(),
        }
    }
}

/// Everything produced by one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskState {
    pub task: usize,
    pub params: ModelParams,
    pub gmms: GmmStore,
    pub registry: ClassRegistry,
    /// Images the model was trained on (last stage).
    pub training_images: Vec<String>,
    pub epoch_losses: Vec<LossBreakdown>,
}

/// Base model `M^0` sized for `K^t`. Class rows are keyed by class id, so
/// this is the restriction of the final base model to the known classes.
pub fn base_model(
    arch: &crate::detector::ArchConfig,
    registry: &ClassRegistry,
    seed: u64,
) -> Result<ModelParams> {
    ModelParams::init(arch, &registry.known(), seed)
}

/// Runs task `t`. `previous` is required when `fine_tune_only` is off and
/// `t > 1`.
#[allow(clippy::too_many_arguments)]
pub fn run_task(
    t: usize,
    schedule: &TaskSchedule,
    data: &dyn DataProvider,
    base: &ModelParams,
    previous: Option<&TaskState>,
    store: &mut ExemplarStore,
    cfg: &ContinualConfig,
    train_cfg: &TrainConfig,
) -> Result<TaskState> {
    let registry = ClassRegistry::new(schedule.clone(), t)?;
    for u in 1..t {
        if !store.sets.contains_key(&u) {
            return Err(Error::MissingExemplars(u));
        }
    }
    let d_t = data.task_view(t)?;
    let set = build_exemplar_set(&d_t, registry.current(), cfg.exemplars_per_class, t);
    if set.image_ids.len() as f64 > cfg.max_exemplar_fraction * d_t.len() as f64 {
        log::warn!(
            "task {t}: |R^t| = {} exceeds {:.0}% of |D^t| = {}",
            set.image_ids.len(),
            100.0 * cfg.max_exemplar_fraction,
            d_t.len()
        );
    }
    store.sets.insert(t, set);
    let prior = registry.prior();
    let task_seed = TrainConfig {
        seed: train_cfg.seed.wrapping_add(t as u64 * 1_000_003),
        ..train_cfg.clone()
    };

    let (params, training_images, epoch_losses) = if t == 1 {
        let init = base.with_classes(&registry.known())?;
        let out = train(&init, &d_t, &task_seed, &prior)?;
        (out.params, ids(&d_t), out.epoch_losses)
    } else if cfg.fine_tune_only {
        let init = base.with_classes(&registry.known())?;
        let union = store.union_up_to(t)?;
        let out = train(
            &init,
            &union,
            &finetune_schedule(&task_seed, cfg.finetune_epochs),
            &prior,
        )?;
        (out.params, ids(&union), out.epoch_losses)
    } else {
        let prev = previous.ok_or_else(|| {
            Error::Config(format!(
                "task {t} without fine_tune_only needs the task {} model",
                t - 1
            ))
        })?;
        let init = prev.params.with_classes(&registry.known())?;
        let stage1 = if d_t.is_empty() {
            log::warn!("task {t}: D^t is empty; training on exemplars only");
            crate::detector::TrainOutcome {
                params: init,
                epoch_losses: vec![],
                steps: 0,
            }
        } else {
            train(&init, &d_t, &task_seed, &prior)?
        };
        let union = store.union_up_to(t)?;
        let ft_cfg = TrainConfig {
            epochs: cfg.finetune_epochs.max(1),
            lr_steps: vec![],
            seed: task_seed.seed ^ 0xf1,
            ..task_seed.clone()
        };
        let stage2 = train(&stage1.params, &union, &ft_cfg, &prior)?;
        let mut losses = stage1.epoch_losses;
        losses.extend(stage2.epoch_losses);
        (stage2.params, ids(&union), losses)
    };

    let gmm_source = if t == 1 { d_t } else { store.union_up_to(t)? };
    let gmms = refresh_gmms(&params, &gmm_source, &cfg.gmm, train_cfg.exec)?;
    Ok(TaskState {
        task: t,
        params,
        gmms,
        registry,
        training_images,
        epoch_losses,
    })
}

/// `cfg` with `epochs` epochs and its step-decay epochs scaled to match.
fn finetune_schedule(cfg: &TrainConfig, epochs: usize) -> TrainConfig {
    let epochs = epochs.max(1);
    let scale = epochs as f64 / cfg.epochs.max(1) as f64;
    TrainConfig {
        epochs,
        lr_steps: cfg
            .lr_steps
            .iter()
            .map(|&s| (s as f64 * scale).round() as usize)
            .collect(),
        ..cfg.clone()
    }
}

fn ids(records: &[ImageRecord]) -> Vec<String> {
    records.iter().map(|r| r.image_id.clone()).collect()
}

/// Rebuilds every known class's mixture from `F_cls` logits collected with
/// gt boxes as proposals. Classes with too few samples get a bypass record.
pub fn refresh_gmms(
    params: &ModelParams,
    source: &[ImageRecord],
    cfg: &GmmConfig,
    exec: Exec,
) -> Result<GmmStore> {
    let logits = collect_class_logits(source, params, exec)?;
    fit_gmms(&logits, cfg)
}

/// Annotations of an image restricted to `classes`.
pub fn restrict(rec: &ImageRecord, classes: &BTreeSet<ClassId>) -> Vec<Annotation> {
    rec.annotations
        .iter()
        .filter(|a| classes.contains(&a.class_id))
        .copied()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BoundingBox;

    fn img(id: &str, classes: &[u32]) -> ImageRecord {
        let b = BoundingBox::new(0.0, 0.0, 4.0, 4.0).unwrap();
        ImageRecord {
            image_id: id.into(),
            width: 8,
            height: 8,
            file_name: None,
            annotations: classes
                .iter()
                .map(|&c| Annotation {
                    class_id: ClassId(c),
                    bbox: b,
                })
                .collect(),
            raster: None,
        }
    }

    fn cs(v: &[u32]) -> Vec<ClassId> {
        v.iter().map(|&c| ClassId(c)).collect()
    }

    #[test]
    fn n1_single_class_images_take_the_first_per_class() {
        let view = vec![
            img("a", &[1]),
            img("b", &[1]),
            img("c", &[2]),
            img("d", &[2]),
        ];
        let s = build_exemplar_set(&view, &cs(&[1, 2]), 1, 1);
        assert_eq!(s.image_ids, vec!["a", "c"]);
        assert!(!s.exhausted);
    }

    #[test]
    fn shared_image_covers_everything() {
        let view = vec![img("all", &[1, 2, 3]), img("x", &[1])];
        let s = build_exemplar_set(&view, &cs(&[1, 2, 3]), 1, 1);
        assert_eq!(s.image_ids, vec!["all"]);
    }

    #[test]
    fn exhaustion_returns_partial_union() {
        let view = vec![img("a", &[1]), img("b", &[1])];
        let s = build_exemplar_set(&view, &cs(&[1, 2]), 1, 1);
        assert!(s.exhausted);
        assert_eq!(s.under_sampled, cs(&[2]));
        assert_eq!(s.image_ids, vec!["a"]);
    }

    #[test]
    fn union_merges_annotations() {
        let mut store = ExemplarStore::default();
        let a1 = img("a", &[1]);
        let a2 = img("a", &[3]);
        store
            .sets
            .insert(1, build_exemplar_set(&[a1], &cs(&[1]), 1, 1));
        store.sets.insert(
            2,
            build_exemplar_set(&[a2, img("b", &[3])], &cs(&[3]), 1, 2),
        );
        let u = store.union_up_to(2).unwrap();
        assert_eq!(u.len(), 1);
        assert_eq!(u[0].classes().into_iter().collect::<Vec<_>>(), cs(&[1, 3]));
        assert!(matches!(
            store.union_up_to(3),
            Err(Error::MissingExemplars(3))
        ));
    }
}
