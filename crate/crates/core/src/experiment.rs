//! Reproducible experiments: the run configuration, dataset synthesis on
//! disk, the task protocol, practical mode, threshold sweeps and offline
//! evaluation of detection dumps.
//!
//! Run directory layout, one subdirectory per task:
//!
//! ```text
//! <run>/manifest.json
//! <run>/metrics.csv
//! <run>/task-01/checkpoint.owck
//! <run>/task-01/gmms.json
//! <run>/task-01/exemplars.json
//! <run>/task-01/metrics.json
//! <run>/task-01/detections.jsonl
//! <run>/task-01/manifest.json
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::coco::{self, CocoFile};
use crate::continual::{
    run_task, ContinualConfig, DataProvider, ExemplarSet, ExemplarStore, InMemoryProvider,
    TaskState,
};
use crate::dataset::{ClassId, ClassRegistry, ImageRecord, Label, TaskSchedule};
use crate::detector::{ArchConfig, Checkpoint, ModelParams, TrainConfig};
use crate::error::{io_err, Error, Result};
use crate::geometry::{iou, BoundingBox};
use crate::inference::pipeline::evidence_batch;
use crate::inference::{
    read_detections, write_detections, DetectionsByImage, GmmStore, InferenceConfig, RegionEvidence,
};
use crate::metrics::practical::HarvestStats;
use crate::metrics::{
    a_ose, evaluate, harvest_from_detections, match_detections, u_recall, EvalFrame, MetricsReport,
    RULES_VERSION,
};
use crate::raster_io;
use crate::synth::{generate_dataset, SceneConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Dataset directory written by synthesis and read by every run.
    pub data: PathBuf,
    /// Run directory for checkpoints, reports and plots.
    pub run: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data: PathBuf::from("data/synthetic"),
            run: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_images: usize,
    pub test_images: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_images: 200,
            test_images: 60,
        }
    }
}

/// Component switches matching the progressive ablation rows. They take
/// precedence over the corresponding fields of the nested sections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Toggles {
    pub fine_tune_only: bool,
    /// Class-agnostic box and IoU heads plus the objectness unknown branch.
    pub class_agnostic_detection: bool,
    pub gmm_correction: bool,
    pub prior_class_handling: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            fine_tune_only: true,
            class_agnostic_detection: true,
            gmm_correction: true,
            prior_class_handling: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub wi_recall_level: f64,
    /// Overlap needed for practical-mode harvesting.
    pub harvest_iou: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            wi_recall_level: 0.8,
            harvest_iou: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    ThetaObj,
    ThetaConf,
    ThetaCls,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::ThetaObj => "theta_obj",
            SweepParam::ThetaConf => "theta_conf",
            SweepParam::ThetaCls => "theta_cls",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Task whose checkpoint is swept.
    pub task: usize,
    pub theta_obj: Vec<f64>,
    pub theta_conf: Vec<f64>,
    pub theta_cls: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        let coarse = vec![0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];
        Self {
            task: 1,
            theta_obj: vec![0.3, 0.4, 0.5, 0.6, 0.65, 0.69, 0.75, 0.8, 0.85, 0.9],
            theta_conf: coarse.clone(),
            theta_cls: coarse,
        }
    }
}

impl SweepConfig {
    pub fn grid(&self, p: SweepParam) -> &[f64] {
        match p {
            SweepParam::ThetaObj => &self.theta_obj,
            SweepParam::ThetaConf => &self.theta_conf,
            SweepParam::ThetaCls => &self.theta_cls,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    /// Tasks as lists of category ids; ignored when `schedule_file` is set.
    pub schedule: Vec<Vec<u32>>,
    pub schedule_file: Option<PathBuf>,
    pub data: DataConfig,
    pub scene: SceneConfig,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    pub continual: ContinualConfig,
    pub toggles: Toggles,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: Paths::default(),
            schedule: vec![vec![1, 2], vec![3, 4], vec![5, 6], vec![7, 8]],
            schedule_file: None,
            data: DataConfig::default(),
            scene: SceneConfig::default(),
            arch: ArchConfig::default(),
            train: TrainConfig::default(),
            inference: InferenceConfig::default(),
            continual: ContinualConfig::default(),
            toggles: Toggles::default(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

/// The sections actually used by a run, after the seed and toggles are applied.
#[derive(Debug, Clone, PartialEq)]
pub struct Effective {
    pub scene: SceneConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    pub continual: ContinualConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical TOML serialization.
    pub fn hash(&self) -> Result<String> {
        Ok(hex(&Sha256::digest(self.to_toml()?.as_bytes())))
    }

    pub fn schedule(&self) -> Result<TaskSchedule> {
        match &self.schedule_file {
            Some(p) => coco::read_schedule(p),
            None => {
                let tasks: Vec<&[u32]> = self.schedule.iter().map(Vec::as_slice).collect();
                TaskSchedule::from_ids(&tasks)
            }
        }
    }

    pub fn effective(&self) -> Effective {
        let t = self.toggles;
        let mut scene = self.scene.clone();
        scene.seed = self.seed;
        let mut train = self.train.clone();
        train.seed = self.seed;
        train.class_agnostic = t.class_agnostic_detection;
        train.prior_class_handling = t.prior_class_handling;
        let mut inference = self.inference.clone();
        inference.unknown_detection = t.class_agnostic_detection;
        inference.gmm_correction = t.gmm_correction;
        let mut continual = self.continual.clone();
        continual.fine_tune_only = t.fine_tune_only;
        continual.gmm.seed = self.seed;
        Effective {
            scene,
            train,
            inference,
            continual,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let e = self.effective();
        e.scene.validate()?;
        e.train.validate()?;
        e.inference.validate()?;
        e.continual.gmm.validate()?;
        let schedule = self.schedule()?;
        let available: BTreeSet<ClassId> = e.scene.shape_classes.iter().map(|c| c.id).collect();
        let missing: Vec<u32> = schedule
            .universe()
            .into_iter()
            .filter(|c| !available.contains(c))
            .map(|c| c.0)
            .collect();
        if !missing.is_empty() {
            return Err(Error::Config(format!(
                "schedule needs classes {missing:?} but the scene defines only {} shape classes",
                available.len()
            )));
        }
        let universe: BTreeSet<ClassId> = schedule.universe().into_iter().collect();
        let extra: Vec<u32> = available.difference(&universe).map(|c| c.0).collect();
        if !extra.is_empty() {
            return Err(Error::Config(format!(
                "scene classes {extra:?} are not in the schedule; every synthesized class must belong to a task"
            )));
        }
        if self.arch.image_size != e.scene.image_size {
            return Err(Error::Config(format!(
                "arch.image_size {} differs from scene.image_size {}",
                self.arch.image_size, e.scene.image_size
            )));
        }
        if self.data.train_images == 0 || self.data.test_images == 0 {
            return Err(Error::Config(
                "data.train_images and data.test_images must be positive".into(),
            ));
        }
        let ev = &self.eval;
        if !(ev.iou_threshold > 0.0 && ev.iou_threshold <= 1.0)
            || !(ev.harvest_iou > 0.0 && ev.harvest_iou <= 1.0)
        {
            return Err(Error::Config("eval IoU thresholds must be in (0,1]".into()));
        }
        if !(ev.wi_recall_level > 0.0 && ev.wi_recall_level <= 1.0) {
            return Err(Error::Config(
                "eval.wi_recall_level must be in (0,1]".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.continual.max_exemplar_fraction) {
            return Err(Error::Config(
                "continual.max_exemplar_fraction must be in [0,1]".into(),
            ));
        }
        Ok(())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Reproducibility record written next to every output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub task: Option<usize>,
    pub package: String,
    pub version: String,
    pub rules_version: String,
    /// `M^0` is a fixed random initialisation, not a pretrained network.
    pub base_model: String,
}

impl Manifest {
    pub fn new(command: &str, cfg: &RunConfig, task: Option<usize>) -> Result<Self> {
        Ok(Self {
            command: command.to_string(),
            config_hash: cfg.hash()?,
            seed: cfg.seed,
            task,
            package: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            rules_version: RULES_VERSION.to_string(),
            base_model: format!("random-init seed {}", cfg.seed),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(serde_json::from_str(&text)?)
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(io_err(path))
}

/// Train and test splits. Test scenes continue the index sequence after
/// the training scenes.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Vec<ImageRecord>,
    pub test: Vec<ImageRecord>,
}

pub fn synthesize(cfg: &RunConfig) -> Result<Splits> {
    cfg.validate()?;
    let e = cfg.effective();
    let mut all = generate_dataset(
        &e.scene,
        cfg.data.train_images + cfg.data.test_images,
        e.train.exec,
    )?;
    let test = all.split_off(cfg.data.train_images);
    Ok(Splits { train: all, test })
}

pub const TRAIN_FILE: &str = "train.json";
pub const TEST_FILE: &str = "test.json";
pub const RASTER_FILE: &str = "rasters.owra";
pub const SCHEDULE_FILE: &str = "schedule.json";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes the dataset, its annotation files, schedule and manifest. A
/// directory holding a dataset from a different configuration is refused.
pub fn write_dataset(dir: &Path, cfg: &RunConfig, splits: &Splits) -> Result<()> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let scene_hash = scene_hash(cfg)?;
    if manifest_path.exists() {
        let existing: DatasetManifest = read_json(&manifest_path)?;
        if existing.scene_hash != scene_hash {
            return Err(Error::Config(format!(
                "{} already holds a dataset from a different configuration; remove it or choose another path",
                dir.display()
            )));
        }
    } else if dir.exists() && fs::read_dir(dir).map_err(io_err(dir))?.next().is_some() {
        return Err(Error::Config(format!(
            "{} exists and is not a dataset directory",
            dir.display()
        )));
    }
    create_dir(dir)?;
    let e = cfg.effective();
    CocoFile::from_records(&splits.train, e.scene.categories()).write(&dir.join(TRAIN_FILE))?;
    CocoFile::from_records(&splits.test, e.scene.categories()).write(&dir.join(TEST_FILE))?;
    let rasters = splits
        .train
        .iter()
        .chain(&splits.test)
        .map(|r| {
            r.raster
                .as_ref()
                .map(|x| (r.image_id.as_str(), x))
                .ok_or_else(|| Error::MissingRaster(r.image_id.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    raster_io::write_archive(rasters, &dir.join(RASTER_FILE))?;
    coco::write_schedule(&cfg.schedule()?, &dir.join(SCHEDULE_FILE))?;
    write_json(
        &manifest_path,
        &DatasetManifest {
            scene_hash,
            seed: cfg.seed,
            train_images: splits.train.len(),
            test_images: splits.test.len(),
            scene: e.scene,
        },
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DatasetManifest {
    scene_hash: String,
    seed: u64,
    train_images: usize,
    test_images: usize,
    scene: SceneConfig,
}

fn scene_hash(cfg: &RunConfig) -> Result<String> {
    let key = (cfg.effective().scene, &cfg.data, cfg.schedule()?);
    Ok(hex(&Sha256::digest(serde_json::to_vec(&key)?)))
}

/// Reads a dataset directory written by [`write_dataset`] for this
/// configuration. A dataset synthesized from different scene settings is
/// refused.
pub fn read_dataset(dir: &Path, cfg: &RunConfig) -> Result<Splits> {
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.exists() {
        return Err(Error::Config(format!(
            "no dataset at {}; run `owod synth` first",
            dir.display()
        )));
    }
    let manifest: DatasetManifest = read_json(&manifest_path)?;
    if manifest.scene_hash != scene_hash(cfg)? {
        return Err(Error::Config(format!(
            "dataset at {} was synthesized from a different configuration",
            dir.display()
        )));
    }
    let schedule = &cfg.schedule()?;
    let rasters = raster_io::read_archive(&dir.join(RASTER_FILE))?;
    let load = |name: &str| -> Result<Vec<ImageRecord>> {
        let mut records = CocoFile::read(&dir.join(name))?.to_records(Some(schedule))?;
        for r in &mut records {
            r.raster = Some(
                rasters
                    .get(&r.image_id)
                    .cloned()
                    .ok_or_else(|| Error::MissingRaster(r.image_id.clone()))?,
            );
        }
        Ok(records)
    };
    Ok(Splits {
        train: load(TRAIN_FILE)?,
        test: load(TEST_FILE)?,
    })
}

/// Detections under `cfg` from precomputed evidence.
pub fn detect_all(
    records: &[ImageRecord],
    evidence: &[RegionEvidence],
    gmms: Option<&GmmStore>,
    cfg: &InferenceConfig,
) -> DetectionsByImage {
    records
        .iter()
        .zip(evidence)
        .map(|(r, e)| (r.image_id.clone(), e.detect(gmms, cfg)))
        .collect()
}

pub fn report_for(
    test: &[ImageRecord],
    dets: &DetectionsByImage,
    registry: &ClassRegistry,
    eval: &EvalConfig,
) -> MetricsReport {
    let frame = EvalFrame::build(test, dets, registry, eval.iou_threshold);
    evaluate(&frame, registry, eval.wi_recall_level)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarvestSummary {
    pub stats: HarvestStats,
    /// Images and annotations of the fully labelled `D^t`.
    pub full_images: usize,
    pub full_annotations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskOutcome {
    pub state: TaskState,
    pub report: MetricsReport,
    pub detections: DetectionsByImage,
    /// Test-set evidence, kept for re-thresholding.
    pub evidence: Vec<RegionEvidence>,
    pub exemplars: ExemplarSet,
    pub harvest: Option<HarvestSummary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolOutcome {
    pub tasks: Vec<TaskOutcome>,
    pub store: ExemplarStore,
}

impl ProtocolOutcome {
    pub fn reports(&self) -> Vec<MetricsReport> {
        self.tasks.iter().map(|t| t.report.clone()).collect()
    }
}

/// Base model `M^0` sized for every class in the schedule.
pub fn base_model(cfg: &RunConfig, schedule: &TaskSchedule) -> Result<ModelParams> {
    ModelParams::init(&cfg.arch, &schedule.universe(), cfg.seed)
}

/// Runs tasks `1..=last` and evaluates each on the test split. In practical
/// mode, `D^t` for `t > 1` is harvested from the previous model's unknown
/// detections on the task-`t` training images.
pub fn run_protocol(
    cfg: &RunConfig,
    splits: &Splits,
    last: Option<usize>,
    practical: bool,
    on_task: impl FnMut(&TaskOutcome) -> Result<()>,
) -> Result<ProtocolOutcome> {
    let empty = ProtocolOutcome {
        tasks: vec![],
        store: ExemplarStore::default(),
    };
    extend_protocol(cfg, splits, empty, last, practical, on_task)
}

/// Continues a protocol run from the tasks already in `done`.
pub fn extend_protocol(
    cfg: &RunConfig,
    splits: &Splits,
    done: ProtocolOutcome,
    last: Option<usize>,
    practical: bool,
    mut on_task: impl FnMut(&TaskOutcome) -> Result<()>,
) -> Result<ProtocolOutcome> {
    cfg.validate()?;
    let e = cfg.effective();
    let schedule = cfg.schedule()?;
    let last = last.unwrap_or(schedule.len());
    schedule.check(last)?;
    let mut provider = InMemoryProvider::new(splits.train.clone(), schedule.clone())?;
    let base = base_model(cfg, &schedule)?;
    let ProtocolOutcome {
        mut tasks,
        mut store,
    } = done;
    for t in tasks.len() + 1..=last {
        let mut harvest = None;
        if practical && t > 1 {
            let prev = &tasks[t - 2].state;
            let full = provider.task_view(t)?;
            let evidence =
                evidence_batch(&full, &prev.params, e.inference.proposals, e.train.exec)?;
            let dets = detect_all(&full, &evidence, Some(&prev.gmms), &e.inference);
            let next: BTreeSet<ClassId> = schedule.task(t)?.iter().copied().collect();
            let h = harvest_from_detections(&full, &dets, &next, cfg.eval.harvest_iou);
            if h.harvested == 0 {
                log::warn!(
                    "task {t}: practical mode harvested no regions; training on exemplars only"
                );
            }
            log::info!(
                "task {t}: harvested {} regions from {} unknown detections ({} of {} images)",
                h.harvested,
                h.unknown_detections,
                h.dataset.len(),
                full.len()
            );
            harvest = Some(HarvestSummary {
                stats: h.stats(),
                full_images: full.len(),
                full_annotations: full.iter().map(|r| r.annotations.len()).sum(),
            });
            provider.set_task_view(t, h.dataset);
        }
        log::info!("task {t}: training");
        let previous = tasks.last().map(|o| &o.state);
        let state = run_task(
            t,
            &schedule,
            &provider,
            &base,
            previous,
            &mut store,
            &e.continual,
            &e.train,
        )
        .map_err(|err| match err {
            e @ Error::Diverged { .. } => Error::Task {
                task: t,
                source: Box::new(e),
            },
            other => other,
        })?;
        let evidence = evidence_batch(
            &splits.test,
            &state.params,
            e.inference.proposals,
            e.train.exec,
        )?;
        let dets = detect_all(&splits.test, &evidence, Some(&state.gmms), &e.inference);
        let report = report_for(&splits.test, &dets, &state.registry, &cfg.eval);
        log::info!(
            "task {t}: mAP {} U-Recall {} A-OSE {}",
            fmt_opt(report.map_both),
            fmt_opt(report.u_recall),
            report.a_ose
        );
        let outcome = TaskOutcome {
            exemplars: store.sets[&t].clone(),
            state,
            report,
            detections: dets,
            evidence,
            harvest,
        };
        on_task(&outcome)?;
        tasks.push(outcome);
    }
    Ok(ProtocolOutcome { tasks, store })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |x| format!("{:.1}", 100.0 * x))
}

pub fn task_dir(run: &Path, t: usize) -> PathBuf {
    run.join(format!("task-{t:02}"))
}

/// Writes one task's artifacts into `task-0t/`.
pub fn write_task(run: &Path, cfg: &RunConfig, command: &str, outcome: &TaskOutcome) -> Result<()> {
    let t = outcome.state.task;
    let dir = task_dir(run, t);
    create_dir(&dir)?;
    Checkpoint {
        params: outcome.state.params.clone(),
        registry: Some(outcome.state.registry.clone()),
        train: Some(cfg.effective().train),
    }
    .save(&dir.join("checkpoint.owck"))?;
    outcome.state.gmms.write(&dir.join("gmms.json"))?;
    write_json(&dir.join("exemplars.json"), &outcome.exemplars)?;
    write_json(&dir.join("metrics.json"), &TaskRecord::from(outcome))?;
    write_detections(&dir.join("detections.jsonl"), &outcome.detections)?;
    Manifest::new(command, cfg, Some(t))?.write(&dir.join(MANIFEST_FILE))
}

/// Contents of a task's `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub report: MetricsReport,
    pub known_classes: Vec<ClassId>,
    pub training_images: usize,
    pub exemplar_images: usize,
    pub harvest: Option<HarvestSummary>,
    pub final_loss: Option<f64>,
}

impl From<&TaskOutcome> for TaskRecord {
    fn from(o: &TaskOutcome) -> Self {
        Self {
            report: o.report.clone(),
            known_classes: o.state.registry.known(),
            training_images: o.state.training_images.len(),
            exemplar_images: o.exemplars.image_ids.len(),
            harvest: o.harvest.clone(),
            final_loss: o.state.epoch_losses.last().map(|l| l.total),
        }
    }
}

/// Task records found under a run directory, in task order.
pub fn read_task_records(run: &Path) -> Result<Vec<TaskRecord>> {
    let mut out = Vec::new();
    for t in 1.. {
        let path = task_dir(run, t).join("metrics.json");
        if !path.exists() {
            break;
        }
        out.push(read_json(&path)?);
    }
    Ok(out)
}

/// Loads the checkpoint and mixtures of task `t`.
pub fn load_task_model(run: &Path, t: usize) -> Result<(Checkpoint, GmmStore)> {
    let dir = task_dir(run, t);
    Ok((
        Checkpoint::load(&dir.join("checkpoint.owck"))?,
        GmmStore::read(&dir.join("gmms.json"))?,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    /// Unknown-labelled detections left unmatched by the unknown pool.
    pub unknown_fp: usize,
    pub u_recall: Option<f64>,
    pub a_ose: usize,
    /// Unmatched unknown detections overlapping a known gt at the IoU threshold.
    pub known_as_unknown: usize,
    /// `(A-OSE[i-1] - A-OSE[i]) - (KaU[i] - KaU[i-1])`; absent on the first row.
    pub delta_error: Option<i64>,
}

/// Counts of unknown false positives and of those lying on known objects.
pub fn unknown_error_counts(frame: &EvalFrame) -> (usize, usize) {
    let (mut fp, mut kau) = (0, 0);
    for img in frame.images.values() {
        let unk: Vec<_> = img
            .detections
            .iter()
            .filter(|d| d.label == Label::Unknown)
            .collect();
        let boxes: Vec<BoundingBox> = unk.iter().map(|d| d.bbox).collect();
        let scores: Vec<f64> = unk.iter().map(|d| d.score).collect();
        let (matched, _) = match_detections(&boxes, &scores, &img.unknown, frame.iou_threshold);
        for (b, m) in boxes.iter().zip(&matched) {
            if m.is_some() {
                continue;
            }
            fp += 1;
            if img
                .known
                .iter()
                .any(|(_, g)| iou(b, g) >= frame.iou_threshold)
            {
                kau += 1;
            }
        }
    }
    (fp, kau)
}

pub fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    if let Some(v) = grid.iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
        return Err(Error::Config(format!("sweep value {v} is outside (0,1)")));
    }
    Ok(())
}

/// Re-runs the decision stage over `grid` with the network outputs fixed.
pub fn sweep(
    test: &[ImageRecord],
    evidence: &[RegionEvidence],
    gmms: Option<&GmmStore>,
    registry: &ClassRegistry,
    base: &InferenceConfig,
    param: SweepParam,
    grid: &[f64],
    iou_threshold: f64,
) -> Result<Vec<SweepRow>> {
    validate_grid(grid)?;
    let mut rows: Vec<SweepRow> = Vec::with_capacity(grid.len());
    for &value in grid {
        let mut cfg = base.clone();
        match param {
            SweepParam::ThetaObj => cfg.thresholds.theta_obj = value,
            SweepParam::ThetaConf => cfg.thresholds.theta_conf = value,
            SweepParam::ThetaCls => cfg.thresholds.theta_cls = value,
        }
        let dets = detect_all(test, evidence, gmms, &cfg);
        let frame = EvalFrame::build(test, &dets, registry, iou_threshold);
        let (unknown_fp, known_as_unknown) = unknown_error_counts(&frame);
        let a = a_ose(&frame);
        let delta_error = rows.last().map(|p| {
            (p.a_ose as i64 - a as i64) - (known_as_unknown as i64 - p.known_as_unknown as i64)
        });
        rows.push(SweepRow {
            value,
            unknown_fp,
            u_recall: u_recall(&frame),
            a_ose: a,
            known_as_unknown,
            delta_error,
        });
    }
    Ok(rows)
}

/// Number of strict sign changes in a sequence, zeros skipped.
pub fn sign_changes(values: &[i64]) -> usize {
    let signs: Vec<i64> = values
        .iter()
        .map(|v| v.signum())
        .filter(|&s| s != 0)
        .collect();
    signs.windows(2).filter(|w| w[0] != w[1]).count()
}

pub fn sweep_to_csv(param: SweepParam, rows: &[SweepRow]) -> String {
    let mut s = format!(
        "{},unknown_fp,u_recall,a_ose,known_as_unknown,delta_error\n",
        param.name()
    );
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.value,
            r.unknown_fp,
            r.u_recall.map_or(String::new(), |v| format!("{:.4}", v)),
            r.a_ose,
            r.known_as_unknown,
            r.delta_error.map_or(String::new(), |v| v.to_string()),
        ));
    }
    s
}

/// Metrics of a detection dump against a COCO annotation file at task `t`,
/// without a model.
pub fn eval_files(
    gt_file: &Path,
    dump_file: &Path,
    schedule: &TaskSchedule,
    t: usize,
    eval: &EvalConfig,
) -> Result<MetricsReport> {
    let registry = ClassRegistry::new(schedule.clone(), t)?;
    let records = CocoFile::read(gt_file)?.to_records(Some(schedule))?;
    let dets = read_detections(dump_file)?;
    let ids: BTreeSet<&str> = records.iter().map(|r| r.image_id.as_str()).collect();
    if let Some(stray) = dets.keys().find(|k| !ids.contains(k.as_str())) {
        return Err(Error::Schema {
            path: dump_file.to_path_buf(),
            line: 0,
            message: format!("image {stray} is not in {}", gt_file.display()),
        });
    }
    Ok(report_for(&records, &dets, &registry, eval))
}

/// Per-task evaluation summary keyed by task index, for plots.
pub fn trend(records: &[TaskRecord]) -> BTreeMap<usize, (Option<f64>, Option<f64>)> {
    records
        .iter()
        .map(|r| (r.report.task, (r.report.map_both, r.report.u_recall)))
        .collect()
}
