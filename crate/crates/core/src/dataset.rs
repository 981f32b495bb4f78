//! Images, annotations, task schedules and the task-aware label views built on them.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;

/// External category identifier (the COCO `category_id`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub u32);

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A detection label: a known class or the reserved unknown label.
/// Background is never a label; background regions are not emitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Known(ClassId),
    Unknown,
}

impl Label {
    pub fn is_unknown(&self) -> bool {
        matches!(self, Label::Unknown)
    }

    pub fn known(&self) -> Option<ClassId> {
        match self {
            Label::Known(c) => Some(*c),
            Label::Unknown => None,
        }
    }
}

impl Serialize for Label {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Label::Known(c) => s.serialize_u32(c.0),
            Label::Unknown => s.serialize_str("unknown"),
        }
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Id(u32),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Id(id) => Ok(Label::Known(ClassId(id))),
            Raw::Text(t) if t == "unknown" => Ok(Label::Unknown),
            Raw::Text(t) => Err(serde::de::Error::custom(format!(
                "label must be a category id or \"unknown\", got {t:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub class_id: ClassId,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
}

/// Interleaved 8-bit RGB raster, row-major `height x width x 3`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Raster {
    pub const CHANNELS: usize = 3;

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Planar `C x H x W` floats centred around zero, the network's input layout.
    pub fn to_planar(&self) -> Vec<f64> {
        let hw = self.width * self.height;
        let mut out = vec![0.0; 3 * hw];
        for (p, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * hw + p] = px[c] as f64 / 255.0 - 0.5;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_id: String,
    pub width: usize,
    pub height: usize,
    pub file_name: Option<String>,
    pub annotations: Vec<Annotation>,
    pub raster: Option<Raster>,
}

impl ImageRecord {
    pub fn classes(&self) -> BTreeSet<ClassId> {
        self.annotations.iter().map(|a| a.class_id).collect()
    }
}

/// Ordered, pairwise-disjoint, non-empty class partitions `C^1 .. C^T`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<ClassId>>", into = "Vec<Vec<ClassId>>")]
pub struct TaskSchedule {
    tasks: Vec<Vec<ClassId>>,
}

impl TryFrom<Vec<Vec<ClassId>>> for TaskSchedule {
    type Error = Error;

    fn try_from(tasks: Vec<Vec<ClassId>>) -> Result<Self> {
        TaskSchedule::new(tasks)
    }
}

impl From<TaskSchedule> for Vec<Vec<ClassId>> {
    fn from(s: TaskSchedule) -> Self {
        s.tasks
    }
}

impl TaskSchedule {
    pub fn new(tasks: Vec<Vec<ClassId>>) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::InvalidSchedule("no tasks".into()));
        }
        let mut seen = BTreeSet::new();
        for (i, task) in tasks.iter().enumerate() {
            if task.is_empty() {
                return Err(Error::InvalidSchedule(format!("task {} is empty", i + 1)));
            }
            for c in task {
                if !seen.insert(*c) {
                    return Err(Error::InvalidSchedule(format!(
                        "class {c} appears in more than one task (or twice in task {})",
                        i + 1
                    )));
                }
            }
        }
        Ok(Self { tasks })
    }

    pub fn from_ids(tasks: &[&[u32]]) -> Result<Self> {
        Self::new(
            tasks
                .iter()
                .map(|t| t.iter().map(|&c| ClassId(c)).collect())
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Classes introduced by task `t` (1-based).
    pub fn task(&self, t: usize) -> Result<&[ClassId]> {
        self.check(t)?;
        Ok(&self.tasks[t - 1])
    }

    pub fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.tasks.len() {
            return Err(Error::TaskOutOfRange {
                task: t,
                tasks: self.tasks.len(),
            });
        }
        Ok(())
    }

    /// Every class of every task, in schedule order.
    pub fn universe(&self) -> Vec<ClassId> {
        self.tasks.iter().flatten().copied().collect()
    }

    pub fn contains(&self, c: ClassId) -> bool {
        self.tasks.iter().any(|t| t.contains(&c))
    }
}

/// A schedule plus the current task; answers which classes are known.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassRegistry {
    pub schedule: TaskSchedule,
    pub current_task: usize,
}

impl ClassRegistry {
    pub fn new(schedule: TaskSchedule, current_task: usize) -> Result<Self> {
        schedule.check(current_task)?;
        Ok(Self {
            schedule,
            current_task,
        })
    }

    pub fn at_task(&self, t: usize) -> Result<Self> {
        Self::new(self.schedule.clone(), t)
    }

    /// `K^t` in schedule order; its positions are the dense indices used by score vectors.
    pub fn known(&self) -> Vec<ClassId> {
        self.schedule.tasks[..self.current_task]
            .iter()
            .flatten()
            .copied()
            .collect()
    }

    /// `K^{t-1}`; empty at the first task.
    pub fn prior(&self) -> Vec<ClassId> {
        self.schedule.tasks[..self.current_task - 1]
            .iter()
            .flatten()
            .copied()
            .collect()
    }

    pub fn current(&self) -> &[ClassId] {
        &self.schedule.tasks[self.current_task - 1]
    }

    /// `U^t`: the schedule universe minus the known classes.
    pub fn unknown(&self) -> Vec<ClassId> {
        self.schedule.tasks[self.current_task..]
            .iter()
            .flatten()
            .copied()
            .collect()
    }

    pub fn num_known(&self) -> usize {
        self.schedule.tasks[..self.current_task]
            .iter()
            .map(Vec::len)
            .sum()
    }

    /// Dense score-vector index of a known class.
    pub fn index_of(&self, c: ClassId) -> Option<usize> {
        self.known().iter().position(|&k| k == c)
    }

    pub fn is_known(&self, c: ClassId) -> bool {
        self.index_of(c).is_some()
    }
}

/// `(K^t, U^t)` for the registry's current task.
pub fn known_and_unknown(registry: &ClassRegistry) -> (Vec<ClassId>, Vec<ClassId>) {
    (registry.known(), registry.unknown())
}

/// Where a detection's score came from. Objectness-derived scores are on a
/// different scale from classifier probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Classifier,
    Objectness,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub label: Label,
    pub score: f64,
    pub bbox: BoundingBox,
    pub provenance: Provenance,
}

/// Restricts each record to the annotations of `C^t`, dropping images left empty.
pub fn make_task_view(
    dataset: &[ImageRecord],
    registry: &ClassRegistry,
    t: usize,
) -> Result<Vec<ImageRecord>> {
    let classes: BTreeSet<ClassId> = registry.schedule.task(t)?.iter().copied().collect();
    Ok(filter_to_classes(dataset, &classes))
}

pub(crate) fn filter_to_classes(
    dataset: &[ImageRecord],
    classes: &BTreeSet<ClassId>,
) -> Vec<ImageRecord> {
    dataset
        .iter()
        .filter_map(|rec| {
            let annotations: Vec<Annotation> = rec
                .annotations
                .iter()
                .filter(|a| classes.contains(&a.class_id))
                .copied()
                .collect();
            (!annotations.is_empty()).then(|| ImageRecord {
                annotations,
                ..rec.clone()
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, classes: &[u32]) -> ImageRecord {
        ImageRecord {
            image_id: id.into(),
            width: 100,
            height: 100,
            file_name: None,
            annotations: classes
                .iter()
                .enumerate()
                .map(|(i, &c)| Annotation {
                    class_id: ClassId(c),
                    bbox: BoundingBox::new(i as f64, 0.0, i as f64 + 5.0, 5.0).unwrap(),
                })
                .collect(),
            raster: None,
        }
    }

    fn voc_like() -> TaskSchedule {
        TaskSchedule::new(vec![
            (1..=20).map(ClassId).collect(),
            (21..=40).map(ClassId).collect(),
        ])
        .unwrap()
    }

    #[test]
    fn task_view_keeps_only_current_classes() {
        let reg = ClassRegistry::new(voc_like(), 1).unwrap();
        let view = make_task_view(&[rec("a", &[1, 21])], &reg, 1).unwrap();
        assert_eq!(view.len(), 1);
        assert_eq!(
            view[0].classes().into_iter().collect::<Vec<_>>(),
            vec![ClassId(1)]
        );
    }

    #[test]
    fn task_view_drops_future_only_images() {
        let reg = ClassRegistry::new(voc_like(), 1).unwrap();
        let view = make_task_view(&[rec("a", &[21, 22])], &reg, 1).unwrap();
        assert!(view.is_empty());
    }

    #[test]
    fn task_view_rejects_bad_index() {
        let reg = ClassRegistry::new(voc_like(), 1).unwrap();
        assert!(matches!(
            make_task_view(&[], &reg, 3),
            Err(Error::TaskOutOfRange { task: 3, tasks: 2 })
        ));
        assert!(make_task_view(&[], &reg, 0).is_err());
    }

    #[test]
    fn known_unknown_two_tasks() {
        let s = TaskSchedule::from_ids(&[&[1], &[2]]).unwrap();
        let (k, u) = known_and_unknown(&ClassRegistry::new(s.clone(), 1).unwrap());
        assert_eq!((k, u), (vec![ClassId(1)], vec![ClassId(2)]));
        let (k, u) = known_and_unknown(&ClassRegistry::new(s, 2).unwrap());
        assert_eq!(k, vec![ClassId(1), ClassId(2)]);
        assert!(u.is_empty());
    }

    #[test]
    fn schedule_validation() {
        assert!(TaskSchedule::from_ids(&[&[1, 2], &[2]]).is_err());
        assert!(TaskSchedule::from_ids(&[&[1], &[]]).is_err());
        assert!(TaskSchedule::from_ids(&[]).is_err());
        let parsed: std::result::Result<TaskSchedule, _> = serde_json::from_str("[[1,2],[2]]");
        assert!(parsed.is_err());
    }

    #[test]
    fn label_serialization() {
        assert_eq!(
            serde_json::to_string(&Label::Unknown).unwrap(),
            "\"unknown\""
        );
        assert_eq!(
            serde_json::to_string(&Label::Known(ClassId(7))).unwrap(),
            "7"
        );
        assert_eq!(
            serde_json::from_str::<Label>("7").unwrap(),
            Label::Known(ClassId(7))
        );
        assert!(serde_json::from_str::<Label>("\"bg\"").is_err());
    }

    #[test]
    fn knowledge_grows_monotonically() {
        let s = TaskSchedule::from_ids(&[&[1, 2], &[3], &[4, 5], &[6]]).unwrap();
        for t in 1..s.len() {
            let a = ClassRegistry::new(s.clone(), t).unwrap();
            let b = ClassRegistry::new(s.clone(), t + 1).unwrap();
            let (ka, ua) = known_and_unknown(&a);
            let (kb, ub) = known_and_unknown(&b);
            assert!(ka.iter().all(|c| kb.contains(c)));
            assert!(ub.iter().all(|c| ua.contains(c)));
            assert!(ka.iter().all(|c| !ua.contains(c)));
        }
    }
}
