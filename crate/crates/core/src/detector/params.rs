//! Architecture description and the flat, addressable parameter vector.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::ClassId;
use crate::error::{Error, Result};

/// Sizes of the compact backbone, pyramid and heads.
///
/// The backbone is four stride-2 3x3 conv blocks; the pyramid taps the third
/// (stride 8) and fourth (stride 16) blocks through 1x1 laterals with a
/// nearest-neighbour top-down path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub image_size: usize,
    pub backbone_channels: [usize; 4],
    pub fpn_channels: usize,
    pub roi_grid: usize,
    pub roi_sampling: usize,
    pub roi_hidden: usize,
    /// Boxes with `sqrt(area)` below this many pixels pool from the stride-8 level.
    pub level_split: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            image_size: 128,
            backbone_channels: [16, 32, 48, 64],
            fpn_channels: 32,
            roi_grid: 4,
            roi_sampling: 2,
            roi_hidden: 128,
            level_split: 48.0,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % 16 != 0 {
            return Err(Error::Config(
                "arch.image_size must be a multiple of 16".into(),
            ));
        }
        if self.backbone_channels.contains(&0)
            || self.fpn_channels == 0
            || self.roi_grid == 0
            || self.roi_sampling == 0
            || self.roi_hidden == 0
        {
            return Err(Error::Config("arch sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn strides(&self) -> [usize; 2] {
        [8, 16]
    }

    pub fn roi_features(&self) -> usize {
        self.fpn_channels * self.roi_grid * self.roi_grid
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Named offsets into the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub segments: Vec<Segment>,
    pub total: usize,
}

impl ParamLayout {
    pub fn build(arch: &ArchConfig, num_known: usize) -> Self {
        let [c1, c2, c3, c4] = arch.backbone_channels;
        let f = arch.fpn_channels;
        let h = arch.roi_hidden;
        let d = arch.roi_features();
        let mut segments = Vec::new();
        let mut total = 0;
        let mut push = |name: &str, shape: Vec<usize>| {
            let s = Segment {
                name: name.to_string(),
                offset: total,
                shape,
            };
            total += s.len();
            segments.push(s);
        };
        for (name, cin, cout) in [
            ("c1", 3, c1),
            ("c2", c1, c2),
            ("c3", c2, c3),
            ("c4", c3, c4),
        ] {
            push(&format!("{name}.w"), vec![cout, cin, 3, 3]);
            push(&format!("{name}.b"), vec![cout]);
        }
        push("lat3.w", vec![f, c3, 1, 1]);
        push("lat3.b", vec![f]);
        push("lat4.w", vec![f, c4, 1, 1]);
        push("lat4.b", vec![f]);
        push("rpn.w", vec![f, f, 3, 3]);
        push("rpn.b", vec![f]);
        push("rpn_ctr.w", vec![1, f, 1, 1]);
        push("rpn_ctr.b", vec![1]);
        push("rpn_box.w", vec![4, f, 1, 1]);
        push("rpn_box.b", vec![4]);
        push("fc1.w", vec![h, d]);
        push("fc1.b", vec![h]);
        push("fc2.w", vec![h, h]);
        push("fc2.b", vec![h]);
        push("cls.w", vec![num_known + 1, h]);
        push("cls.b", vec![num_known + 1]);
        push("clsbox.w", vec![4 * num_known, h]);
        push("clsbox.b", vec![4 * num_known]);
        push("agnbox.w", vec![4, h]);
        push("agnbox.b", vec![4]);
        push("iou.w", vec![1, h]);
        push("iou.b", vec![1]);
        Self { segments, total }
    }

    pub fn get(&self, name: &str) -> &Segment {
        self.segments
            .iter()
            .find(|s| s.name == name)
            .unwrap_or_else(|| panic!("no parameter segment {name}"))
    }

    pub fn offset(&self, name: &str) -> usize {
        self.get(name).offset
    }

    /// Name of the segment holding flat coordinate `i`.
    pub fn locate(&self, i: usize) -> Option<&Segment> {
        self.segments.iter().find(|s| s.range().contains(&i))
    }
}

/// All learnable weights plus what is needed to interpret them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub arch: ArchConfig,
    /// `K^t` in dense order; row `i` of the class heads belongs to `classes[i]`,
    /// the last classification row is background.
    pub classes: Vec<ClassId>,
    pub layout: ParamLayout,
    pub values: Vec<f64>,
    pub seed: u64,
}

/// Row keys for per-row initialisation of the class heads.
enum RowKey {
    Class(ClassId),
    Background,
}

impl ModelParams {
    /// Deterministic initialisation. Each class-head row is drawn from a
    /// stream keyed by its class id, so the base model restricted to an
    /// earlier task's classes is identical to that task's base model.
    pub fn init(arch: &ArchConfig, classes: &[ClassId], seed: u64) -> Result<Self> {
        arch.validate()?;
        let layout = ParamLayout::build(arch, classes.len());
        let mut values = vec![0.0; layout.total];
        for (si, seg) in layout.segments.iter().enumerate() {
            if seg.name.ends_with(".b") {
                continue;
            }
            let fan_in: usize = seg.shape[1..].iter().product();
            let head = seg.name.split('.').next().unwrap_or_default();
            let std = match head {
                "rpn_ctr" | "rpn_box" | "iou" | "agnbox" | "clsbox" | "cls" => 0.01,
                _ => (2.0 / fan_in as f64).sqrt(),
            };
            let normal = Normal::new(0.0, std).expect("positive std");
            let rows = seg.shape[0];
            for r in 0..rows {
                let key = match head {
                    "cls" if r == classes.len() => Some(RowKey::Background),
                    "cls" => Some(RowKey::Class(classes[r])),
                    "clsbox" => Some(RowKey::Class(classes[r / 4])),
                    _ => None,
                };
                let stream = match key {
                    Some(RowKey::Class(c)) => {
                        ((si as u64) << 40) | (1 << 39) | ((c.0 as u64) << 3) | (r % 4) as u64
                    }
                    Some(RowKey::Background) => ((si as u64) << 40) | (1 << 38),
                    None => ((si as u64) << 40) | r as u64,
                };
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(stream);
                let base = seg.offset + r * fan_in;
                for v in &mut values[base..base + fan_in] {
                    *v = normal.sample(&mut rng);
                }
            }
        }
        // Start box regressors at a plausible scale: ltrb in stride units.
        let b = layout.get("rpn_box.b").offset;
        values[b..b + 4].fill(1.5);
        Ok(Self {
            arch: arch.clone(),
            classes: classes.to_vec(),
            layout,
            values,
            seed,
        })
    }

    pub fn num_known(&self) -> usize {
        self.classes.len()
    }

    pub fn seg(&self, name: &str) -> &[f64] {
        &self.values[self.layout.get(name).range()]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Re-targets the class heads to `classes`, copying rows of classes this
    /// model already has and initialising new rows from the base distribution.
    pub fn with_classes(&self, classes: &[ClassId]) -> Result<Self> {
        let mut fresh = Self::init(&self.arch, classes, self.seed)?;
        for seg in &self.layout.segments {
            let head = seg.name.split('.').next().unwrap_or_default();
            let dst = fresh.layout.get(&seg.name).clone();
            match head {
                "cls" | "clsbox" => {
                    let per_class = if head == "cls" { 1 } else { 4 };
                    let row = if seg.shape.len() > 1 { seg.shape[1] } else { 1 };
                    let copy_rows = |src_class: usize, dst_class: usize, fresh: &mut Self| {
                        for k in 0..per_class {
                            let s = seg.offset + (src_class * per_class + k) * row;
                            let d = dst.offset + (dst_class * per_class + k) * row;
                            fresh.values[d..d + row].copy_from_slice(&self.values[s..s + row]);
                        }
                    };
                    for (i, c) in self.classes.iter().enumerate() {
                        if let Some(j) = classes.iter().position(|x| x == c) {
                            copy_rows(i, j, &mut fresh);
                        }
                    }
                    if head == "cls" {
                        copy_rows(self.classes.len(), classes.len(), &mut fresh);
                    }
                }
                _ => {
                    fresh.values[dst.range()].copy_from_slice(&self.values[seg.range()]);
                }
            }
        }
        Ok(fresh)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(v: &[u32]) -> Vec<ClassId> {
        v.iter().map(|&c| ClassId(c)).collect()
    }

    #[test]
    fn layout_is_contiguous() {
        let l = ParamLayout::build(&ArchConfig::default(), 3);
        let mut next = 0;
        for s in &l.segments {
            assert_eq!(s.offset, next);
            next += s.len();
        }
        assert_eq!(next, l.total);
        assert_eq!(l.get("cls.w").shape, vec![4, 128]);
        assert_eq!(l.get("clsbox.w").shape, vec![12, 128]);
    }

    #[test]
    fn init_deterministic_and_finite() {
        let a = ModelParams::init(&ArchConfig::default(), &ids(&[1, 2]), 5).unwrap();
        let b = ModelParams::init(&ArchConfig::default(), &ids(&[1, 2]), 5).unwrap();
        assert_eq!(a, b);
        assert!(a.is_finite());
        let c = ModelParams::init(&ArchConfig::default(), &ids(&[1, 2]), 6).unwrap();
        assert_ne!(a.values, c.values);
    }

    #[test]
    fn class_rows_keyed_by_class() {
        let arch = ArchConfig::default();
        let small = ModelParams::init(&arch, &ids(&[1, 2]), 9).unwrap();
        let big = ModelParams::init(&arch, &ids(&[1, 2, 3, 4]), 9).unwrap();
        let h = arch.roi_hidden;
        assert_eq!(&small.seg("cls.w")[..2 * h], &big.seg("cls.w")[..2 * h]);
        // background row is the last row in both
        assert_eq!(&small.seg("cls.w")[2 * h..], &big.seg("cls.w")[4 * h..]);
        assert_eq!(
            &small.seg("clsbox.w")[..8 * h],
            &big.seg("clsbox.w")[..8 * h]
        );
        assert_eq!(small.seg("fc1.w"), big.seg("fc1.w"));
    }

    #[test]
    fn with_classes_copies_existing_rows() {
        let arch = ArchConfig::default();
        let mut m = ModelParams::init(&arch, &ids(&[1, 2]), 9).unwrap();
        for v in m.values.iter_mut() {
            *v += 0.5;
        }
        let grown = m.with_classes(&ids(&[1, 2, 3])).unwrap();
        let h = arch.roi_hidden;
        assert_eq!(&grown.seg("cls.w")[..2 * h], &m.seg("cls.w")[..2 * h]);
        assert_eq!(&grown.seg("cls.w")[3 * h..], &m.seg("cls.w")[2 * h..]);
        assert_eq!(grown.seg("c1.w"), m.seg("c1.w"));
        let base = ModelParams::init(&arch, &ids(&[1, 2, 3]), 9).unwrap();
        assert_eq!(
            &grown.seg("cls.w")[2 * h..3 * h],
            &base.seg("cls.w")[2 * h..3 * h]
        );
    }
}
