//! Deterministic synthetic scenes: coloured geometric shapes on a noisy
//! background with unlabeled grey clutter.
//!
//! Each scene is a pure function of `(seed, index)`: the generator seeds a
//! ChaCha stream with `seed` and selects stream `index`, so scenes can be
//! produced in any order or in parallel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coco::CocoCategory;
use crate::dataset::{Annotation, ClassId, ImageRecord, Raster};
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::par::{self, Exec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Cross,
    Ring,
    Star,
    Bar,
    Ellipse,
}

impl Shape {
    /// Membership test in normalised box coordinates `u, v` in `[-1, 1]`.
    fn contains(self, u: f64, v: f64) -> bool {
        let r2 = u * u + v * v;
        match self {
            Shape::Circle | Shape::Ellipse => r2 <= 1.0,
            Shape::Square | Shape::Bar => u.abs() <= 1.0 && v.abs() <= 1.0,
            Shape::Triangle => v <= 1.0 && u.abs() <= 0.5 * (v + 1.0),
            Shape::Cross => {
                u.abs() <= 1.0 && v.abs() <= 1.0 && (u.abs() <= 0.34 || v.abs() <= 0.34)
            }
            Shape::Ring => (0.3..=1.0).contains(&r2),
            Shape::Star => {
                let theta = v.atan2(u) + std::f64::consts::FRAC_PI_2;
                let lobe = 0.5 * (1.0 + (5.0 * theta).cos());
                r2.sqrt() <= 0.42 + 0.58 * lobe * lobe
            }
        }
    }

    /// Width/height ratio before random orientation.
    fn elongation(self) -> f64 {
        match self {
            Shape::Bar => 0.35,
            Shape::Ellipse => 0.6,
            _ => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeClass {
    pub id: ClassId,
    pub name: String,
    pub shape: Shape,
    pub color: [u8; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub image_size: usize,
    pub shape_classes: Vec<ShapeClass>,
    /// Inclusive range of objects per scene.
    pub objects_per_image: (usize, usize),
    /// Object size as a fraction of the image side.
    pub scale_range: (f64, f64),
    /// Number of grey distractor strokes and patches per scene.
    pub clutter_level: usize,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: 128,
            shape_classes: default_shape_classes(),
            objects_per_image: (1, 3),
            scale_range: (0.16, 0.34),
            clutter_level: 4,
            seed: 0,
        }
    }
}

pub fn default_shape_classes() -> Vec<ShapeClass> {
    let defs: [(&str, Shape, [u8; 3]); 8] = [
        ("red-circle", Shape::Circle, [220, 40, 40]),
        ("green-square", Shape::Square, [40, 190, 60]),
        ("blue-triangle", Shape::Triangle, [50, 80, 230]),
        ("yellow-cross", Shape::Cross, [230, 210, 40]),
        ("magenta-ring", Shape::Ring, [210, 50, 200]),
        ("cyan-star", Shape::Star, [40, 200, 210]),
        ("orange-bar", Shape::Bar, [240, 130, 30]),
        ("white-ellipse", Shape::Ellipse, [235, 235, 235]),
    ];
    defs.iter()
        .enumerate()
        .map(|(i, (name, shape, color))| ShapeClass {
            id: ClassId(i as u32 + 1),
            name: name.to_string(),
            shape: *shape,
            color: *color,
        })
        .collect()
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("scene: {m}")));
        if self.image_size < 16 || self.image_size % 16 != 0 {
            return bad("image_size must be a positive multiple of 16");
        }
        if self.shape_classes.is_empty() {
            return bad("shape_classes is empty");
        }
        let (lo, hi) = self.objects_per_image;
        if lo == 0 || hi < lo {
            return bad("objects_per_image must be a non-empty range starting at 1 or more");
        }
        let (smin, smax) = self.scale_range;
        if !(smin > 0.0 && smax >= smin && smax < 1.0) {
            return bad("scale_range must satisfy 0 < min <= max < 1");
        }
        let mut ids: Vec<_> = self.shape_classes.iter().map(|c| c.id).collect();
        ids.sort();
        ids.dedup();
        if ids.len() != self.shape_classes.len() {
            return bad("duplicate class id in shape_classes");
        }
        Ok(())
    }

    pub fn categories(&self) -> Vec<CocoCategory> {
        self.shape_classes
            .iter()
            .map(|c| CocoCategory {
                id: c.id.0,
                name: c.name.clone(),
            })
            .collect()
    }

    fn rng(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        rng
    }
}

const PLACEMENT_ATTEMPTS: usize = 400;
const OBJECT_MARGIN: f64 = 3.0;

/// Renders scene `index`. Annotation boxes are the pixel extents of each
/// rendered shape, so they are tight by construction.
pub fn generate_scene(cfg: &SceneConfig, index: u64) -> Result<ImageRecord> {
    cfg.validate()?;
    let size = cfg.image_size;
    let mut rng = cfg.rng(index);
    let mut raster = render_background(size, &mut rng);
    for _ in 0..cfg.clutter_level {
        draw_clutter(&mut raster, &mut rng);
    }

    let n_objects = rng.random_range(cfg.objects_per_image.0..=cfg.objects_per_image.1);
    let mut placed: Vec<BoundingBox> = Vec::with_capacity(n_objects);
    let mut annotations = Vec::with_capacity(n_objects);
    let mut attempts = 0;
    while annotations.len() < n_objects {
        attempts += 1;
        if attempts > PLACEMENT_ATTEMPTS {
            return Err(Error::Placement {
                index,
                requested: n_objects,
                attempts: PLACEMENT_ATTEMPTS,
            });
        }
        let class = &cfg.shape_classes[rng.random_range(0..cfg.shape_classes.len())];
        let side = rng.random_range(cfg.scale_range.0..=cfg.scale_range.1) * size as f64;
        let short = side * class.shape.elongation();
        let (w, h) = if rng.random_bool(0.5) {
            (side, short)
        } else {
            (short, side)
        };
        let x1 = rng.random_range(0.0..=(size as f64 - w));
        let y1 = rng.random_range(0.0..=(size as f64 - h));
        let frame = BoundingBox::new(x1, y1, x1 + w, y1 + h)?;
        let clear = placed.iter().all(|p| {
            let grown = BoundingBox::new(
                p.x1() - OBJECT_MARGIN,
                p.y1() - OBJECT_MARGIN,
                p.x2() + OBJECT_MARGIN,
                p.y2() + OBJECT_MARGIN,
            )
            .expect("growing a valid box keeps it valid");
            grown.intersection_area(&frame) == 0.0
        });
        if !clear {
            continue;
        }
        if let Some(tight) = draw_shape(&mut raster, class, &frame) {
            placed.push(frame);
            annotations.push(Annotation {
                class_id: class.id,
                bbox: tight,
            });
        }
    }

    Ok(ImageRecord {
        image_id: index.to_string(),
        width: size,
        height: size,
        file_name: Some(format!("{index:06}.png")),
        annotations,
        raster: Some(raster),
    })
}

/// Scenes `0..n` of `cfg`, generated under `exec`.
pub fn generate_dataset(cfg: &SceneConfig, n: usize, exec: Exec) -> Result<Vec<ImageRecord>> {
    if n == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    cfg.validate()?;
    let indices: Vec<u64> = (0..n as u64).collect();
    par::map(exec, &indices, |&i| generate_scene(cfg, i))
        .into_iter()
        .collect()
}

fn render_background(size: usize, rng: &mut ChaCha8Rng) -> Raster {
    let base = rng.random_range(85.0..115.0);
    let gx = rng.random_range(-25.0..25.0) / size as f64;
    let gy = rng.random_range(-25.0..25.0) / size as f64;
    let mut r = Raster::filled(size, size, [0, 0, 0]);
    for y in 0..size {
        for x in 0..size {
            let v: f64 = base + gx * x as f64 + gy * y as f64 + rng.random_range(-8.0..8.0);
            let g = v.clamp(0.0, 255.0) as u8;
            r.set_pixel(x, y, [g, g, g]);
        }
    }
    r
}

/// Grey strokes and speckled patches; grey never coincides with a class colour.
fn draw_clutter(r: &mut Raster, rng: &mut ChaCha8Rng) {
    let size = r.width as f64;
    let tone = rng.random_range(45u8..=170);
    if rng.random_bool(0.5) {
        let (x0, y0) = (rng.random_range(0.0..size), rng.random_range(0.0..size));
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        let len = rng.random_range(0.15..0.5) * size;
        let steps = (len * 2.0) as usize;
        for s in 0..steps {
            let t = s as f64 / 2.0;
            let x = x0 + t * angle.cos();
            let y = y0 + t * angle.sin();
            if x >= 0.0 && y >= 0.0 && (x as usize) < r.width && (y as usize) < r.height {
                r.set_pixel(x as usize, y as usize, [tone; 3]);
            }
        }
    } else {
        let w = rng.random_range(0.05..0.2) * size;
        let h = rng.random_range(0.05..0.2) * size;
        let x0 = rng.random_range(0.0..size - w) as usize;
        let y0 = rng.random_range(0.0..size - h) as usize;
        for y in y0..(y0 + h as usize).min(r.height) {
            for x in x0..(x0 + w as usize).min(r.width) {
                if rng.random_bool(0.5) {
                    r.set_pixel(x, y, [tone; 3]);
                }
            }
        }
    }
}

/// Paints `class` inside `frame`; returns the tight pixel box of the painted mask.
fn draw_shape(r: &mut Raster, class: &ShapeClass, frame: &BoundingBox) -> Option<BoundingBox> {
    let c = frame.center();
    let (hw, hh) = (frame.width() / 2.0, frame.height() / 2.0);
    let xs = frame.x1().floor().max(0.0) as usize..(frame.x2().ceil() as usize).min(r.width);
    let ys = frame.y1().floor().max(0.0) as usize..(frame.y2().ceil() as usize).min(r.height);
    let mut extent: Option<(usize, usize, usize, usize)> = None;
    for y in ys {
        for x in xs.clone() {
            let u = (x as f64 + 0.5 - c.x) / hw;
            let v = (y as f64 + 0.5 - c.y) / hh;
            if class.shape.contains(u, v) {
                r.set_pixel(x, y, class.color);
                extent = Some(match extent {
                    None => (x, y, x, y),
                    Some((a, b, cc, d)) => (a.min(x), b.min(y), cc.max(x), d.max(y)),
                });
            }
        }
    }
    let (x1, y1, x2, y2) = extent?;
    BoundingBox::new(x1 as f64, y1 as f64, x2 as f64 + 1.0, y2 as f64 + 1.0).ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{make_task_view, ClassRegistry, TaskSchedule};
    use std::collections::BTreeMap;

    fn cfg(seed: u64) -> SceneConfig {
        SceneConfig {
            seed,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn single_object_box_bounds_shape() {
        let c = SceneConfig {
            objects_per_image: (1, 1),
            ..cfg(3)
        };
        let rec = generate_scene(&c, 0).unwrap();
        assert_eq!(rec.annotations.len(), 1);
        let raster = rec.raster.as_ref().unwrap();
        let a = rec.annotations[0];
        let color = c
            .shape_classes
            .iter()
            .find(|s| s.id == a.class_id)
            .unwrap()
            .color;
        let derived = tight_box_of_color(raster, color, None).unwrap();
        assert_eq!(derived, a.bbox);
    }

    #[test]
    fn deterministic_per_seed_and_index() {
        let a = generate_scene(&cfg(11), 5).unwrap();
        let b = generate_scene(&cfg(11), 5).unwrap();
        assert_eq!(a, b);
        let other = generate_scene(&cfg(12), 5).unwrap();
        assert_ne!(a.raster, other.raster);
    }

    #[test]
    fn every_box_is_tight_within_one_pixel() {
        let c = cfg(21);
        for rec in generate_dataset(&c, 30, Exec::Sequential).unwrap() {
            let raster = rec.raster.as_ref().unwrap();
            for a in &rec.annotations {
                let color = c
                    .shape_classes
                    .iter()
                    .find(|s| s.id == a.class_id)
                    .unwrap()
                    .color;
                let d = tight_box_of_color(raster, color, Some(a.bbox)).unwrap();
                for (p, q) in [
                    (d.x1(), a.bbox.x1()),
                    (d.y1(), a.bbox.y1()),
                    (d.x2(), a.bbox.x2()),
                    (d.y2(), a.bbox.y2()),
                ] {
                    assert!((p - q).abs() <= 1.0);
                }
                assert!(a.bbox.within(rec.width as f64, rec.height as f64));
            }
        }
    }

    #[test]
    fn class_frequencies_near_uniform() {
        let mut c = cfg(5);
        c.shape_classes.truncate(5);
        let data = generate_dataset(&c, 100, Exec::Sequential).unwrap();
        let mut counts: BTreeMap<ClassId, usize> = BTreeMap::new();
        let mut total = 0;
        for rec in &data {
            for a in &rec.annotations {
                *counts.entry(a.class_id).or_default() += 1;
                total += 1;
            }
        }
        let expected = total as f64 / 5.0;
        assert_eq!(counts.len(), 5);
        for (&k, &n) in &counts {
            let dev = (n as f64 - expected).abs() / expected;
            assert!(dev <= 0.2, "class {k}: {n} vs {expected:.1}");
        }
    }

    #[test]
    fn dataset_rejects_zero_and_has_unique_ids() {
        assert!(generate_dataset(&cfg(1), 0, Exec::Sequential).is_err());
        let d = generate_dataset(&cfg(1), 12, Exec::Sequential).unwrap();
        let mut ids: Vec<_> = d.iter().map(|r| r.image_id.clone()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 12);
    }

    #[test]
    fn impossible_placement_is_reported() {
        let c = SceneConfig {
            objects_per_image: (30, 30),
            scale_range: (0.3, 0.33),
            ..cfg(1)
        };
        assert!(matches!(
            generate_scene(&c, 0),
            Err(Error::Placement { .. })
        ));
    }

    #[test]
    fn four_task_views_nonempty_and_match_brute_force() {
        let c = cfg(9);
        let data = generate_dataset(&c, 40, Exec::Sequential).unwrap();
        let sched = TaskSchedule::from_ids(&[&[1, 2], &[3, 4], &[5, 6], &[7, 8]]).unwrap();
        let reg = ClassRegistry::new(sched.clone(), 1).unwrap();
        for t in 1..=4 {
            let view = make_task_view(&data, &reg, t).unwrap();
            let classes = sched.task(t).unwrap();
            // independent count: images with at least one annotation in C^t
            let mut expected_images = 0;
            let mut expected_anns = 0;
            for rec in &data {
                let n = rec
                    .annotations
                    .iter()
                    .filter(|a| classes.iter().any(|c| *c == a.class_id))
                    .count();
                if n > 0 {
                    expected_images += 1;
                    expected_anns += n;
                }
            }
            assert!(expected_images > 0);
            assert_eq!(view.len(), expected_images);
            assert_eq!(
                view.iter().map(|r| r.annotations.len()).sum::<usize>(),
                expected_anns
            );
        }
    }

    /// Pixel extents of `color`, optionally restricted to a neighbourhood of `near`.
    fn tight_box_of_color(
        r: &Raster,
        color: [u8; 3],
        near: Option<BoundingBox>,
    ) -> Option<BoundingBox> {
        let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0, 0);
        let mut any = false;
        for y in 0..r.height {
            for x in 0..r.width {
                if let Some(b) = near {
                    let (fx, fy) = (x as f64, y as f64);
                    if fx < b.x1() - 2.0
                        || fx > b.x2() + 2.0
                        || fy < b.y1() - 2.0
                        || fy > b.y2() + 2.0
                    {
                        continue;
                    }
                }
                if r.pixel(x, y) == color {
                    any = true;
                    x1 = x1.min(x);
                    y1 = y1.min(y);
                    x2 = x2.max(x);
                    y2 = y2.max(y);
                }
            }
        }
        any.then(|| {
            BoundingBox::new(x1 as f64, y1 as f64, x2 as f64 + 1.0, y2 as f64 + 1.0).unwrap()
        })
    }
}
