//! Axis-aligned boxes in continuous pixel coordinates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance_sq(&self, other: &Point) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }
}

/// Corner-form box. Construction rejects inverted, zero-area and non-finite
/// boxes, so every `BoundingBox` in circulation has positive area.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundingBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl<'de> Deserialize<'de> for BoundingBox {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            x1: f64,
            y1: f64,
            x2: f64,
            y2: f64,
        }
        let r = Raw::deserialize(d)?;
        BoundingBox::new(r.x1, r.y1, r.x2, r.y2).map_err(serde::de::Error::custom)
    }
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let reason = if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            Some("non-finite coordinate")
        } else if x2 <= x1 {
            Some("x2 must exceed x1")
        } else if y2 <= y1 {
            Some("y2 must exceed y1")
        } else {
            None
        };
        match reason {
            Some(reason) => Err(Error::InvalidBox {
                x1,
                y1,
                x2,
                y2,
                reason,
            }),
            None => Ok(Self { x1, y1, x2, y2 }),
        }
    }

    /// Builds a box from the `[x, y, w, h]` form used by COCO files.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(x, y, x + w, y + h)
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x1, self.y1, self.width(), self.height()]
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> Point {
        Point::new(0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn contains_strictly(&self, p: Point) -> bool {
        p.x > self.x1 && p.x < self.x2 && p.y > self.y1 && p.y < self.y2
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    /// True when the box lies within `[0, width] x [0, height]`.
    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= width && self.y2 <= height
    }

    /// Clips to the canvas, widening to `min_size` if clipping collapsed the box.
    /// Always returns a valid box provided the canvas is at least `min_size` wide.
    pub fn clip_to(x1: f64, y1: f64, x2: f64, y2: f64, width: f64, height: f64) -> BoundingBox {
        const MIN_SIZE: f64 = 1.0;
        let sanitize = |v: f64, hi: f64| if v.is_finite() { v.clamp(0.0, hi) } else { 0.0 };
        let (mut x1, mut x2) = (sanitize(x1, width), sanitize(x2, width));
        let (mut y1, mut y2) = (sanitize(y1, height), sanitize(y2, height));
        if x2 < x1 {
            std::mem::swap(&mut x1, &mut x2);
        }
        if y2 < y1 {
            std::mem::swap(&mut y1, &mut y2);
        }
        if x2 - x1 < MIN_SIZE {
            let c = (0.5 * (x1 + x2)).clamp(MIN_SIZE / 2.0, width - MIN_SIZE / 2.0);
            x1 = c - MIN_SIZE / 2.0;
            x2 = c + MIN_SIZE / 2.0;
        }
        if y2 - y1 < MIN_SIZE {
            let c = (0.5 * (y1 + y2)).clamp(MIN_SIZE / 2.0, height - MIN_SIZE / 2.0);
            y1 = c - MIN_SIZE / 2.0;
            y2 = c + MIN_SIZE / 2.0;
        }
        BoundingBox { x1, y1, x2, y2 }
    }
}

/// Intersection over union; 0 for disjoint boxes, 1 for identical ones.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bb(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn iou_identity_and_disjoint() {
        let a = bb(0.0, 0.0, 1.0, 1.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bb(2.0, 2.0, 3.0, 3.0)), 0.0);
    }

    #[test]
    fn iou_half_overlap() {
        // intersection 2, union 6
        let v = iou(&bb(0.0, 0.0, 2.0, 2.0), &bb(1.0, 0.0, 3.0, 2.0));
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_degenerate() {
        assert!(BoundingBox::new(1.0, 0.0, 1.0, 2.0).is_err());
        assert!(BoundingBox::new(2.0, 0.0, 1.0, 2.0).is_err());
        assert!(BoundingBox::new(0.0, 0.0, f64::NAN, 2.0).is_err());
        assert!(serde_json::from_str::<BoundingBox>(r#"{"x1":0,"y1":0,"x2":0,"y2":1}"#).is_err());
    }

    #[test]
    fn xywh_conversion() {
        let b = BoundingBox::from_xywh(10.0, 10.0, 20.0, 30.0).unwrap();
        assert_eq!((b.x1(), b.y1(), b.x2(), b.y2()), (10.0, 10.0, 30.0, 40.0));
        assert_eq!(b.to_xywh(), [10.0, 10.0, 20.0, 30.0]);
    }

    #[test]
    fn clip_never_degenerates() {
        let b = BoundingBox::clip_to(-5.0, 130.0, -1.0, 140.0, 128.0, 128.0);
        assert!(b.width() >= 1.0 && b.height() >= 1.0);
        assert!(b.within(128.0, 128.0));
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (0.0..100.0f64, 0.0..100.0f64, 0.5..50.0f64, 0.5..50.0f64)
            .prop_map(|(x, y, w, h)| bb(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            if a != b {
                prop_assert!(ab < 1.0);
            }
        }
    }
}
