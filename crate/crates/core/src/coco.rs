//! COCO-style annotation files and task schedule files.
//!
//! Only the fields needed for box detection are read: `images` (id, width,
//! height, file_name), `annotations` (id, image_id, category_id, bbox as
//! `[x, y, w, h]`) and `categories` (id, name). Segmentation and crowd
//! fields are ignored.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{Annotation, ClassId, ImageRecord, TaskSchedule};
use crate::error::{io_err, Error, Result};
use crate::geometry::BoundingBox;
use crate::raster_io;

/// COCO image ids are integers in the wild; synthetic sets may use strings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CocoId {
    Int(u64),
    Text(String),
}

impl CocoId {
    fn from_image_id(id: &str) -> Self {
        match id.parse::<u64>() {
            Ok(n) if n.to_string() == id => CocoId::Int(n),
            _ => CocoId::Text(id.to_string()),
        }
    }

    fn as_string(&self) -> String {
        match self {
            CocoId::Int(n) => n.to_string(),
            CocoId::Text(s) => s.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: CocoId,
    pub width: Option<usize>,
    pub height: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file_name: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: CocoId,
    pub category_id: u32,
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u32,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoFile {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

impl CocoFile {
    pub fn from_records(records: &[ImageRecord], categories: Vec<CocoCategory>) -> Self {
        let images = records
            .iter()
            .map(|r| CocoImage {
                id: CocoId::from_image_id(&r.image_id),
                width: Some(r.width),
                height: Some(r.height),
                file_name: r.file_name.clone(),
            })
            .collect();
        let annotations = records
            .iter()
            .flat_map(|r| r.annotations.iter().map(move |a| (r, a)))
            .enumerate()
            .map(|(i, (r, a))| CocoAnnotation {
                id: i as u64 + 1,
                image_id: CocoId::from_image_id(&r.image_id),
                category_id: a.class_id.0,
                bbox: a.bbox.to_xywh(),
            })
            .collect();
        Self {
            images,
            annotations,
            categories,
        }
    }

    /// Converts to records, validating categories against `schedule` when given.
    pub fn to_records(&self, schedule: Option<&TaskSchedule>) -> Result<Vec<ImageRecord>> {
        let mut order: Vec<String> = Vec::with_capacity(self.images.len());
        let mut by_id: BTreeMap<String, ImageRecord> = BTreeMap::new();
        for img in &self.images {
            let id = img.id.as_string();
            let (width, height) = match (img.width, img.height) {
                (Some(w), Some(h)) if w > 0 && h > 0 => (w, h),
                _ => {
                    return Err(Error::Coco(format!("image {id} is missing its dimensions")));
                }
            };
            if by_id.contains_key(&id) {
                return Err(Error::Coco(format!("duplicate image id {id}")));
            }
            order.push(id.clone());
            by_id.insert(
                id.clone(),
                ImageRecord {
                    image_id: id,
                    width,
                    height,
                    file_name: img.file_name.clone(),
                    annotations: Vec::new(),
                    raster: None,
                },
            );
        }
        for ann in &self.annotations {
            let class_id = ClassId(ann.category_id);
            if let Some(s) = schedule {
                if !s.contains(class_id) {
                    return Err(Error::UnknownCategory(ann.category_id));
                }
            }
            let image_id = ann.image_id.as_string();
            let rec = by_id.get_mut(&image_id).ok_or_else(|| {
                Error::Coco(format!(
                    "annotation {} refers to missing image {image_id}",
                    ann.id
                ))
            })?;
            let [x, y, w, h] = ann.bbox;
            let bbox = BoundingBox::from_xywh(x, y, w, h)
                .map_err(|e| Error::Coco(format!("annotation {}: {e}", ann.id)))?;
            // Allow half a pixel of slack for rounding in third-party files.
            if !bbox.within(rec.width as f64 + 0.5, rec.height as f64 + 0.5)
                || bbox.x1() < -0.5
                || bbox.y1() < -0.5
            {
                return Err(Error::Coco(format!(
                    "annotation {} box {:?} exceeds image {image_id} bounds",
                    ann.id, ann.bbox
                )));
            }
            rec.annotations.push(Annotation { class_id, bbox });
        }
        Ok(order
            .into_iter()
            .map(|id| by_id.remove(&id).expect("inserted above"))
            .collect())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| Error::Coco(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(io_err(path))
    }
}

/// Reads an annotation file into records. Images without annotations are
/// kept. When `image_root` is given, each image's raster is loaded from
/// `image_root/file_name`.
pub fn ingest_coco(
    annotation_file: &Path,
    image_root: Option<&Path>,
    schedule: Option<&TaskSchedule>,
) -> Result<Vec<ImageRecord>> {
    let file = CocoFile::read(annotation_file)?;
    let mut records = file.to_records(schedule)?;
    if let Some(root) = image_root {
        for rec in &mut records {
            let name = rec
                .file_name
                .as_deref()
                .ok_or_else(|| Error::Coco(format!("image {} has no file_name", rec.image_id)))?;
            let raster = raster_io::read_png(&root.join(name))?;
            if raster.width != rec.width || raster.height != rec.height {
                return Err(Error::Coco(format!(
                    "image {} is {}x{} on disk but {}x{} in the annotation file",
                    rec.image_id, raster.width, raster.height, rec.width, rec.height
                )));
            }
            rec.raster = Some(raster);
        }
    }
    Ok(records)
}

/// Schedule file: a JSON array of tasks, each an array of category ids.
pub fn read_schedule(path: &Path) -> Result<TaskSchedule> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_schedule(schedule: &TaskSchedule, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_string(schedule)?).map_err(io_err(path))
}
