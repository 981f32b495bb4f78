use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid bounding box ({x1}, {y1}, {x2}, {y2}): {reason}")]
    InvalidBox {
        x1: f64,
        y1: f64,
        x2: f64,
        y2: f64,
        reason: &'static str,
    },

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("task index {task} out of range 1..={tasks}")]
    TaskOutOfRange { task: usize, tasks: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("cannot place {requested} non-overlapping objects in scene {index} after {attempts} attempts")]
    Placement {
        index: u64,
        requested: usize,
        attempts: usize,
    },

    #[error("malformed COCO file: {0}")]
    Coco(String),

    #[error("category id {0} is not covered by the active schedule")]
    UnknownCategory(u32),

    #[error("degenerate ltrb offsets: {0}")]
    DegenerateOffsets(String),

    #[error("point ({x}, {y}) is not strictly inside the box")]
    CenterOutsideBox { x: f64, y: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("training diverged at epoch {epoch}, step {step}: non-finite loss ({detail})")]
    Diverged {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("task {task}: {source}")]
    Task {
        task: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("missing exemplars for prior task {0}")]
    MissingExemplars(usize),

    #[error("image {0} has no raster")]
    MissingRaster(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}:{line}: {message}")]
    Schema {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
