//! Versioned binary checkpoints.
//!
//! Layout: `OWCK` magic, `u32` version, `u64` header length, a JSON header
//! (architecture, class list, registry, training config, parameter layout),
//! then every parameter as little-endian `f64`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{ClassId, ClassRegistry};
use crate::error::{io_err, Error, Result};

use super::params::{ArchConfig, ModelParams, ParamLayout};
use super::train::TrainConfig;

const MAGIC: &[u8; 4] = b"OWCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    arch: ArchConfig,
    classes: Vec<ClassId>,
    seed: u64,
    layout: ParamLayout,
    registry: Option<ClassRegistry>,
    train: Option<TrainConfig>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub registry: Option<ClassRegistry>,
    pub train: Option<TrainConfig>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let p = &self.params;
        let header = serde_json::to_vec(&Header {
            arch: p.arch.clone(),
            classes: p.classes.clone(),
            seed: p.seed,
            layout: p.layout.clone(),
            registry: self.registry.clone(),
            train: self.train.clone(),
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + 8 * p.values.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &p.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..).ok_or_else(|| bad("truncated"))?;
        let hbytes = body.get(..hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(hbytes)?;
        header.arch.validate()?;
        let expected = ParamLayout::build(&header.arch, header.classes.len());
        if expected != header.layout {
            return Err(bad("parameter layout does not match the architecture"));
        }
        let data = &body[hlen..];
        if data.len() != 8 * expected.total {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {} bytes",
                expected.total,
                data.len()
            )));
        }
        let values: Vec<f64> = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Self {
            params: ModelParams {
                arch: header.arch,
                classes: header.classes,
                layout: header.layout,
                values,
                seed: header.seed,
            },
            registry: header.registry,
            train: header.train,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(io_err(path))?;
        f.write_all(&bytes).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(io_err(path))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::TaskSchedule;

    fn ckpt() -> Checkpoint {
        let arch = ArchConfig {
            image_size: 32,
            backbone_channels: [2, 3, 4, 5],
            fpn_channels: 3,
            roi_grid: 2,
            roi_sampling: 1,
            roi_hidden: 4,
            level_split: 10.0,
        };
        let mut params = ModelParams::init(&arch, &[ClassId(4), ClassId(9)], 5).unwrap();
        params.values[3] = f64::MIN_POSITIVE;
        params.values[4] = -0.0;
        let schedule = TaskSchedule::from_ids(&[&[4, 9], &[2]]).unwrap();
        Checkpoint {
            params,
            registry: Some(ClassRegistry::new(schedule, 1).unwrap()),
            train: Some(TrainConfig::default()),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = ckpt();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        c.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, c);
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.params.values), bits(&c.params.values));
    }

    #[test]
    fn rejects_corruption() {
        let bytes = ckpt().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(Checkpoint::from_bytes(&wrong).is_err());
        let mut version = bytes;
        version[4] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&version),
            Err(Error::Checkpoint(_))
        ));
    }
}
