//! Raster persistence: one PNG per image, or a single archive keyed by image id.
//!
//! Archive layout (little-endian):
//! `b"OWRA"`, `u32` version (1), `u32` entry count, then per entry
//! `u32` id length, id bytes (UTF-8), `u32` width, `u32` height and
//! `width * height * 3` RGB bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::dataset::Raster;
use crate::error::{io_err, Error, Result};

const MAGIC: &[u8; 4] = b"OWRA";
const VERSION: u32 = 1;

pub fn write_png(raster: &Raster, path: &Path) -> Result<()> {
    let img = image::RgbImage::from_raw(
        raster.width as u32,
        raster.height as u32,
        raster.data.clone(),
    )
    .ok_or_else(|| Error::Shape("raster buffer does not match its dimensions".into()))?;
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn read_png(path: &Path) -> Result<Raster> {
    let img = image::open(path)
        .map_err(|e| match e {
            image::ImageError::IoError(source) => Error::Io {
                path: path.to_path_buf(),
                source,
            },
            other => Error::Image(other),
        })?
        .to_rgb8();
    Ok(Raster {
        width: img.width() as usize,
        height: img.height() as usize,
        data: img.into_raw(),
    })
}

pub fn write_archive<'a>(
    entries: impl IntoIterator<Item = (&'a str, &'a Raster)>,
    path: &Path,
) -> Result<()> {
    let entries: Vec<_> = entries.into_iter().collect();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (id, r) in entries {
        buf.extend_from_slice(&(id.len() as u32).to_le_bytes());
        buf.extend_from_slice(id.as_bytes());
        buf.extend_from_slice(&(r.width as u32).to_le_bytes());
        buf.extend_from_slice(&(r.height as u32).to_le_bytes());
        buf.extend_from_slice(&r.data);
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&buf).map_err(io_err(path))
}

pub fn read_archive(path: &Path) -> Result<BTreeMap<String, Raster>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(path))?;
    let bad = |msg: &str| Error::Shape(format!("{}: {msg}", path.display()));
    let mut cur = bytes.as_slice();
    let mut take = |n: usize| -> Result<&[u8]> {
        if cur.len() < n {
            return Err(bad("truncated archive"));
        }
        let (head, tail) = cur.split_at(n);
        cur = tail;
        Ok(head)
    };
    if take(4)? != MAGIC {
        return Err(bad("not a raster archive"));
    }
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes"));
    let version = u32_at(take(4)?);
    if version != VERSION {
        return Err(bad(&format!("unsupported archive version {version}")));
    }
    let count = u32_at(take(4)?) as usize;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = u32_at(take(4)?) as usize;
        let id =
            String::from_utf8(take(len)?.to_vec()).map_err(|_| bad("image id is not UTF-8"))?;
        let width = u32_at(take(4)?) as usize;
        let height = u32_at(take(4)?) as usize;
        let data = take(width * height * 3)?.to_vec();
        out.insert(
            id,
            Raster {
                width,
                height,
                data,
            },
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Raster {
        let mut r = Raster::filled(5, 4, [10, 20, 30]);
        r.set_pixel(2, 3, [255, 0, 7]);
        r
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        write_png(&sample(), &p).unwrap();
        assert_eq!(read_png(&p).unwrap(), sample());
    }

    #[test]
    fn archive_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rasters.owra");
        let a = sample();
        let b = Raster::filled(2, 2, [1, 2, 3]);
        write_archive([("a", &a), ("b", &b)], &p).unwrap();
        let back = read_archive(&p).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back["a"], a);
        assert_eq!(back["b"], b);
    }

    #[test]
    fn truncated_archive_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.owra");
        write_archive([("a", &sample())], &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(read_archive(&p).is_err());
    }
}
