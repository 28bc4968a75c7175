//! MNIST-style IDX files (big-endian), plain or gzip-compressed.

use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;

use super::{Dataset, Inputs, Normalization, Split};
use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Reads a whole file, inflating it when it starts with the gzip signature.
pub fn read_maybe_gzip(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| {
                Error::format(path.display().to_string(), format!("bad gzip stream: {e}"))
            })?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize, what: &str, field: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| {
            Error::format(
                what,
                format!("truncated while reading {field} (offset {offset})"),
            )
        })
}

/// Image payload of an IDX3 file.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl IdxImages {
    pub fn len(&self) -> usize {
        self.pixels.len() / (self.rows * self.cols).max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

pub fn parse_idx_images(bytes: &[u8], what: &str) -> Result<IdxImages> {
    let magic = be_u32(bytes, 0, what, "magic")?;
    if magic != IMAGES_MAGIC {
        return Err(Error::format(
            what,
            format!("bad magic 0x{magic:08x}, expected 0x{IMAGES_MAGIC:08x} (offset 0)"),
        ));
    }
    let n = be_u32(bytes, 4, what, "image count")? as usize;
    let rows = be_u32(bytes, 8, what, "row count")? as usize;
    let cols = be_u32(bytes, 12, what, "column count")? as usize;
    let need = n * rows * cols;
    let body = &bytes[16..];
    if body.len() != need {
        return Err(Error::format(
            what,
            format!(
                "header declares {n}×{rows}×{cols} = {need} pixel bytes but {} follow (offset 16)",
                body.len()
            ),
        ));
    }
    Ok(IdxImages {
        rows,
        cols,
        pixels: body.to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8], what: &str) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, what, "magic")?;
    if magic != LABELS_MAGIC {
        return Err(Error::format(
            what,
            format!("bad magic 0x{magic:08x}, expected 0x{LABELS_MAGIC:08x} (offset 0)"),
        ));
    }
    let n = be_u32(bytes, 4, what, "label count")? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::format(
            what,
            format!(
                "header declares {n} labels but {} bytes follow (offset 8)",
                body.len()
            ),
        ));
    }
    Ok(body.to_vec())
}

/// Loads an image/label file pair, scaling pixels to `[0, 1]`.
pub fn load_idx(images: &Path, labels: &Path, num_classes: usize, split: Split) -> Result<Dataset> {
    let img = parse_idx_images(&read_maybe_gzip(images)?, &images.display().to_string())?;
    let lab = parse_idx_labels(&read_maybe_gzip(labels)?, &labels.display().to_string())?;
    if img.len() != lab.len() {
        return Err(Error::format(
            labels.display().to_string(),
            format!("{} labels for {} images", lab.len(), img.len()),
        ));
    }
    let width = img.rows * img.cols;
    let data = img.pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let mut ds = Dataset::new(
        Inputs::Dense { width, data },
        lab.into_iter().map(usize::from).collect(),
        num_classes,
        split,
    )?;
    ds.normalization = Normalization::UnitScale;
    Ok(ds)
}

/// Fashion-MNIST layout: `{train,t10k}-{images-idx3,labels-idx1}-ubyte[.gz]`.
pub fn load_fashion_mnist(dir: &Path) -> Result<(Dataset, Dataset)> {
    let find = |stem: &str| -> Result<std::path::PathBuf> {
        for cand in [stem.to_string(), format!("{stem}.gz")] {
            let p = dir.join(cand);
            if p.exists() {
                return Ok(p);
            }
        }
        Err(Error::config(
            "dataset.path",
            format!("{} has no {stem}[.gz]", dir.display()),
        ))
    };
    let train = load_idx(
        &find("train-images-idx3-ubyte")?,
        &find("train-labels-idx1-ubyte")?,
        10,
        Split::Train,
    )?;
    let test = load_idx(
        &find("t10k-images-idx3-ubyte")?,
        &find("t10k-labels-idx1-ubyte")?,
        10,
        Split::Test,
    )?;
    Ok((train, test))
}

pub fn write_idx_images(
    mut w: impl Write,
    rows: usize,
    cols: usize,
    pixels: &[u8],
) -> std::io::Result<()> {
    let n = pixels.len() / (rows * cols);
    for v in [IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        w.write_all(&v.to_be_bytes())?;
    }
    w.write_all(pixels)
}

pub fn write_idx_labels(mut w: impl Write, labels: &[u8]) -> std::io::Result<()> {
    w.write_all(&LABELS_MAGIC.to_be_bytes())?;
    w.write_all(&(labels.len() as u32).to_be_bytes())?;
    w.write_all(labels)
}
