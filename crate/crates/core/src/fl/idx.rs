//! IDX (MNIST) file reader.
//!
//! Big-endian; image files carry magic `0x00000803` and dimensions
//! `count, rows, cols`, label files carry `0x00000801` and `count`. Payloads
//! are raw `u8` pixels/labels.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fl::data::Dataset;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
}

/// Parses an image file into `(count, rows * cols, pixels scaled to [0, 1])`.
pub fn parse_images(bytes: &[u8]) -> std::result::Result<(usize, usize, Vec<f64>), String> {
    let magic = be_u32(bytes, 0).ok_or("truncated header")?;
    if magic != IMAGE_MAGIC {
        return Err(format!("bad image magic {magic:#010x}"));
    }
    let count = be_u32(bytes, 4).ok_or("truncated header")? as usize;
    let rows = be_u32(bytes, 8).ok_or("truncated header")? as usize;
    let cols = be_u32(bytes, 12).ok_or("truncated header")? as usize;
    let dim = rows * cols;
    let body = &bytes[16..];
    if body.len() != count * dim {
        return Err(format!(
            "expected {} pixel bytes, found {}",
            count * dim,
            body.len()
        ));
    }
    Ok((count, dim, body.iter().map(|&p| p as f64 / 255.0).collect()))
}

pub fn parse_labels(bytes: &[u8]) -> std::result::Result<Vec<u8>, String> {
    let magic = be_u32(bytes, 0).ok_or("truncated header")?;
    if magic != LABEL_MAGIC {
        return Err(format!("bad label magic {magic:#010x}"));
    }
    let count = be_u32(bytes, 4).ok_or("truncated header")? as usize;
    let body = &bytes[8..];
    if body.len() != count {
        return Err(format!("expected {count} labels, found {}", body.len()));
    }
    Ok(body.to_vec())
}

pub fn read_dataset(images: &Path, labels: &Path, classes: usize) -> Result<Dataset> {
    fn wrap(path: &Path) -> impl Fn(String) -> Error + '_ {
        move |message| Error::Idx {
            path: path.to_path_buf(),
            message,
        }
    }
    let (count, dim, pixels) = parse_images(&fs::read(images)?).map_err(wrap(images))?;
    let raw = parse_labels(&fs::read(labels)?).map_err(wrap(labels))?;
    if raw.len() != count {
        return Err(wrap(labels)(format!(
            "{} labels for {count} images",
            raw.len()
        )));
    }
    if let Some(&bad) = raw.iter().find(|&&l| l as usize >= classes) {
        return Err(wrap(labels)(format!(
            "label {bad} outside {classes} classes"
        )));
    }
    Ok(Dataset::new(
        dim,
        classes,
        pixels,
        raw.into_iter().map(usize::from).collect(),
    ))
}

/// Encodes images and labels as IDX byte streams.
pub fn encode(rows: usize, cols: usize, pixels: &[u8], labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
    let count = labels.len();
    assert_eq!(pixels.len(), count * rows * cols);
    let mut img = Vec::with_capacity(16 + pixels.len());
    for w in [IMAGE_MAGIC, count as u32, rows as u32, cols as u32] {
        img.extend_from_slice(&w.to_be_bytes());
    }
    img.extend_from_slice(pixels);
    let mut lab = Vec::with_capacity(8 + count);
    for w in [LABEL_MAGIC, count as u32] {
        lab.extend_from_slice(&w.to_be_bytes());
    }
    lab.extend_from_slice(labels);
    (img, lab)
}
