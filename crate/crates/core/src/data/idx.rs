//! IDX (MNIST) file decoding.
//!
//! Image files: big-endian magic `0x00000803`, then `N`, rows, cols as u32,
//! then `N * rows * cols` unsigned bytes. Label files: magic `0x00000801`,
//! then `N`, then `N` bytes.

use std::path::Path;

use super::{LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Number of MNIST classes.
pub const MNIST_CLASSES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IdxImages<'a> {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: &'a [u8],
}

fn be_u32(bytes: &[u8], offset: usize, what: &'static str, field: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Decode {
            what,
            offset: offset.min(bytes.len()),
            reason: format!("truncated {field}"),
        })
}

pub fn decode_images(bytes: &[u8]) -> Result<IdxImages<'_>> {
    const WHAT: &str = "IDX image file";
    let magic = be_u32(bytes, 0, WHAT, "magic number")?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Decode {
            what: WHAT,
            offset: 0,
            reason: format!("bad magic number {magic:#010x}, expected {IMAGES_MAGIC:#010x}"),
        });
    }
    let count = be_u32(bytes, 4, WHAT, "image count")? as usize;
    let rows = be_u32(bytes, 8, WHAT, "row count")? as usize;
    let cols = be_u32(bytes, 12, WHAT, "column count")? as usize;
    if count == 0 || rows == 0 || cols == 0 {
        return Err(Error::Decode {
            what: WHAT,
            offset: 4,
            reason: format!("empty dimensions {count}x{rows}x{cols}"),
        });
    }
    let body = count
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::Decode {
            what: WHAT,
            offset: 4,
            reason: "dimension product overflows".into(),
        })?;
    let available = bytes.len() - 16;
    if available < body {
        return Err(Error::Decode {
            what: WHAT,
            offset: bytes.len(),
            reason: format!("truncated pixel data: need {body} bytes, have {available}"),
        });
    }
    if available > body {
        return Err(Error::Decode {
            what: WHAT,
            offset: 16 + body,
            reason: format!("{} trailing bytes", available - body),
        });
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: &bytes[16..],
    })
}

pub fn decode_labels(bytes: &[u8]) -> Result<&[u8]> {
    const WHAT: &str = "IDX label file";
    let magic = be_u32(bytes, 0, WHAT, "magic number")?;
    if magic != LABELS_MAGIC {
        return Err(Error::Decode {
            what: WHAT,
            offset: 0,
            reason: format!("bad magic number {magic:#010x}, expected {LABELS_MAGIC:#010x}"),
        });
    }
    let count = be_u32(bytes, 4, WHAT, "label count")? as usize;
    let available = bytes.len() - 8;
    if available != count {
        return Err(Error::Decode {
            what: WHAT,
            offset: if available < count {
                bytes.len()
            } else {
                8 + count
            },
            reason: format!("header declares {count} labels, file holds {available}"),
        });
    }
    Ok(&bytes[8..])
}

/// Decodes an image/label file pair into a dataset with pixels `byte / 255`.
pub fn decode_pair(images: &[u8], labels: &[u8], split: Split) -> Result<LabeledDataset> {
    let img = decode_images(images)?;
    let lab = decode_labels(labels)?;
    if lab.len() != img.count {
        return Err(Error::Decode {
            what: "IDX label file",
            offset: 4,
            reason: format!("{} labels for {} images", lab.len(), img.count),
        });
    }
    if let Some(pos) = lab.iter().position(|&l| l as usize >= MNIST_CLASSES) {
        return Err(Error::Decode {
            what: "IDX label file",
            offset: 8 + pos,
            reason: format!("label {} out of range", lab[pos]),
        });
    }
    let pixels = img.pixels.iter().map(|&b| b as f32 / 255.0).collect();
    let images = Tensor::new(vec![img.count, 1, img.rows, img.cols], pixels)?;
    LabeledDataset::new(
        images,
        lab.iter().map(|&l| l as usize).collect(),
        MNIST_CLASSES,
        split,
    )
}

pub fn load_mnist_idx(
    images_path: &Path,
    labels_path: &Path,
    split: Split,
) -> Result<LabeledDataset> {
    let images = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let labels = std::fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    decode_pair(&images, &labels, split)
}

/// Loads the standard file names (`train-*` or `t10k-*`) from `dir`.
pub fn load_mnist_dir(dir: &Path, split: Split) -> Result<LabeledDataset> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    load_mnist_idx(
        &dir.join(format!("{prefix}-images-idx3-ubyte")),
        &dir.join(format!("{prefix}-labels-idx1-ubyte")),
        split,
    )
}

/// Encodes a dataset back into an IDX pair. Pixels are rounded to bytes.
pub fn encode_pair(ds: &LabeledDataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let shape = ds.images.shape();
    if shape[1] != 1 {
        return Err(Error::invalid("IDX encoding needs single-channel images"));
    }
    let mut images = Vec::with_capacity(16 + ds.images.len());
    images.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    for d in [shape[0], shape[2], shape[3]] {
        images.extend_from_slice(&(d as u32).to_be_bytes());
    }
    images.extend(ds.images.data().iter().map(|&v| (v * 255.0).round() as u8));
    let mut labels = Vec::with_capacity(8 + ds.len());
    labels.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    labels.extend(ds.labels.iter().map(|&l| l as u8));
    Ok((images, labels))
}
