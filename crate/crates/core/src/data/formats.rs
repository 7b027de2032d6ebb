//! IDX (MNIST/EMNIST) and CIFAR binary readers.

use std::fs;
use std::path::{Path, PathBuf};

use crate::data::dataset::Dataset;
use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

const CIFAR_IMAGE_BYTES: usize = 3 * 32 * 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CifarVariant {
    Cifar10,
    /// Coarse and fine label bytes per record; the fine label is used.
    Cifar100,
}

impl CifarVariant {
    pub fn record_len(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1 + CIFAR_IMAGE_BYTES,
            CifarVariant::Cifar100 => 2 + CIFAR_IMAGE_BYTES,
        }
    }

    pub fn classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Truncated {
            path: path.to_path_buf(),
            needed: at + 4,
            available: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let found = be_u32(bytes, 0, path)?;
    if found != expected {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found,
            expected,
        });
    }
    Ok(())
}

/// Reads an IDX image/label file pair. Pixels are scaled to `[0, 1]`; the
/// class count is one past the largest label seen.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img = read(images_path)?;
    let lab = read(labels_path)?;
    check_magic(&img, IDX_IMAGES_MAGIC, images_path)?;
    check_magic(&lab, IDX_LABELS_MAGIC, labels_path)?;
    let count = be_u32(&img, 4, images_path)? as usize;
    let rows = be_u32(&img, 8, images_path)? as usize;
    let cols = be_u32(&img, 12, images_path)? as usize;
    let nlabels = be_u32(&lab, 4, labels_path)? as usize;
    if count != nlabels {
        return Err(Error::CountMismatch {
            images: count,
            labels: nlabels,
        });
    }
    let need_img = 16 + count * rows * cols;
    if img.len() < need_img {
        return Err(Error::Truncated {
            path: images_path.to_path_buf(),
            needed: need_img,
            available: img.len(),
        });
    }
    let need_lab = 8 + count;
    if lab.len() < need_lab {
        return Err(Error::Truncated {
            path: labels_path.to_path_buf(),
            needed: need_lab,
            available: lab.len(),
        });
    }
    let pixels = img[16..need_img].iter().map(|&b| b as f32 / 255.0).collect();
    let labels: Vec<u16> = lab[8..need_lab].iter().map(|&b| b as u16).collect();
    let classes = labels.iter().copied().max().map_or(0, |m| m as usize + 1);
    Dataset::new([1, rows, cols], pixels, labels, classes)
}

/// Reads and concatenates CIFAR binary batch files.
pub fn load_cifar_binary(paths: &[PathBuf], variant: CifarVariant) -> Result<Dataset> {
    let rec = variant.record_len();
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = read(path)?;
        if bytes.is_empty() || bytes.len() % rec != 0 {
            return Err(Error::RecordSize {
                path: path.clone(),
                size: bytes.len(),
                record: rec,
            });
        }
        for r in bytes.chunks_exact(rec) {
            let (label, image) = match variant {
                CifarVariant::Cifar10 => (r[0], &r[1..]),
                CifarVariant::Cifar100 => (r[1], &r[2..]),
            };
            labels.push(label as u16);
            pixels.extend(image.iter().map(|&b| b as f32 / 255.0));
        }
    }
    Dataset::new([3, 32, 32], pixels, labels, variant.classes())
}

/// IDX image file bytes for `count` images of `rows x cols` `u8` pixels.
pub fn encode_idx_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let count = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, count as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}
