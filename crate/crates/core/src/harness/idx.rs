use std::fs;
use std::path::Path;

use crate::data::LabeledImages;
use crate::diffusion::ImageTensor;
use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Corrupt(format!("{what}: header truncated")))
}

/// Parses an IDX image file (`u8` pixels) into `[-1, 1]` tensors.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Vec<ImageTensor>> {
    let magic = be_u32(bytes, 0, "images")?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Corrupt(format!("images: bad magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4, "images")? as usize;
    let rows = be_u32(bytes, 8, "images")? as usize;
    let cols = be_u32(bytes, 12, "images")? as usize;
    let px = rows * cols;
    let body = &bytes[16..];
    if body.len() != n * px {
        return Err(Error::Corrupt(format!(
            "images: expected {} pixel bytes, found {}",
            n * px,
            body.len()
        )));
    }
    Ok(body
        .chunks(px.max(1))
        .take(n)
        .map(|chunk| ImageTensor {
            channels: 1,
            height: rows,
            width: cols,
            data: chunk.iter().map(|&p| p as f64 / 127.5 - 1.0).collect(),
        })
        .collect())
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, "labels")?;
    if magic != LABELS_MAGIC {
        return Err(Error::Corrupt(format!("labels: bad magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4, "labels")? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::Corrupt(format!(
            "labels: expected {n} bytes, found {}",
            body.len()
        )));
    }
    Ok(body.iter().map(|&b| b as usize).collect())
}

/// Loads an IDX image/label file pair. The class count is one more than the
/// largest label.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledImages> {
    let images = parse_idx_images(&fs::read(images_path)?)?;
    let labels = parse_idx_labels(&fs::read(labels_path)?)?;
    if images.len() != labels.len() {
        return Err(Error::Corrupt(format!(
            "{} images but {} labels",
            images.len(),
            labels.len()
        )));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    LabeledImages::new(images, labels, classes)
}

/// Nearest-neighbour resize of a single-channel image.
pub fn resize_nearest(img: &ImageTensor, size: usize) -> ImageTensor {
    if img.height == size && img.width == size {
        return img.clone();
    }
    let mut data = Vec::with_capacity(img.channels * size * size);
    for c in 0..img.channels {
        for r in 0..size {
            let sr = r * img.height / size;
            for q in 0..size {
                let sq = q * img.width / size;
                data.push(img.data[(c * img.height + sr) * img.width + sq]);
            }
        }
    }
    ImageTensor {
        channels: img.channels,
        height: size,
        width: size,
        data,
    }
}

/// Encodes images (values in `[-1, 1]`) and labels as an IDX pair.
pub fn encode_idx(images: &[ImageTensor], labels: &[usize]) -> (Vec<u8>, Vec<u8>) {
    let (rows, cols) = images.first().map_or((0, 0), |i| (i.height, i.width));
    let mut img = Vec::new();
    img.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&(images.len() as u32).to_be_bytes());
    img.extend_from_slice(&(rows as u32).to_be_bytes());
    img.extend_from_slice(&(cols as u32).to_be_bytes());
    for i in images {
        img.extend(i.data.iter().map(|v| ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8));
    }
    let mut lab = Vec::new();
    lab.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    lab.extend(labels.iter().map(|&l| l as u8));
    (img, lab)
}
