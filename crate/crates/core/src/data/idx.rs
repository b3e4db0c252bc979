//! IDX files: big-endian headers followed by raw unsigned bytes.

use std::path::Path;

use super::Dataset;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Truncated(format!("{what}: header ends at byte {}", bytes.len())))
}

fn check_magic(bytes: &[u8], expected: u32, what: &str) -> Result<()> {
    let found = be_u32(bytes, 0, what)?;
    if found != expected {
        return Err(Error::BadMagic { expected, found });
    }
    Ok(())
}

/// Parses an image file into `(count, rows, cols, pixels)`.
pub fn parse_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    check_magic(bytes, IMAGES_MAGIC, "images")?;
    let n = be_u32(bytes, 4, "images")? as usize;
    let rows = be_u32(bytes, 8, "images")? as usize;
    let cols = be_u32(bytes, 12, "images")? as usize;
    let len = n * rows * cols;
    let body = &bytes[16..];
    if body.len() < len {
        return Err(Error::Truncated(format!("images: {} of {len} pixel bytes", body.len())));
    }
    Ok((n, rows, cols, &body[..len]))
}

pub fn parse_labels(bytes: &[u8]) -> Result<&[u8]> {
    check_magic(bytes, LABELS_MAGIC, "labels")?;
    let n = be_u32(bytes, 4, "labels")? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::Truncated(format!("labels: {} of {n} bytes", body.len())));
    }
    Ok(&body[..n])
}

pub fn encode_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let n = if rows * cols == 0 { 0 } else { pixels.len() / (rows * cols) };
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Builds a single-channel dataset from IDX image and label bytes. The class
/// count is 10, or one more than the largest label if that is larger.
pub fn dataset_from_idx(name: &str, images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let (n, rows, cols, pixels) = parse_images(images)?;
    let labels = parse_labels(labels)?;
    if labels.len() != n {
        return Err(Error::shape("load_idx", format!("{n} images but {} labels", labels.len())));
    }
    let data = pixels.iter().map(|&b| b as f32 / 255.0).collect();
    let images = Tensor::new(vec![n, 1, rows, cols], data)?;
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(10, |&m| (m + 1).max(10));
    Dataset::new(name, images, Some(labels), classes)
}

pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img = std::fs::read(images).map_err(|e| Error::io(images, e))?;
    let lab = std::fs::read(labels).map_err(|e| Error::io(labels, e))?;
    let name = images.file_stem().map_or_else(|| "idx".into(), |s| s.to_string_lossy().into_owned());
    dataset_from_idx(&name, &img, &lab)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let bytes = encode_images(2, 3, &[0; 12]);
        assert_eq!(&bytes[..16], &[0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 3]);
        assert_eq!(&encode_labels(&[7, 1])[..], &[0, 0, 8, 1, 0, 0, 0, 2, 7, 1]);
    }

    #[test]
    fn round_trip_and_scaling() {
        let pixels: Vec<u8> = (0..2 * 4 * 5).map(|i| (i * 6) as u8).collect();
        let d = dataset_from_idx("t", &encode_images(4, 5, &pixels), &encode_labels(&[3, 9])).unwrap();
        assert_eq!(d.images().shape(), &[2, 1, 4, 5]);
        assert_eq!(d.labels().unwrap(), &[3, 9]);
        assert_eq!(d.classes(), 10);
        assert_eq!(d.images().data()[1], 6.0 / 255.0);
        let back: Vec<u8> = d.images().data().iter().map(|&v| (v * 255.0).round() as u8).collect();
        assert_eq!(back, pixels);
    }

    #[test]
    fn errors() {
        let img = encode_images(2, 2, &[0; 8]);
        assert!(matches!(dataset_from_idx("t", &img, &encode_labels(&[1])), Err(Error::Shape { .. })));
        assert!(matches!(
            dataset_from_idx("t", &encode_labels(&[1]), &encode_labels(&[1])),
            Err(Error::BadMagic { expected: IMAGES_MAGIC, found: LABELS_MAGIC })
        ));
        assert!(matches!(parse_images(&img[..img.len() - 1]), Err(Error::Truncated(_))));
        assert!(matches!(parse_labels(&[0, 0, 8]), Err(Error::Truncated(_))));
    }

    #[test]
    fn empty_files() {
        let d = dataset_from_idx("t", &encode_images(28, 28, &[]), &encode_labels(&[])).unwrap();
        assert!(d.is_empty());
        assert_eq!(d.image_shape(), [1, 28, 28]);
    }
}
