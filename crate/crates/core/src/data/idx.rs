//! IDX (big-endian header, unsigned-byte payload) readers. Files ending in
//! `.gz` are decompressed transparently.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use flate2::read::GzDecoder;

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader: Box<dyn Read> = if path.extension().is_some_and(|e| e == "gz") {
        Box::new(GzDecoder::new(BufReader::new(file)))
    } else {
        Box::new(BufReader::new(file))
    };
    let mut buf = Vec::new();
    reader.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Truncated {
            path: path.to_path_buf(),
            detail: format!("header ends before byte {}", offset + 4),
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

fn payload<'a>(bytes: &'a [u8], header: usize, len: usize, path: &Path) -> Result<&'a [u8]> {
    let available = bytes.len().saturating_sub(header);
    if available < len {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            detail: format!("expected {len} payload bytes, found {available}"),
        });
    }
    Ok(&bytes[header..header + len])
}

/// Parses an IDX3 image buffer into `N x 1 x rows x cols` pixels scaled by 1/255.
pub fn read_idx_images(bytes: &[u8], path: &Path) -> Result<Tensor> {
    check_magic(bytes, IMAGE_MAGIC, path)?;
    let n = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    if n == 0 || rows == 0 || cols == 0 {
        return Err(Error::invalid(format!("{}: empty image file", path.display())));
    }
    let pixels = payload(bytes, 16, n * rows * cols, path)?;
    let data = pixels.iter().map(|&p| p as f32 / 255.0).collect();
    Tensor::new(vec![n, 1, rows, cols], data)
}

/// Parses an IDX1 label buffer.
pub fn read_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    check_magic(bytes, LABEL_MAGIC, path)?;
    let n = be_u32(bytes, 4, path)? as usize;
    let labels = payload(bytes, 8, n, path)?;
    Ok(labels.iter().map(|&l| l as usize).collect())
}

/// Loads an image/label file pair. The class count is `max(label) + 1`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = read_idx_images(&read_all(images_path)?, images_path)?;
    let labels = read_idx_labels(&read_all(labels_path)?, labels_path)?;
    if images.rows() != labels.len() {
        return Err(Error::CountMismatch {
            images: images.rows(),
            labels: labels.len(),
        });
    }
    let class_count = labels.iter().copied().max().unwrap_or(0) + 1;
    Dataset::new(images, labels, class_count)
}
