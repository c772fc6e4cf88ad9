//! Reader for the big-endian IDX files used by MNIST-style corpora.
//!
//! Image files: magic `0x00000803` (unsigned bytes, 3 dims), then
//! `u32 count, u32 rows, u32 cols`, then `count * rows * cols` pixels.
//! Label files: magic `0x00000801`, `u32 count`, then `count` bytes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numkern::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    match bytes.get(at..at + 4) {
        Some(b) => Ok(u32::from_be_bytes(b.try_into().expect("4-byte slice"))),
        None => Err(Error::format(
            at.min(bytes.len()) as u64,
            format!("truncated header: missing {what}"),
        )),
    }
}

fn check_magic(bytes: &[u8], want: u32) -> Result<()> {
    let magic = read_u32(bytes, 0, "magic")?;
    if magic != want {
        return Err(Error::format(
            0,
            format!("bad IDX magic 0x{magic:08x}, expected 0x{want:08x}"),
        ));
    }
    Ok(())
}

/// Parses an image file into an `n × (rows·cols)` tensor scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    check_magic(bytes, IDX_IMAGES_MAGIC)?;
    let n = read_u32(bytes, 4, "item count")? as usize;
    let rows = read_u32(bytes, 8, "row count")? as usize;
    let cols = read_u32(bytes, 12, "column count")? as usize;
    let d = rows * cols;
    let need = n * d;
    let payload = &bytes[16..];
    if payload.len() < need {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated payload: {} of {need} pixel bytes", payload.len()),
        ));
    }
    if payload.len() > need {
        return Err(Error::format((16 + need) as u64, "trailing bytes after pixel payload"));
    }
    let data = payload.iter().map(|&p| p as f64 / 255.0).collect();
    Tensor::matrix(n, d, data)
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    check_magic(bytes, IDX_LABELS_MAGIC)?;
    let n = read_u32(bytes, 4, "item count")? as usize;
    let payload = &bytes[8..];
    if payload.len() < n {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated payload: {} of {n} label bytes", payload.len()),
        ));
    }
    if payload.len() > n {
        return Err(Error::format((8 + n) as u64, "trailing bytes after label payload"));
    }
    Ok(payload.iter().map(|&b| b as usize).collect())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Loads an image file and its label file.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<(Tensor, Vec<usize>)> {
    let features = parse_idx_images(&read(images.as_ref())?)?;
    let labels = parse_idx_labels(&read(labels.as_ref())?)?;
    if labels.len() != features.rows() {
        return Err(Error::format(
            4,
            format!(
                "label count {} does not match image count {}",
                labels.len(),
                features.rows()
            ),
        ));
    }
    Ok((features, labels))
}

/// Serializes images in the IDX layout. Used to build fixtures.
pub fn encode_idx_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let d = rows * cols;
    assert!(
        d > 0 && pixels.len().is_multiple_of(d),
        "pixel buffer not a whole number of images"
    );
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&((pixels.len() / d) as u32).to_be_bytes());
    out.extend_from_slice(&(rows as u32).to_be_bytes());
    out.extend_from_slice(&(cols as u32).to_be_bytes());
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
