//! IDX files: big-endian header, unsigned bytes. Images are scaled by 1/255
//! and shaped `[N, 1, rows, cols]`.

use std::path::Path;

use super::{zip_images_labels, DataError, Dataset};
use crate::error::Result;
use crate::nd::{Real, Tensor};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], offset: usize, file: &str) -> Result<u32, DataError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| DataError::Truncated { file: file.into(), expected: offset + 4, found: bytes.len() })
}

fn check_magic(bytes: &[u8], expected: u32, file: &str) -> Result<(), DataError> {
    let found = be_u32(bytes, 0, file)?;
    if found != expected {
        return Err(DataError::BadMagic { file: file.into(), offset: 0, found, expected });
    }
    Ok(())
}

fn payload<'a>(bytes: &'a [u8], header: usize, dims: &[u32], file: &str) -> Result<&'a [u8], DataError> {
    let n = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d as usize));
    let expected = n.and_then(|n| n.checked_add(header)).unwrap_or(usize::MAX);
    if bytes.len() < expected {
        return Err(DataError::Truncated { file: file.into(), expected, found: bytes.len() });
    }
    Ok(&bytes[header..expected])
}

pub fn parse_idx_images<T: Real>(bytes: &[u8], file: &str) -> Result<Tensor<T>> {
    check_magic(bytes, IDX_IMAGES_MAGIC, file)?;
    let dims = [be_u32(bytes, 4, file)?, be_u32(bytes, 8, file)?, be_u32(bytes, 12, file)?];
    let data = payload(bytes, 16, &dims, file)?;
    let shape = vec![dims[0] as usize, 1, dims[1] as usize, dims[2] as usize];
    Tensor::new(shape, data.iter().map(|&b| T::of(f64::from(b) / 255.0)).collect())
}

pub fn parse_idx_labels(bytes: &[u8], file: &str) -> Result<Vec<usize>> {
    check_magic(bytes, IDX_LABELS_MAGIC, file)?;
    let n = be_u32(bytes, 4, file)?;
    Ok(payload(bytes, 8, &[n], file)?.iter().map(|&b| b as usize).collect())
}

/// Reads an image file and its label file; the class count is the largest
/// label plus one.
pub fn load_idx<T: Real>(images: &Path, labels: &Path) -> Result<Dataset<T>> {
    let x = parse_idx_images(&crate::error::read_file(images)?, &images.display().to_string())?;
    let y = parse_idx_labels(&crate::error::read_file(labels)?, &labels.display().to_string())?;
    zip_images_labels(x, y)
}
