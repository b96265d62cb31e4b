//! CIFAR-10 binary batches: 1 label byte followed by a channel-major
//! `3×32×32` image, per record.

use std::path::Path;

use super::{DataError, Dataset};
use crate::error::Result;
use crate::nd::{Real, Tensor};

pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
const CIFAR_CLASSES: usize = 10;

pub fn parse_cifar_bin<T: Real>(bytes: &[u8], file: &str) -> Result<Dataset<T>> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(DataError::RecordLength { file: file.into(), len: bytes.len(), record: CIFAR_RECORD }.into());
    }
    if bytes.is_empty() {
        log::warn!("{file}: empty CIFAR file, zero records");
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(DataError::LabelRange { file: file.into(), record: i, label }.into());
        }
        labels.push(label);
        pixels.extend(rec[1..].iter().map(|&b| T::of(f64::from(b) / 255.0)));
    }
    Dataset::new(Tensor::new(vec![n, 3, 32, 32], pixels)?, labels, CIFAR_CLASSES)
}

pub fn load_cifar_bin<T: Real>(path: &Path) -> Result<Dataset<T>> {
    parse_cifar_bin(&crate::error::read_file(path)?, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn one_record_channel_major() {
        let mut rec = vec![7u8];
        rec.extend((0..3072).map(|i| (i / 1024) as u8 * 100));
        let d = parse_cifar_bin::<f64>(&rec, "t").unwrap();
        assert_eq!(d.labels(), &[7]);
        assert_eq!(d.inputs().shape(), &[1, 3, 32, 32]);
        assert_eq!(d.inputs().data()[0], 0.0);
        assert_eq!(d.inputs().data()[1024], 100.0 / 255.0);
        assert_eq!(d.inputs().data()[3071], 200.0 / 255.0);
    }

    #[test]
    fn empty_file_is_zero_records() {
        let d = parse_cifar_bin::<f32>(&[], "t").unwrap();
        assert!(d.is_empty());
    }

    #[test]
    fn ragged_length_and_bad_label() {
        assert!(matches!(
            parse_cifar_bin::<f32>(&[0; 3074], "t"),
            Err(Error::Data(DataError::RecordLength { len: 3074, .. }))
        ));
        let mut rec = vec![0u8; CIFAR_RECORD];
        rec[0] = 10;
        assert!(matches!(parse_cifar_bin::<f32>(&rec, "t"), Err(Error::Data(DataError::LabelRange { label: 10, .. }))));
    }
}
