//! Labelled datasets, file loaders, synthetic generators and run configs.

mod cifar;
mod config;
mod idx;
mod synth;

pub use cifar::{load_cifar_bin, parse_cifar_bin, CIFAR_RECORD};
pub use config::{parse_grid, ConfigError, RunConfig};
pub use idx::{load_idx, parse_idx_images, parse_idx_labels, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use synth::{synth_blobs, synth_two_moons};

use thiserror::Error;

use crate::error::{Error, Result};
use crate::nd::{Real, Tensor};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DataError {
    #[error("{file}: bad magic 0x{found:08x} at offset {offset}, expected 0x{expected:08x}")]
    BadMagic { file: String, offset: usize, found: u32, expected: u32 },
    #[error("{file}: truncated, expected {expected} bytes, found {found}")]
    Truncated { file: String, expected: usize, found: usize },
    #[error("count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("{file}: length {len} is not a multiple of the {record}-byte record")]
    RecordLength { file: String, len: usize, record: usize },
    #[error("{file}: label {label} out of range at record {record}")]
    LabelRange { file: String, record: usize, label: usize },
}

/// Inputs `[N, ...]` in `[0, 1]` with integer labels in `0..classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    inputs: Tensor<T>,
    labels: Vec<usize>,
    classes: usize,
}

impl<T: Real> Dataset<T> {
    pub fn new(inputs: Tensor<T>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.rank() < 2 {
            return Err(Error::Dimension(format!(
                "dataset inputs need a leading batch axis, got shape {:?}",
                inputs.shape()
            )));
        }
        if inputs.shape()[0] != labels.len() {
            return Err(Error::Dimension(format!("{} inputs but {} labels", inputs.shape()[0], labels.len())));
        }
        if classes < 2 {
            return Err(Error::Domain(format!("need at least 2 classes, got {classes}")));
        }
        if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= classes) {
            return Err(Error::Index(format!("label {y} at row {i} exceeds {classes} classes")));
        }
        Ok(Self { inputs, labels, classes })
    }

    /// Replaces the class count (e.g. when a subset lacks the top class).
    pub fn with_classes(self, classes: usize) -> Result<Self> {
        Self::new(self.inputs, self.labels, classes)
    }

    pub fn inputs(&self) -> &Tensor<T> {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-example shape.
    pub fn example_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        if let Some(&r) = rows.iter().find(|&&r| r >= self.len()) {
            return Err(Error::Index(format!("row {r} out of range for {} examples", self.len())));
        }
        let inputs = self.inputs.select_rows(rows);
        let labels = rows.iter().map(|&r| self.labels[r]).collect();
        Self::new(inputs, labels, self.classes)
    }

    /// The first `n` rows (or all of them).
    pub fn take(&self, n: usize) -> Result<Self> {
        let rows: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&rows)
    }

    pub fn cast<U: Real>(&self) -> Dataset<U> {
        Dataset { inputs: self.inputs.cast(), labels: self.labels.clone(), classes: self.classes }
    }
}

/// Joins an image tensor and a label vector loaded from separate files.
pub fn zip_images_labels<T: Real>(images: Tensor<T>, labels: Vec<usize>) -> Result<Dataset<T>> {
    if images.shape().first() != Some(&labels.len()) {
        return Err(DataError::CountMismatch {
            images: images.shape().first().copied().unwrap_or(0),
            labels: labels.len(),
        }
        .into());
    }
    let classes = labels.iter().max().map_or(2, |&m| (m + 1).max(2));
    Dataset::new(images, labels, classes)
}
