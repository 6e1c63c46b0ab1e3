//! Validated batch types shared across the crate.
//!
//! Images live in `[0, 1]` with shape `(batch, channels, height, width)`;
//! attacks and augmentation must keep them there. Labels are class indices
//! checked against the number of classes once, at construction.

use ndarray::{Array2, Array4};

use crate::error::{Error, Result};

/// Classifier outputs, shape `(batch, num_classes)`.
pub type Logits = Array2<f32>;

/// A batch of images in `[0, 1]`, shape `(batch, channels, height, width)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    data: Array4<f32>,
}

impl ImageBatch {
    /// Wraps an array after checking every value is finite and in `[0, 1]`.
    pub fn new(data: Array4<f32>) -> Result<Self> {
        for &v in data.iter() {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::input(format!(
                    "image value {v} outside [0, 1]"
                )));
            }
        }
        Ok(ImageBatch { data })
    }

    /// Wraps an array that is already known to be valid.
    ///
    /// Only invariant-preserving code paths (projection output, crops of
    /// valid images) may use this; test builds still verify.
    pub fn from_valid(data: Array4<f32>) -> Self {
        debug_assert!(
            data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)),
            "from_valid called with out-of-range image data"
        );
        ImageBatch { data }
    }

    pub fn array(&self) -> &Array4<f32> {
        &self.data
    }

    pub fn into_array(self) -> Array4<f32> {
        self.data
    }

    /// Number of images in the batch.
    pub fn len(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(channels, height, width)` of a single image.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.data.shape();
        (s[1], s[2], s[3])
    }
}

/// A batch of class labels, each strictly below `num_classes`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelBatch {
    labels: Vec<u32>,
    num_classes: u32,
}

impl LabelBatch {
    pub fn new(labels: Vec<u32>, num_classes: u32) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::config(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::input(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(LabelBatch { labels, num_classes })
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn num_classes(&self) -> u32 {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Predicted class per row: argmax with ties broken toward the lower index.
pub fn argmax_classes(logits: &Logits) -> Vec<u32> {
    logits
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0usize;
            let mut best_v = f32::NEG_INFINITY;
            for (k, &v) in row.iter().enumerate() {
                if v > best_v {
                    best_v = v;
                    best = k;
                }
            }
            best as u32
        })
        .collect()
}
