//! Labelled image datasets and the transforms applied to them.

pub mod background;
pub mod idx;
pub mod synthetic;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use background::{
    colorize_background, foreground_mask, replace_background, replace_background_with_mask,
    BackgroundPlan, DEFAULT_FOREGROUND_THRESHOLD, WHITE,
};
pub use idx::{decode_pair, load_mnist_dir, load_mnist_idx};
pub use synthetic::{generate_synthetic, SyntheticSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Images of shape `(N, channels, H, W)` in `[0, 1]` with labels in `[0, C)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
}

impl LabeledDataset {
    pub fn new(
        images: Tensor<f32>,
        labels: Vec<usize>,
        classes: usize,
        split: Split,
    ) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::Shape(format!(
                "dataset images must be (N, C, H, W), got {:?}",
                images.shape()
            )));
        }
        if images.batch() != labels.len() {
            return Err(Error::invalid(format!(
                "{} images but {} labels",
                images.batch(),
                labels.len()
            )));
        }
        if classes < 2 {
            return Err(Error::invalid("a dataset needs at least two classes"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(format!(
                "label {bad} >= class count {classes}"
            )));
        }
        if let Some(v) = images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            images,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(channels, H, W)`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Example indices of every class; together they partition `0..N`.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.classes];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut out = vec![0; self.classes];
        for &l in &self.labels {
            out[l] += 1;
        }
        out
    }

    /// Examples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            images: self.images.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            split: self.split,
        }
    }

    /// The first `n` examples (all of them if `n >= N`).
    pub fn take(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Drops every example of class `k`. The class count and all remaining
    /// labels are left unchanged.
    pub fn remove_class(&self, k: usize) -> Result<Self> {
        if k >= self.classes {
            return Err(Error::invalid(format!(
                "class {k} out of range for {} classes",
                self.classes
            )));
        }
        let keep: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] != k).collect();
        if keep.is_empty() {
            return Err(Error::invalid(format!(
                "removing class {k} leaves no examples"
            )));
        }
        Ok(self.subset(&keep))
    }
}
