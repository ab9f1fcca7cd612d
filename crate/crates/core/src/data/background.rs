//! Per-class background colouring and background replacement.

use serde::{Deserialize, Serialize};

use super::LabeledDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Intensity below which a grayscale pixel counts as background.
pub const DEFAULT_FOREGROUND_THRESHOLD: f32 = 0.1;

pub const WHITE: [f32; 3] = [1.0, 1.0, 1.0];

const PALETTE: [[f32; 3]; 6] = [
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 1.0, 0.0],
    [1.0, 0.0, 1.0],
    [0.0, 1.0, 1.0],
];

fn default_threshold() -> f32 {
    DEFAULT_FOREGROUND_THRESHOLD
}

/// Background colour per class id; classes sharing a colour form a group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackgroundPlan {
    pub colors: Vec<[f32; 3]>,
    #[serde(default = "default_threshold")]
    pub threshold: f32,
}

impl BackgroundPlan {
    /// Pairs `{0,1}, {2,3}, ...` share one colour each.
    pub fn paired(classes: usize) -> Self {
        Self {
            colors: (0..classes)
                .map(|c| PALETTE[(c / 2) % PALETTE.len()])
                .collect(),
            threshold: DEFAULT_FOREGROUND_THRESHOLD,
        }
    }

    /// One colour for every class.
    pub fn uniform(classes: usize, color: [f32; 3]) -> Self {
        Self {
            colors: vec![color; classes],
            threshold: DEFAULT_FOREGROUND_THRESHOLD,
        }
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::invalid(format!(
                "foreground threshold {} outside (0, 1)",
                self.threshold
            )));
        }
        if self.colors.len() < classes {
            return Err(Error::invalid(format!(
                "background plan has no colour for class {}",
                self.colors.len()
            )));
        }
        if self
            .colors
            .iter()
            .flatten()
            .any(|v| !(0.0..=1.0).contains(v))
        {
            return Err(Error::invalid("background colour outside [0, 1]"));
        }
        Ok(())
    }

    /// Group id of every class, numbered by first appearance of each colour.
    pub fn groups(&self) -> Vec<usize> {
        let mut seen: Vec<[f32; 3]> = Vec::new();
        self.colors
            .iter()
            .map(|c| match seen.iter().position(|s| s == c) {
                Some(g) => g,
                None => {
                    seen.push(*c);
                    seen.len() - 1
                }
            })
            .collect()
    }
}

/// Turns single-channel images into RGB: pixels below the threshold take the
/// class colour, the rest become gray `(v, v, v)`.
pub fn colorize_background(ds: &LabeledDataset, plan: &BackgroundPlan) -> Result<LabeledDataset> {
    let [channels, h, w] = ds.image_shape();
    if channels != 1 {
        return Err(Error::invalid(format!(
            "colorize_background needs single-channel images, got {channels}"
        )));
    }
    if !(plan.threshold > 0.0 && plan.threshold < 1.0) {
        return Err(Error::invalid("foreground threshold outside (0, 1)"));
    }
    let hw = h * w;
    let mut data = Vec::with_capacity(ds.len() * 3 * hw);
    for (i, &label) in ds.labels.iter().enumerate() {
        let color = plan.colors.get(label).ok_or_else(|| {
            Error::invalid(format!("background plan has no colour for class {label}"))
        })?;
        let src = ds.images.row(i);
        for &bg in color {
            data.extend(src.iter().map(|&v| if v < plan.threshold { bg } else { v }));
        }
    }
    let images = Tensor::new(vec![ds.len(), 3, h, w], data)?;
    LabeledDataset::new(images, ds.labels.clone(), ds.classes, ds.split)
}

/// Foreground mask of one `(C, H, W)` image: 1 where the smallest channel
/// value reaches the threshold. For colourised images this separates gray
/// foreground from any background colour that has a channel below the
/// threshold.
pub fn foreground_mask(image: &[f32], shape: [usize; 3], threshold: f32) -> Tensor<f32> {
    let [c, h, w] = shape;
    let hw = h * w;
    let mask = (0..hw)
        .map(|p| {
            let min = (0..c)
                .map(|ch| image[ch * hw + p])
                .fold(f32::INFINITY, f32::min);
            if min >= threshold {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Tensor::new(vec![h, w], mask).expect("mask shape")
}

/// Sets every pixel where `mask` is 0 to `color`; pixels where it is 1 are
/// kept. Single-channel images use the mean of `color`.
pub fn replace_background_with_mask(
    image: &Tensor<f32>,
    mask: &Tensor<f32>,
    color: [f32; 3],
) -> Result<Tensor<f32>> {
    let shape = image.shape();
    if shape.len() != 3 || (shape[0] != 1 && shape[0] != 3) {
        return Err(Error::Shape(format!(
            "expected a (1|3, H, W) image, got {shape:?}"
        )));
    }
    if mask.shape() != &shape[1..] {
        return Err(Error::Shape(format!(
            "mask shape {:?} does not match image {:?}",
            mask.shape(),
            &shape[1..]
        )));
    }
    if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
        return Err(Error::invalid("mask entries must be 0 or 1"));
    }
    let hw = shape[1] * shape[2];
    let gray = (color[0] + color[1] + color[2]) / 3.0;
    let mut out = image.clone();
    for (ch, plane) in out.data_mut().chunks_exact_mut(hw).enumerate() {
        let fill = if shape[0] == 1 { gray } else { color[ch] };
        for (v, &m) in plane.iter_mut().zip(mask.data()) {
            if m == 0.0 {
                *v = fill;
            }
        }
    }
    Ok(out)
}

/// Applies [`replace_background_with_mask`] to every image using threshold
/// masks.
pub fn replace_background(
    ds: &LabeledDataset,
    color: [f32; 3],
    threshold: f32,
) -> Result<LabeledDataset> {
    let shape = ds.image_shape();
    let mut data = Vec::with_capacity(ds.images.len());
    for i in 0..ds.len() {
        let row = ds.images.row(i);
        let mask = foreground_mask(row, shape, threshold);
        let img = Tensor::new(shape.to_vec(), row.to_vec())?;
        data.extend_from_slice(replace_background_with_mask(&img, &mask, color)?.data());
    }
    let images = Tensor::new(ds.images.shape().to_vec(), data)?;
    LabeledDataset::new(images, ds.labels.clone(), ds.classes, ds.split)
}
