//! Gaussian blobs for fast end-to-end checks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn default_radius() -> f64 {
    0.3
}
fn default_noise() -> f64 {
    0.08
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub dimension: usize,
    pub seed: u64,
    /// Distance of each class mean from the centre point `(0.5, ..., 0.5)`.
    #[serde(default = "default_radius")]
    pub radius: f64,
    /// Per-coordinate standard deviation.
    #[serde(default = "default_noise")]
    pub noise: f64,
}

impl SyntheticSpec {
    pub fn new(classes: usize, per_class: usize, dimension: usize, seed: u64) -> Self {
        Self {
            classes,
            per_class,
            dimension,
            seed,
            radius: default_radius(),
            noise: default_noise(),
        }
    }
}

/// Class means sit on a circle of `radius` around the centre in the first two
/// coordinates; remaining coordinates have mean 0.5. Samples are clipped to
/// `[0, 1]` and stored class by class as `(N, 1, 1, d)` images.
pub fn generate_synthetic(spec: &SyntheticSpec, split: Split) -> Result<LabeledDataset> {
    if spec.classes < 2 || spec.per_class == 0 || spec.dimension < 2 {
        return Err(Error::invalid(format!(
            "synthetic data needs classes >= 2, per_class >= 1, dimension >= 2 (got {}, {}, {})",
            spec.classes, spec.per_class, spec.dimension
        )));
    }
    if !(spec.noise >= 0.0) || !(spec.radius >= 0.0) {
        return Err(Error::invalid(
            "synthetic radius and noise must be non-negative",
        ));
    }
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::invalid(e.to_string()))?;
    // Train and test draws come from disjoint streams of the same seed.
    let stream = match split {
        Split::Train => 0,
        Split::Test => 1,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let n = spec.classes * spec.per_class;
    let mut data = Vec::with_capacity(n * spec.dimension);
    let mut labels = Vec::with_capacity(n);
    for c in 0..spec.classes {
        let angle = std::f64::consts::TAU * c as f64 / spec.classes as f64;
        let mut mean = vec![0.5; spec.dimension];
        mean[0] += spec.radius * angle.cos();
        mean[1] += spec.radius * angle.sin();
        for _ in 0..spec.per_class {
            for &m in &mean {
                let v = (m + noise.sample(&mut rng)).clamp(0.0, 1.0);
                data.push(v as f32);
            }
            labels.push(c);
        }
    }
    let images = Tensor::new(vec![n, 1, 1, spec.dimension], data)?;
    LabeledDataset::new(images, labels, spec.classes, split)
}
