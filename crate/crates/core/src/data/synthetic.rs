//! Desk-scale image data: each class owns a pattern of Gaussian blobs rendered
//! into its channel planes, and samples add isotropic pixel noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::seed::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub channels: usize,
    #[serde(default = "default_side")]
    pub side: usize,
    /// Pixel noise standard deviation.
    pub noise: f64,
    /// Blobs drawn per channel plane of each class pattern.
    #[serde(default = "default_blobs")]
    pub blobs: usize,
    pub seed: u64,
}

fn default_side() -> usize {
    32
}

fn default_blobs() -> usize {
    3
}

impl SyntheticSpec {
    pub fn new(classes: usize, per_class: usize, channels: usize, noise: f64, seed: u64) -> Self {
        Self {
            classes,
            per_class,
            channels,
            side: default_side(),
            noise,
            blobs: default_blobs(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.per_class == 0 || self.channels == 0 || self.side == 0 {
            return Err(Error::config(format!("degenerate synthetic dataset {self:?}")));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config("synthetic noise must be >= 0"));
        }
        Ok(())
    }
}

/// Mean image of every class, `[K][C·side·side]` in `[0, 1]`.
fn class_patterns(spec: &SyntheticSpec) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[0x7061_7474]));
    let s = spec.side;
    (0..spec.classes)
        .map(|_| {
            let mut img = vec![0.0; spec.channels * s * s];
            for plane in img.chunks_exact_mut(s * s) {
                for _ in 0..spec.blobs {
                    let cy = rng.random_range(0.15..0.85) * s as f64;
                    let cx = rng.random_range(0.15..0.85) * s as f64;
                    let sigma = rng.random_range(0.06..0.16) * s as f64;
                    for i in 0..s {
                        for j in 0..s {
                            let d2 = (i as f64 - cy).powi(2) + (j as f64 - cx).powi(2);
                            plane[i * s + j] += (-d2 / (2.0 * sigma * sigma)).exp();
                        }
                    }
                }
                for v in plane.iter_mut() {
                    *v = v.min(1.0);
                }
            }
            img
        })
        .collect()
}

fn sample(spec: &SyntheticSpec, patterns: &[Vec<f64>], per_class: usize, stream: u64) -> Result<LabeledDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[stream]));
    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("finite std");
    let n = per_class * spec.classes;
    let width = spec.channels * spec.side * spec.side;
    let mut data = Vec::with_capacity(n * width);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % spec.classes;
        for &m in &patterns[label] {
            let v = if spec.noise > 0.0 { m + noise.sample(&mut rng) } else { m };
            data.push(v.clamp(0.0, 1.0));
        }
        labels.push(label);
    }
    let features = Tensor::new(vec![n, spec.channels, spec.side, spec.side], data)?;
    LabeledDataset::new(features, labels, spec.classes)
}

/// `classes · per_class` examples, labels cycling `0, 1, …, K−1`.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<LabeledDataset> {
    spec.validate()?;
    sample(spec, &class_patterns(spec), spec.per_class, 1)
}

/// Training set from [`make_synthetic`] plus a held-out set drawn from the same
/// class patterns with an independent noise stream.
pub fn make_synthetic_split(spec: &SyntheticSpec, test_per_class: usize) -> Result<(LabeledDataset, LabeledDataset)> {
    spec.validate()?;
    let patterns = class_patterns(spec);
    let train = sample(spec, &patterns, spec.per_class, 1)?;
    let test = sample(spec, &patterns, test_per_class.max(1), 2)?;
    Ok((train, test))
}
