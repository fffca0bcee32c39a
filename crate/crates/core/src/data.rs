//! Labelled image sets and the seeded synthetic texture generator.

use std::f32::consts::PI;

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// n x c x h x w, row-major
    pub images: Vec<f32>,
    pub labels: Vec<u16>,
}

impl Dataset {
    pub fn new(channels: usize, height: usize, width: usize, images: Vec<f32>, labels: Vec<u16>) -> Result<Self> {
        let per = channels * height * width;
        if per == 0 || images.len() != labels.len() * per {
            return Err(Error::shape(format!(
                "{} labels need {} image values of {channels}x{height}x{width}, got {}",
                labels.len(),
                labels.len() * per,
                images.len()
            )));
        }
        Ok(Self { channels, height, width, images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut images = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Dataset { images, labels, ..*self }
    }

    /// Images of `indices` stacked into an N x C x H x W tensor.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        let sub = self.subset(indices);
        Tensor::new(vec![indices.len(), self.channels, self.height, self.width], sub.images)
    }

    pub fn as_tensor(&self) -> Result<Tensor<f32>> {
        Tensor::new(vec![self.len(), self.channels, self.height, self.width], self.images.clone())
    }

    /// Shuffle with `seed` and hold out the last `fraction` as validation.
    pub fn split_validation(&self, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(fraction > 0.0 && fraction <= 0.5) {
            return Err(Error::validation(format!("validation fraction must be in (0, 0.5], got {fraction}")));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_val = ((self.len() as f64 * fraction).round() as usize).max(1);
        if n_val >= self.len() {
            return Err(Error::validation("dataset too small to hold out a validation split"));
        }
        let (train, val) = order.split_at(self.len() - n_val);
        Ok((self.subset(train), self.subset(val)))
    }

    /// `count` disjoint batches of `batch_size` images drawn without
    /// replacement, starting `offset` batches into a seeded permutation.
    pub fn sample_batches(
        &self,
        count: usize,
        batch_size: usize,
        offset: usize,
        seed: u64,
    ) -> Result<Vec<Tensor<f32>>> {
        let needed = (offset + count) * batch_size;
        if needed > self.len() || batch_size == 0 {
            return Err(Error::validation(format!(
                "need {needed} images for {count} batches of {batch_size} (offset {offset}), dataset has {}",
                self.len()
            )));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        order[offset * batch_size..needed].chunks(batch_size).map(|idx| self.batch(idx)).collect()
    }
}

/// Parameters of the synthetic texture task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_train")]
    pub train: usize,
    #[serde(default = "default_test")]
    pub test: usize,
    #[serde(default = "default_size")]
    pub size: usize,
    /// Std-dev of additive pixel noise.
    #[serde(default = "default_noise")]
    pub noise: f32,
    #[serde(default)]
    pub seed: u64,
}

fn default_classes() -> usize {
    3
}
fn default_train() -> usize {
    1200
}
fn default_test() -> usize {
    600
}
fn default_size() -> usize {
    16
}
fn default_noise() -> f32 {
    0.35
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self { classes: 3, train: 1200, test: 600, size: 16, noise: 0.35, seed: 0 }
    }
}

/// Generate `(train, test)` sets of 3 x size x size images. Classes
/// `0..k-1` are sinusoidal bar gratings at evenly spaced orientations;
/// the last class is a field of Gaussian blobs. Colour, phase, frequency
/// and blob placement are randomized per image; labels are balanced.
pub fn synthetic(config: &SyntheticConfig) -> Result<(Dataset, Dataset)> {
    if config.classes < 2 || config.classes > u16::MAX as usize {
        return Err(Error::validation(format!("synthetic task needs 2..=65535 classes, got {}", config.classes)));
    }
    if config.size < 4 || config.train == 0 || config.test == 0 {
        return Err(Error::validation("synthetic task needs size >= 4 and non-empty splits"));
    }
    if !(config.noise >= 0.0 && config.noise.is_finite()) {
        return Err(Error::validation(format!("noise must be non-negative, got {}", config.noise)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let train = generate(config, config.train, &mut rng)?;
    let test = generate(config, config.test, &mut rng)?;
    Ok((train, test))
}

fn generate(config: &SyntheticConfig, n: usize, rng: &mut ChaCha8Rng) -> Result<Dataset> {
    let s = config.size;
    let k = config.classes;
    let noise = Normal::new(0.0f32, config.noise).map_err(|e| Error::validation(e.to_string()))?;
    let mut images = Vec::with_capacity(n * 3 * s * s);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % k;
        let colour: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.3f32..1.0));
        let mut plane = vec![0.0f32; s * s];
        if class + 1 < k {
            let theta = PI * class as f32 / (k - 1) as f32 + rng.random_range(-0.2f32..0.2);
            let freq = rng.random_range(0.18f32..0.32);
            let phase = rng.random_range(0.0f32..2.0 * PI);
            let (c, sn) = (theta.cos(), theta.sin());
            for y in 0..s {
                for x in 0..s {
                    let t = x as f32 * c + y as f32 * sn;
                    plane[y * s + x] = 0.5 + 0.5 * (2.0 * PI * freq * t + phase).sin();
                }
            }
        } else {
            let blobs = rng.random_range(2..5);
            for _ in 0..blobs {
                let cx = rng.random_range(0.0..s as f32);
                let cy = rng.random_range(0.0..s as f32);
                let sigma = rng.random_range(1.2f32..2.5);
                for y in 0..s {
                    for x in 0..s {
                        let d2 = (x as f32 - cx).powi(2) + (y as f32 - cy).powi(2);
                        plane[y * s + x] += (-d2 / (2.0 * sigma * sigma)).exp();
                    }
                }
            }
            plane.iter_mut().for_each(|v| *v = v.min(1.0));
        }
        for ch in colour {
            images.extend(plane.iter().map(|&v| ch * v + noise.sample(rng)));
        }
        labels.push(class as u16);
    }
    // generated in class order; shuffle so position carries no label signal
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let ds = Dataset::new(3, s, s, images, labels)?;
    Ok(ds.subset(&order))
}
