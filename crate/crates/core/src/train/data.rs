//! Built-in datasets: a procedural 10-class image task and separable blobs.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Result};
use crate::tensor::DenseTensor;

pub const PATTERN_CLASSES: usize = 10;
pub const PATTERN_SHAPE: [usize; 3] = [3, 16, 16];
pub const PATTERN_TRAIN: usize = 2000;
pub const PATTERN_TEST: usize = 500;
/// Standard deviation of the per-pixel Gaussian noise; grating amplitudes lie in `[0.4, 1)`.
pub const PATTERN_NOISE: f64 = 1.5;

/// Labelled samples of one input shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Vec<DenseTensor>,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(inputs: Vec<DenseTensor>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.is_empty() || inputs.len() != labels.len() {
            return invalid(format!("{} inputs with {} labels", inputs.len(), labels.len()));
        }
        if inputs.iter().any(|x| x.shape() != inputs[0].shape()) {
            return invalid("dataset inputs differ in shape");
        }
        if let Some(l) = labels.iter().find(|&&l| l >= classes) {
            return invalid(format!("label {l} out of range for {classes} classes"));
        }
        Ok(Self { inputs, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_shape(&self) -> &[usize] {
        self.inputs[0].shape()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn inputs(&self) -> &[DenseTensor] {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
}

/// Train and held-out samples of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub test: Dataset,
}

/// One oriented grating. Class `k` fixes orientation `(k mod 5)·36°` and
/// spatial frequency (low for `k < 5`, high otherwise); phase, per-channel
/// amplitude and additive noise are random.
fn pattern(class: usize, rng: &mut ChaCha8Rng) -> DenseTensor {
    let [c, w, h] = PATTERN_SHAPE;
    let theta = (class % 5) as f64 * PI / 5.0 + rng.random_range(-0.12..0.12);
    let cycles = if class < 5 { 1.5 } else { 3.0 } * rng.random_range(0.9..1.1);
    let phase = rng.random_range(0.0..2.0 * PI);
    let amp: Vec<f64> = (0..c).map(|_| rng.random_range(0.4..1.0)).collect();
    let (cos, sin) = (theta.cos(), theta.sin());
    let mut data = Vec::with_capacity(c * w * h);
    for a in &amp {
        for i in 0..w {
            for j in 0..h {
                let u = (i as f64 * cos + j as f64 * sin) / w as f64;
                let noise: f64 = rng.sample(StandardNormal);
                data.push(a * (2.0 * PI * cycles * u + phase).sin() + PATTERN_NOISE * noise);
            }
        }
    }
    DenseTensor::new(PATTERN_SHAPE.to_vec(), data).expect("pattern shape is consistent")
}

fn pattern_set(n: usize, rng: &mut ChaCha8Rng) -> Result<Dataset> {
    let labels: Vec<usize> = (0..n).map(|i| i % PATTERN_CLASSES).collect();
    let inputs = labels.iter().map(|&l| pattern(l, rng)).collect();
    Dataset::new(inputs, labels, PATTERN_CLASSES)
}

/// The built-in 10-class task: `3×16×16` gratings, balanced classes.
pub fn synthetic_patterns(train: usize, test: usize, seed: u64) -> Result<Split> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(Split {
        train: pattern_set(train, &mut rng)?,
        test: pattern_set(test, &mut rng)?,
    })
}

/// Two Gaussian clusters in `dim` dimensions, centred at `±2·e₁`, with every
/// sample at least 1 away from the separating hyperplane `x₁ = 0`.
pub fn separable_blobs(n: usize, dim: usize, seed: u64) -> Result<Dataset> {
    if dim == 0 {
        return invalid("blob dimension must be positive");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let sign = if label == 0 { -1.0 } else { 1.0 };
        let mut v: Vec<f64> = (0..dim).map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal)).collect();
        v[0] = sign * (2.0 + 0.5 * rng.sample::<f64, _>(StandardNormal)).max(1.0);
        inputs.push(DenseTensor::vector(v));
        labels.push(label);
    }
    Dataset::new(inputs, labels, 2)
}
