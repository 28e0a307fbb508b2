//! Steering datasets: labels, preprocessing, loading, synthetic scenes and
//! cross-validation splits.

mod image;
mod log;
mod synth;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use image::{bilinear_resize, decode_image, encode_ppm, preprocess, read_image, tensor_to_image, write_ppm, PreprocessConfig, RgbImage};
pub use log::{load_steering_log, write_manifest, write_steering_log, LoadedLog};
pub use synth::{generate_synthetic, render_scene, ClassMix, SynthConfig};

/// Raw steering angles are multiplied by this factor before use.
pub const ANGLE_SCALE: f64 = 1.0 / 25.0;

/// Scaled angles strictly beyond ±this value are turns.
pub const DIRECTION_THRESHOLD: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    Left = 0,
    Straight = 1,
    Right = 2,
}

impl Direction {
    pub const ALL: [Direction; 3] = [Direction::Left, Direction::Straight, Direction::Right];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Self {
        match i {
            0 => Direction::Left,
            1 => Direction::Straight,
            _ => Direction::Right,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Direction::Left => "left",
            Direction::Straight => "straight",
            Direction::Right => "right",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|d| d.name() == s)
    }
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Direction label of a scaled angle; values exactly at ±0.15 are straight.
pub fn angle_to_label(scaled_angle: f64) -> Direction {
    if scaled_angle > DIRECTION_THRESHOLD {
        Direction::Right
    } else if scaled_angle < -DIRECTION_THRESHOLD {
        Direction::Left
    } else {
        Direction::Straight
    }
}

/// Scaled angle of a raw log angle.
pub fn scale_angle(raw: f64) -> f64 {
    raw / 25.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `H×W×3` in `[0, 1]`.
    pub image: Tensor<f32>,
    pub scaled_angle: f64,
    pub label: Direction,
    pub source_id: String,
}

impl Sample {
    pub fn new(image: Tensor<f32>, scaled_angle: f64, source_id: impl Into<String>) -> Self {
        Self {
            image,
            scaled_angle,
            label: angle_to_label(scaled_angle),
            source_id: source_id.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSummary {
    pub count: usize,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    /// Population standard deviation.
    pub std_dev: f64,
    /// Left, straight, right.
    pub proportions: [f64; 3],
}

impl DatasetSummary {
    pub fn from_angles(angles: impl IntoIterator<Item = f64>) -> Result<Self> {
        let angles: Vec<f64> = angles.into_iter().collect();
        if angles.is_empty() {
            return Err(Error::invalid("dataset summary", "empty dataset"));
        }
        let n = angles.len() as f64;
        let mean = angles.iter().sum::<f64>() / n;
        let var = angles.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
        let mut counts = [0usize; 3];
        for &a in &angles {
            counts[angle_to_label(a).index()] += 1;
        }
        Ok(Self {
            count: angles.len(),
            min: angles.iter().copied().fold(f64::INFINITY, f64::min),
            max: angles.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean,
            std_dev: var.sqrt(),
            proportions: counts.map(|c| c as f64 / n),
        })
    }

    pub fn from_samples(samples: &[Sample]) -> Result<Self> {
        Self::from_angles(samples.iter().map(|s| s.scaled_angle))
    }
}

/// One cross-validation fold as index sets into the dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

/// Shuffled k-fold partition of `0..n`; fold sizes differ by at most one.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::invalid("kfold_split", format!("k must be at least 2, got {k}")));
    }
    if k > n {
        return Err(Error::invalid(
            "kfold_split",
            format!("k = {k} exceeds dataset size {n}"),
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        let validation: Vec<usize> = order[start..start + size].to_vec();
        let train = order[..start]
            .iter()
            .chain(&order[start + size..])
            .copied()
            .collect();
        folds.push(Fold { train, validation });
        start += size;
    }
    Ok(folds)
}

/// Seeded shuffle split holding out `round(n · test_fraction)` indices
/// (at least one, leaving at least one for training).
pub fn train_test_split(n: usize, test_fraction: f64, seed: u64) -> Result<Fold> {
    if n < 2 {
        return Err(Error::invalid("train_test_split", format!("need at least 2 samples, got {n}")));
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::invalid(
            "train_test_split",
            format!("test_fraction {test_fraction} must lie in (0, 1)"),
        ));
    }
    let held = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let validation = order.split_off(n - held);
    Ok(Fold {
        train: order,
        validation,
    })
}
