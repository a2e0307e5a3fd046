//! Datasets and the labeled / unlabeled / validation split discipline.
//!
//! Images are stored as `[C, H, W]` tensors with pixels in `[0, 1]` (raw byte
//! divided by 255). Standardization with training-partition statistics happens
//! when a batch is assembled, see [`Standardizer`].

mod fer;
mod image_dir;
mod synthetic;

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{derive_seed, rng_from};
use crate::tensor::{Scalar, Tensor, TensorError};

pub use fer::{load_fer_csv, parse_fer_csv, FerLoad, RowError, UsageMapping, FER_CLASSES, FER_PIXELS, FER_SIZE};
pub use image_dir::load_image_dir;
pub use synthetic::{generate_synthetic, generate_synthetic_with, SyntheticConfig};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("I/O error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("row {row}: {message}")]
    Row { row: usize, message: String },
    #[error("class {class} has {available} training examples, {needed} requested")]
    InsufficientClass { class: usize, available: usize, needed: usize },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("image decode error on {path}: {message}")]
    Image { path: String, message: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("manifest error: {0}")]
    Manifest(String),
}

pub(crate) fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io { path: path.display().to_string(), source }
}

/// Partition tag carried by datasets that ship with an official split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Usage {
    Train,
    Validation,
    /// No official split; validation is held out by fraction.
    Unassigned,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageExample {
    pub image: Tensor<f32>,
    pub label: Option<usize>,
    pub id: u64,
    pub usage: Usage,
}

pub fn pixel_to_unit(p: u8) -> f32 {
    p as f32 / 255.0
}

pub fn unit_to_pixel(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub examples: Vec<ImageExample>,
    pub num_classes: usize,
    pub channels: usize,
    pub image_size: usize,
    pub class_names: Vec<String>,
}

/// Confusion-matrix class names: the basic expressions for 7 classes, else `class-i`.
pub fn default_class_names(num_classes: usize) -> Vec<String> {
    if num_classes == FER_CLASSES.len() {
        FER_CLASSES.iter().map(|s| s.to_string()).collect()
    } else {
        (0..num_classes).map(|i| format!("class-{i}")).collect()
    }
}

impl Dataset {
    pub fn validate(&self) -> Result<(), DataError> {
        let mut ids = HashSet::new();
        for e in &self.examples {
            if !ids.insert(e.id) {
                return Err(DataError::Invalid(format!("duplicate id {}", e.id)));
            }
            if e.label.is_some_and(|l| l >= self.num_classes) {
                return Err(DataError::Invalid(format!("example {} label out of range", e.id)));
            }
            if e.image.shape() != [self.channels, self.image_size, self.image_size] {
                return Err(DataError::Invalid(format!("example {} has shape {:?}", e.id, e.image.shape())));
            }
        }
        if self.class_names.len() != self.num_classes {
            return Err(DataError::Invalid("class_names length differs from num_classes".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        histogram(&self.examples, self.num_classes)
    }
}

fn histogram(examples: &[ImageExample], num_classes: usize) -> Vec<usize> {
    let mut h = vec![0; num_classes];
    for l in examples.iter().filter_map(|e| e.label) {
        h[l] += 1;
    }
    h
}

/// Per-dataset scalar standardization `(x − mean) / std`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: f32,
    pub std: f32,
}

impl Standardizer {
    pub const IDENTITY: Standardizer = Standardizer { mean: 0.0, std: 1.0 };

    pub fn fit(examples: &[ImageExample]) -> Self {
        let (mut sum, mut sq, mut n) = (0.0f64, 0.0f64, 0usize);
        for e in examples {
            for &v in e.image.data() {
                sum += v as f64;
                sq += (v as f64) * (v as f64);
            }
            n += e.image.numel();
        }
        if n == 0 {
            return Self::IDENTITY;
        }
        let mean = sum / n as f64;
        let var = (sq / n as f64 - mean * mean).max(0.0);
        let std = if var.sqrt() < 1e-6 { 1.0 } else { var.sqrt() };
        Self { mean: mean as f32, std: std as f32 }
    }

    /// Stacks images into a standardized `[B, C, H, W]` batch.
    pub fn batch<S: Scalar>(&self, images: &[&Tensor<f32>]) -> Result<Tensor<S>, TensorError> {
        let first = images
            .first()
            .ok_or_else(|| TensorError::Validation { op: "batch", detail: "empty batch".into() })?;
        let mut shape = vec![images.len()];
        shape.extend_from_slice(first.shape());
        let (mean, inv) = (self.mean as f64, 1.0 / self.std as f64);
        let mut data = Vec::with_capacity(first.numel() * images.len());
        for img in images {
            if img.shape() != first.shape() {
                return Err(TensorError::Dimension { op: "batch", detail: "mixed image shapes".into() });
            }
            data.extend(img.data().iter().map(|&v| S::from_f64_lossy((v as f64 - mean) * inv)));
        }
        Tensor::new(shape, data)
    }
}

/// Disjoint `D_l`, `D_u` (labels stripped) and `D_v`.
#[derive(Clone, Debug)]
pub struct DatasetSplits {
    pub labeled: Vec<ImageExample>,
    pub unlabeled: Vec<ImageExample>,
    pub validation: Vec<ImageExample>,
    pub standardizer: Standardizer,
    pub num_classes: usize,
    pub channels: usize,
    pub image_size: usize,
    pub class_names: Vec<String>,
}

/// Id lists of a split, saved for reproducibility.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub format: String,
    pub labeled: Vec<u64>,
    pub unlabeled: Vec<u64>,
    pub validation: Vec<u64>,
}

impl SplitManifest {
    pub const FORMAT: &'static str = "sslab-split/v1";

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| DataError::Manifest(e.to_string()))?;
        fs::write(path, text).map_err(|e| io_err(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| DataError::Manifest(e.to_string()))?;
        if m.format != Self::FORMAT {
            return Err(DataError::Manifest(format!("unknown format tag {}", m.format)));
        }
        Ok(m)
    }
}

impl DatasetSplits {
    pub fn manifest(&self) -> SplitManifest {
        let ids = |v: &[ImageExample]| v.iter().map(|e| e.id).collect();
        SplitManifest {
            format: SplitManifest::FORMAT.into(),
            labeled: ids(&self.labeled),
            unlabeled: ids(&self.unlabeled),
            validation: ids(&self.validation),
        }
    }

    /// Checks pairwise disjointness of the three id sets.
    pub fn check_disjoint(&self) -> Result<(), DataError> {
        let mut seen = HashSet::new();
        for e in self.labeled.iter().chain(&self.unlabeled).chain(&self.validation) {
            if !seen.insert(e.id) {
                return Err(DataError::Invalid(format!("id {} appears in more than one split", e.id)));
            }
        }
        Ok(())
    }

    pub fn labeled_histogram(&self) -> Vec<usize> {
        histogram(&self.labeled, self.num_classes)
    }
}

/// Separates training examples from validation: the official partition when the
/// dataset has one, otherwise a per-class holdout of `validation_fraction`.
fn hold_out(
    dataset: &Dataset,
    validation_fraction: f64,
    seed: u64,
) -> Result<(BTreeMap<usize, Vec<usize>>, Vec<usize>), DataError> {
    if !(0.0..1.0).contains(&validation_fraction) {
        return Err(DataError::Invalid(format!("validation_fraction {validation_fraction} not in [0, 1)")));
    }
    let mut train: BTreeMap<usize, Vec<usize>> = (0..dataset.num_classes).map(|c| (c, Vec::new())).collect();
    let mut validation = Vec::new();
    let official = dataset.examples.iter().any(|e| e.usage == Usage::Validation);
    for (i, e) in dataset.examples.iter().enumerate() {
        let label = e.label.ok_or_else(|| DataError::Invalid(format!("example {} has no label", e.id)))?;
        match (official, e.usage) {
            (true, Usage::Validation) => validation.push(i),
            _ => train.get_mut(&label).expect("validated label").push(i),
        }
    }
    if !official {
        for (&class, idx) in train.iter_mut() {
            idx.shuffle(&mut rng_from(derive_seed(seed, 0x7A11, class as u64)));
            let n_val = (idx.len() as f64 * validation_fraction).round() as usize;
            validation.extend(idx.drain(..n_val));
        }
    }
    validation.sort_unstable();
    Ok((train, validation))
}

fn assemble(
    dataset: &Dataset,
    labeled: Vec<usize>,
    unlabeled: Vec<usize>,
    validation: Vec<usize>,
) -> DatasetSplits {
    let take = |idx: &[usize]| idx.iter().map(|&i| dataset.examples[i].clone()).collect::<Vec<_>>();
    let labeled = take(&labeled);
    let mut unlabeled = take(&unlabeled);
    for e in &mut unlabeled {
        e.label = None;
    }
    let train: Vec<ImageExample> = labeled.iter().chain(&unlabeled).cloned().collect();
    DatasetSplits {
        standardizer: Standardizer::fit(&train),
        labeled,
        unlabeled,
        validation: take(&validation),
        num_classes: dataset.num_classes,
        channels: dataset.channels,
        image_size: dataset.image_size,
        class_names: dataset.class_names.clone(),
    }
}

/// Holds out validation, samples exactly `n_labels_per_class` per class into
/// `D_l` and strips the labels of every remaining training example into `D_u`.
///
/// The validation set depends only on `(dataset, validation_fraction, seed)`,
/// so different label budgets under one seed share it.
pub fn make_splits(
    dataset: &Dataset,
    n_labels_per_class: usize,
    validation_fraction: f64,
    seed: u64,
) -> Result<DatasetSplits, DataError> {
    dataset.validate()?;
    let (train, validation) = hold_out(dataset, validation_fraction, seed)?;
    let (mut labeled, mut unlabeled) = (Vec::new(), Vec::new());
    for (&class, idx) in &train {
        if idx.len() < n_labels_per_class {
            return Err(DataError::InsufficientClass { class, available: idx.len(), needed: n_labels_per_class });
        }
        let mut idx = idx.clone();
        idx.shuffle(&mut rng_from(derive_seed(seed, 0x1AB3, class as u64)));
        labeled.extend_from_slice(&idx[..n_labels_per_class]);
        unlabeled.extend_from_slice(&idx[n_labels_per_class..]);
    }
    unlabeled.sort_unstable();
    let splits = assemble(dataset, labeled, unlabeled, validation);
    splits.check_disjoint()?;
    Ok(splits)
}

/// Every training example labeled; `D_u` is empty. Uses the same validation
/// holdout as [`make_splits`] for the same seed.
pub fn make_full_splits(dataset: &Dataset, validation_fraction: f64, seed: u64) -> Result<DatasetSplits, DataError> {
    dataset.validate()?;
    let (train, validation) = hold_out(dataset, validation_fraction, seed)?;
    let labeled = train.into_values().flatten().collect();
    let splits = assemble(dataset, labeled, Vec::new(), validation);
    splits.check_disjoint()?;
    Ok(splits)
}
