//! Procedural stand-in dataset.
//!
//! Each class is a shape family (bars, rings, disks, crosses, ...) that is
//! symmetric under horizontal flips, so weak augmentations never change the
//! class. Examples jitter position, scale, stroke width and contrast, and are
//! overlaid with distractor strokes and pixel noise.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{default_class_names, pixel_to_unit, DataError, Dataset, ImageExample, Usage};
use crate::rng::{derive_seed, rng_from};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_per_class: usize,
    pub n_classes: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Standard deviation of additive pixel noise on the `[0, 1]` scale.
    pub noise: f64,
    /// Maximum number of distractor strokes per image.
    pub clutter: usize,
    /// Maximum centre offset as a fraction of the half-side.
    pub jitter: f64,
}

impl SyntheticConfig {
    pub fn new(n_per_class: usize, n_classes: usize, image_size: usize, seed: u64) -> Self {
        Self { n_per_class, n_classes, image_size, seed, noise: 0.4, clutter: 2, jitter: 0.3 }
    }
}

pub fn generate_synthetic(n_per_class: usize, n_classes: usize, image_size: usize, seed: u64) -> Result<Dataset, DataError> {
    generate_synthetic_with(&SyntheticConfig::new(n_per_class, n_classes, image_size, seed))
}

const FAMILIES: usize = 8;

pub fn generate_synthetic_with(cfg: &SyntheticConfig) -> Result<Dataset, DataError> {
    if cfg.n_classes < 2 {
        return Err(DataError::Invalid(format!("n_classes must be >= 2, got {}", cfg.n_classes)));
    }
    if cfg.image_size < 8 {
        return Err(DataError::Invalid(format!("image_size must be >= 8, got {}", cfg.image_size)));
    }
    if cfg.n_per_class == 0 {
        return Err(DataError::Invalid("n_per_class must be positive".into()));
    }
    if !(cfg.noise >= 0.0 && cfg.jitter >= 0.0) {
        return Err(DataError::Invalid("noise and jitter must be nonnegative".into()));
    }
    let mut examples = Vec::with_capacity(cfg.n_per_class * cfg.n_classes);
    // Interleave classes so ids do not encode labels in order.
    for j in 0..cfg.n_per_class {
        for c in 0..cfg.n_classes {
            let id = examples.len() as u64;
            let mut rng = rng_from(derive_seed(cfg.seed, c as u64, j as u64));
            let pixels = render(c, cfg, &mut rng);
            examples.push(ImageExample {
                image: Tensor::new(vec![1, cfg.image_size, cfg.image_size], pixels)?,
                label: Some(c),
                id,
                usage: Usage::Unassigned,
            });
        }
    }
    Ok(Dataset {
        name: format!("synthetic-{}c-{}px", cfg.n_classes, cfg.image_size),
        examples,
        num_classes: cfg.n_classes,
        channels: 1,
        image_size: cfg.image_size,
        class_names: default_class_names(cfg.n_classes),
    })
}

/// Soft coverage of a stroke at signed distance `d` from its border (negative inside).
fn coverage(d: f64, edge: f64) -> f64 {
    (0.5 - d / edge).clamp(0.0, 1.0)
}

struct Shape {
    cx: f64,
    cy: f64,
    scale: f64,
    half_width: f64,
}

impl Shape {
    fn hbar(&self, x: f64, y: f64, offset: f64) -> f64 {
        ((y - self.cy - offset).abs() - self.half_width).max((x - self.cx).abs() - self.scale)
    }

    fn vbar(&self, x: f64, y: f64, offset: f64) -> f64 {
        ((x - self.cx - offset).abs() - self.half_width).max((y - self.cy).abs() - self.scale)
    }

    /// Signed distance of family `family` at `(x, y)`.
    fn distance(&self, family: usize, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let r = (dx * dx + dy * dy).sqrt();
        let gap = self.scale * 0.45;
        match family {
            0 => self.hbar(x, y, 0.0),
            1 => self.vbar(x, y, 0.0),
            2 => (r - self.scale * 0.7).abs() - self.half_width * 0.8,
            3 => r - self.scale * 0.6,
            4 => self.hbar(x, y, 0.0).min(self.vbar(x, y, 0.0)),
            5 => {
                let diag = ((dy - dx).abs().min((dy + dx).abs()) / std::f64::consts::SQRT_2) - self.half_width;
                diag.max(r - self.scale)
            }
            6 => self.hbar(x, y, -gap).min(self.hbar(x, y, gap)),
            _ => self.vbar(x, y, -gap).min(self.vbar(x, y, gap)),
        }
    }
}

fn render(class: usize, cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let n = cfg.image_size;
    let family = class % FAMILIES;
    let variant = (class / FAMILIES) as f64;
    let shape = Shape {
        cx: rng.random_range(-cfg.jitter..=cfg.jitter),
        cy: rng.random_range(-cfg.jitter..=cfg.jitter),
        scale: rng.random_range(0.45..=0.75) / (1.0 + 0.5 * variant),
        half_width: rng.random_range(0.08..=0.16),
    };
    let background = rng.random_range(0.05..=0.35);
    let foreground = rng.random_range(0.55..=0.95);
    let edge = 2.0 / n as f64;

    let strokes: Vec<(f64, f64, f64, f64, f64)> = (0..rng.random_range(0..=cfg.clutter))
        .map(|_| {
            let (x0, y0) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let len = rng.random_range(0.2..0.5);
            (x0, y0, angle.cos() * len, angle.sin() * len, rng.random_range(0.3..0.8))
        })
        .collect();

    let noise = Normal::new(0.0, cfg.noise.max(1e-12)).expect("nonnegative noise");
    let mut out = Vec::with_capacity(n * n);
    for py in 0..n {
        for px in 0..n {
            let x = (px as f64 + 0.5) / n as f64 * 2.0 - 1.0;
            let y = (py as f64 + 0.5) / n as f64 * 2.0 - 1.0;
            let mut v = background + (foreground - background) * coverage(shape.distance(family, x, y), edge);
            for &(x0, y0, ux, uy, level) in &strokes {
                // Distance to the segment from (x0, y0) along (ux, uy).
                let t = (((x - x0) * ux + (y - y0) * uy) / (ux * ux + uy * uy)).clamp(0.0, 1.0);
                let d = ((x - x0 - t * ux).powi(2) + (y - y0 - t * uy).powi(2)).sqrt() - 0.05;
                v = v.max(background + (level - background) * coverage(d, edge));
            }
            if cfg.noise > 0.0 {
                v += noise.sample(rng);
            }
            // Quantize through the byte range so raw pixels are integers in [0, 255].
            out.push(pixel_to_unit((v.clamp(0.0, 1.0) * 255.0).round() as u8));
        }
    }
    out
}
