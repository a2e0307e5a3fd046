//! Stochastic image augmentations and mixup.
//!
//! Images are `[C, H, W]` tensors with pixels in `[0, 1]`. Every function takes
//! an explicit seed; the same `(image, seed)` always yields the same output.
//! Geometric ops resample with nearest neighbour and replicate edges.

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{derive_seed, rng_from, stream};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("{kind:?} magnitude {magnitude} outside [{lo}, {hi}]")]
    Magnitude { kind: AugmentKind, magnitude: f64, lo: f64, hi: f64 },
    #[error("augmentation shape error: {0}")]
    Shape(String),
    #[error("invalid augmentation parameter: {0}")]
    Parameter(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AugmentKind {
    HorizontalFlip,
    TranslateX,
    TranslateY,
    Rotate,
    Brightness,
    Contrast,
    Solarize,
    Posterize,
    SharpenBlur,
    Cutout,
}

impl AugmentKind {
    /// The fixed pool the strong tier samples from (cutout is applied separately).
    pub const STRONG_POOL: [AugmentKind; 9] = [
        AugmentKind::HorizontalFlip,
        AugmentKind::TranslateX,
        AugmentKind::TranslateY,
        AugmentKind::Rotate,
        AugmentKind::Brightness,
        AugmentKind::Contrast,
        AugmentKind::Solarize,
        AugmentKind::Posterize,
        AugmentKind::SharpenBlur,
    ];

    /// Documented magnitude range.
    ///
    /// Translations are fractions of the image side, rotation is in degrees,
    /// brightness/contrast are multiplicative factors, solarize is the inversion
    /// threshold, posterize is the number of kept bits, sharpen-blur is the
    /// blend weight against a 3×3 box blur (negative blurs), cutout is the side
    /// as a fraction of the image. Flip ignores its magnitude.
    pub fn range(self) -> (f64, f64) {
        match self {
            AugmentKind::HorizontalFlip => (0.0, 1.0),
            AugmentKind::TranslateX | AugmentKind::TranslateY => (-0.3, 0.3),
            AugmentKind::Rotate => (-30.0, 30.0),
            AugmentKind::Brightness | AugmentKind::Contrast => (0.5, 1.5),
            AugmentKind::Solarize => (0.0, 1.0),
            AugmentKind::Posterize => (4.0, 8.0),
            AugmentKind::SharpenBlur => (-1.0, 1.0),
            AugmentKind::Cutout => (0.0, 0.5),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentOp {
    kind: AugmentKind,
    magnitude: f64,
}

impl AugmentOp {
    pub fn new(kind: AugmentKind, magnitude: f64) -> Result<Self, AugmentError> {
        let (lo, hi) = kind.range();
        if !(lo..=hi).contains(&magnitude) {
            return Err(AugmentError::Magnitude { kind, magnitude, lo, hi });
        }
        Ok(Self { kind, magnitude })
    }

    pub fn kind(&self) -> AugmentKind {
        self.kind
    }

    pub fn magnitude(&self) -> f64 {
        self.magnitude
    }

    pub fn apply(&self, img: &Tensor<f32>) -> Tensor<f32> {
        let (_, h, w) = dims(img);
        let m = self.magnitude;
        match self.kind {
            AugmentKind::HorizontalFlip => hflip(img),
            AugmentKind::TranslateX => translate(img, (m * w as f64).round() as i64, 0),
            AugmentKind::TranslateY => translate(img, 0, (m * h as f64).round() as i64),
            AugmentKind::Rotate => rotate(img, m),
            AugmentKind::Brightness => map_pixels(img, |v| v * m as f32),
            AugmentKind::Contrast => contrast(img, m as f32),
            AugmentKind::Solarize => map_pixels(img, |v| if v >= m as f32 { 1.0 - v } else { v }),
            AugmentKind::Posterize => posterize(img, m.round() as u32),
            AugmentKind::SharpenBlur => sharpen_blur(img, m as f32),
            AugmentKind::Cutout => {
                let side = (m * h.min(w) as f64).round() as usize;
                cutout(img, h / 2, w / 2, side)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AugmentTier {
    Identity,
    Weak,
    Strong,
}

/// Configuration of one augmentation tier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentPolicy {
    pub tier: AugmentTier,
    /// Ops sampled per image by the strong tier.
    pub n_ops: usize,
    /// Side of the cutout square in pixels; 0 disables cutout.
    pub cutout_size: usize,
    /// Strong-tier pool; defaults to [`AugmentKind::STRONG_POOL`].
    pub pool: Vec<AugmentKind>,
}

impl AugmentPolicy {
    pub fn identity() -> Self {
        Self { tier: AugmentTier::Identity, n_ops: 0, cutout_size: 0, pool: Vec::new() }
    }

    pub fn weak() -> Self {
        Self { tier: AugmentTier::Weak, n_ops: 0, cutout_size: 0, pool: Vec::new() }
    }

    /// Two ops from the fixed pool, then cutout of a quarter of the side, at least 1 pixel.
    pub fn strong(image_size: usize) -> Self {
        Self {
            tier: AugmentTier::Strong,
            n_ops: 2,
            cutout_size: (image_size / 4).max(1),
            pool: AugmentKind::STRONG_POOL.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        if self.tier == AugmentTier::Strong && self.n_ops > 0 && self.pool.is_empty() {
            return Err(AugmentError::Parameter("strong policy with n_ops > 0 needs a nonempty pool".into()));
        }
        if self.pool.contains(&AugmentKind::Cutout) {
            return Err(AugmentError::Parameter("cutout is configured through cutout_size, not the pool".into()));
        }
        Ok(())
    }

    pub fn apply(&self, img: &Tensor<f32>, seed: u64) -> Tensor<f32> {
        match self.tier {
            AugmentTier::Identity => img.clone(),
            AugmentTier::Weak => weak_augment(img, seed),
            AugmentTier::Strong => StrongPlan::sample(self, seed, img.shape()[1], img.shape()[2]).apply(img),
        }
    }
}

/// The random decisions of one weak augmentation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WeakDecision {
    pub flip: bool,
    pub dx: i64,
    pub dy: i64,
}

impl WeakDecision {
    pub const IDENTITY: WeakDecision = WeakDecision { flip: false, dx: 0, dy: 0 };

    /// Flip with probability 0.5, then shifts uniform in `[−side/8, side/8]`.
    pub fn sample(seed: u64, height: usize, width: usize) -> Self {
        let mut rng = rng_from(seed);
        let flip = rng.random_bool(0.5);
        let (mx, my) = ((width / 8) as i64, (height / 8) as i64);
        let dx = rng.random_range(-mx..=mx);
        let dy = rng.random_range(-my..=my);
        Self { flip, dx, dy }
    }

    pub fn apply(&self, img: &Tensor<f32>) -> Tensor<f32> {
        let flipped = if self.flip { hflip(img) } else { img.clone() };
        if self.dx == 0 && self.dy == 0 {
            flipped
        } else {
            translate(&flipped, self.dx, self.dy)
        }
    }
}

/// Horizontal flip plus small translation with edge replication.
pub fn weak_augment(img: &Tensor<f32>, seed: u64) -> Tensor<f32> {
    let (_, h, w) = dims(img);
    WeakDecision::sample(seed, h, w).apply(img)
}

/// The random decisions of one strong augmentation.
#[derive(Clone, Debug, PartialEq)]
pub struct StrongPlan {
    pub ops: Vec<AugmentOp>,
    /// Top-left corner and side of the cutout square (may extend past the border).
    pub cutout: Option<(i64, i64, usize)>,
}

impl StrongPlan {
    pub fn sample(policy: &AugmentPolicy, seed: u64, height: usize, width: usize) -> Self {
        let mut rng = rng_from(seed);
        let mut ops = Vec::with_capacity(policy.n_ops);
        for _ in 0..policy.n_ops {
            let Some(&kind) = policy.pool.choose(&mut rng) else { break };
            let (lo, hi) = kind.range();
            ops.push(AugmentOp { kind, magnitude: rng.random_range(lo..=hi) });
        }
        let cutout = (policy.cutout_size > 0).then(|| {
            let cy = rng.random_range(0..height) as i64;
            let cx = rng.random_range(0..width) as i64;
            let half = (policy.cutout_size / 2) as i64;
            (cy - half, cx - half, policy.cutout_size)
        });
        Self { ops, cutout }
    }

    pub fn apply(&self, img: &Tensor<f32>) -> Tensor<f32> {
        let mut out = img.clone();
        for op in &self.ops {
            out = op.apply(&out);
        }
        if let Some((top, left, side)) = self.cutout {
            out = cutout_at(&out, top, left, side);
        }
        out
    }
}

/// Strong augmentation with the default policy for the image's size.
pub fn strong_augment(img: &Tensor<f32>, seed: u64) -> Tensor<f32> {
    let (_, h, w) = dims(img);
    StrongPlan::sample(&AugmentPolicy::strong(h.min(w)), seed, h, w).apply(img)
}

/// `k` independent weak augmentations with per-instance derived seeds.
pub fn k_augment(img: &Tensor<f32>, k: usize, seed: u64) -> Result<Vec<Tensor<f32>>, AugmentError> {
    if k < 1 {
        return Err(AugmentError::Parameter("k must be at least 1".into()));
    }
    Ok((0..k).map(|i| weak_augment(img, derive_seed(seed, stream::AUGMENT_INSTANCE, i as u64))).collect())
}

/// Draws `α ~ Beta(c, c)` and returns `max(α, 1 − α)`.
pub fn sample_mix_coefficient(concentration: f64, seed: u64) -> Result<f64, AugmentError> {
    if !(concentration > 0.0) {
        return Err(AugmentError::Parameter(format!("Beta concentration must be > 0, got {concentration}")));
    }
    let beta = Beta::new(concentration, concentration).map_err(|e| AugmentError::Parameter(e.to_string()))?;
    let alpha: f64 = beta.sample(&mut rng_from(seed));
    Ok(alpha.max(1.0 - alpha))
}

/// Convex combination `α·a + (1 − α)·b` after the `α ← max(α, 1 − α)` rule.
pub fn mixup_with_coefficient<S: Scalar>(
    x_l: &Tensor<S>,
    y_l: &[S],
    x_u: &Tensor<S>,
    y_u: &[S],
    alpha: f64,
) -> Result<(Tensor<S>, Vec<S>), AugmentError> {
    if x_l.shape() != x_u.shape() || y_l.len() != y_u.len() {
        return Err(AugmentError::Shape(format!(
            "mixup inputs {:?}/{} vs {:?}/{}",
            x_l.shape(),
            y_l.len(),
            x_u.shape(),
            y_u.len()
        )));
    }
    let alpha = alpha.max(1.0 - alpha);
    let a = S::from_f64_lossy(alpha);
    let b = S::from_f64_lossy(1.0 - alpha);
    let blend = |p: &[S], q: &[S]| p.iter().zip(q).map(|(&u, &v)| a * u + b * v).collect::<Vec<S>>();
    let x = Tensor::new(x_l.shape().to_vec(), blend(x_l.data(), x_u.data()))
        .map_err(|e| AugmentError::Shape(e.to_string()))?;
    Ok((x, blend(y_l, y_u)))
}

/// Mixup with `α` drawn from `Beta(alpha_param, alpha_param)`.
pub fn mixup<S: Scalar>(
    x_l: &Tensor<S>,
    y_l: &[S],
    x_u: &Tensor<S>,
    y_u: &[S],
    alpha_param: f64,
    seed: u64,
) -> Result<(Tensor<S>, Vec<S>), AugmentError> {
    let alpha = sample_mix_coefficient(alpha_param, seed)?;
    mixup_with_coefficient(x_l, y_l, x_u, y_u, alpha)
}

fn dims(img: &Tensor<f32>) -> (usize, usize, usize) {
    let s = img.shape();
    assert_eq!(s.len(), 3, "images are [C, H, W], got {s:?}");
    (s[0], s[1], s[2])
}

fn rebuild(img: &Tensor<f32>, data: Vec<f32>) -> Tensor<f32> {
    Tensor::new(img.shape().to_vec(), data).expect("augmentation keeps shape and finiteness")
}

fn map_pixels(img: &Tensor<f32>, f: impl Fn(f32) -> f32) -> Tensor<f32> {
    rebuild(img, img.data().iter().map(|&v| f(v).clamp(0.0, 1.0)).collect())
}

/// Resamples each output pixel from `src(y, x)`, clamping source coordinates.
fn resample(img: &Tensor<f32>, src: impl Fn(usize, usize) -> (i64, i64)) -> Tensor<f32> {
    let (c, h, w) = dims(img);
    let d = img.data();
    let mut out = Vec::with_capacity(d.len());
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = src(y, x);
                let sy = sy.clamp(0, h as i64 - 1) as usize;
                let sx = sx.clamp(0, w as i64 - 1) as usize;
                out.push(d[(ch * h + sy) * w + sx]);
            }
        }
    }
    rebuild(img, out)
}

pub fn hflip(img: &Tensor<f32>) -> Tensor<f32> {
    let (_, _, w) = dims(img);
    resample(img, |y, x| (y as i64, (w - 1 - x) as i64))
}

/// Shifts content by `(dx, dy)` pixels, replicating edges into the vacated area.
pub fn translate(img: &Tensor<f32>, dx: i64, dy: i64) -> Tensor<f32> {
    resample(img, |y, x| (y as i64 - dy, x as i64 - dx))
}

fn rotate(img: &Tensor<f32>, degrees: f64) -> Tensor<f32> {
    let (_, h, w) = dims(img);
    let (s, c) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    resample(img, |y, x| {
        let (yy, xx) = (y as f64 - cy, x as f64 - cx);
        let sy = c * yy - s * xx + cy;
        let sx = s * yy + c * xx + cx;
        (sy.round() as i64, sx.round() as i64)
    })
}

fn channel_means(img: &Tensor<f32>) -> Vec<f32> {
    let (_, h, w) = dims(img);
    img.data().chunks(h * w).map(|p| (p.iter().map(|&v| v as f64).sum::<f64>() / (h * w) as f64) as f32).collect()
}

fn contrast(img: &Tensor<f32>, factor: f32) -> Tensor<f32> {
    let (_, h, w) = dims(img);
    let means = channel_means(img);
    let data = img
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let m = means[i / (h * w)];
            (m + factor * (v - m)).clamp(0.0, 1.0)
        })
        .collect();
    rebuild(img, data)
}

fn posterize(img: &Tensor<f32>, bits: u32) -> Tensor<f32> {
    let shift = 8 - bits.clamp(1, 8);
    map_pixels(img, |v| {
        let q = ((v * 255.0).round() as u32) >> shift << shift;
        q as f32 / 255.0
    })
}

fn sharpen_blur(img: &Tensor<f32>, weight: f32) -> Tensor<f32> {
    let (c, h, w) = dims(img);
    let d = img.data();
    let mut out = Vec::with_capacity(d.len());
    for ch in 0..c {
        let plane = &d[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let sy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                        let sx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                        acc += plane[sy * w + sx];
                    }
                }
                let v = plane[y * w + x];
                out.push((v + weight * (v - acc / 9.0)).clamp(0.0, 1.0));
            }
        }
    }
    rebuild(img, out)
}

/// Fills a `side × side` square centred at `(cy, cx)` with the per-channel image mean.
pub fn cutout(img: &Tensor<f32>, cy: usize, cx: usize, side: usize) -> Tensor<f32> {
    let half = (side / 2) as i64;
    cutout_at(img, cy as i64 - half, cx as i64 - half, side)
}

fn cutout_at(img: &Tensor<f32>, top: i64, left: i64, side: usize) -> Tensor<f32> {
    let (_, h, w) = dims(img);
    let means = channel_means(img);
    let mut data = img.data().to_vec();
    let ys = top.max(0)..(top + side as i64).min(h as i64);
    let xs = left.max(0)..(left + side as i64).min(w as i64);
    for (ch, m) in means.iter().enumerate() {
        for y in ys.clone() {
            for x in xs.clone() {
                data[(ch * h + y as usize) * w + x as usize] = *m;
            }
        }
    }
    rebuild(img, data)
}
