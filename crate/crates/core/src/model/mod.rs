//! Mini convolutional encoder `f(θ, ·)` and its exponential-moving-average teacher.
//!
//! The encoder stacks blocks of `conv3×3 → relu [→ conv3×3 + identity → relu] → avgpool2×2`,
//! then a global average pool and one dense classification layer.

pub mod checkpoint;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{derive_seed, rng_from, stream};
use crate::tensor::{Scalar, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("parameter layout mismatch: {0}")]
    Layout(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_channels: usize,
    pub input_size: usize,
    pub channel_widths: Vec<usize>,
    pub use_residual: bool,
    pub num_classes: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { input_channels: 1, input_size: 48, channel_widths: vec![16, 32, 64], use_residual: false, num_classes: 7 }
    }
}

impl EncoderConfig {
    /// Grayscale 48×48 input with the 7 basic expression classes.
    pub fn fer13() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.num_classes < 2 {
            return Err(ModelError::Config(format!("num_classes must be >= 2, got {}", self.num_classes)));
        }
        if self.input_size < 8 {
            return Err(ModelError::Config(format!("input_size must be >= 8, got {}", self.input_size)));
        }
        if self.channel_widths.is_empty() || self.channel_widths.contains(&0) {
            return Err(ModelError::Config("channel_widths must be nonempty and positive".into()));
        }
        if self.input_channels == 0 {
            return Err(ModelError::Config("input_channels must be positive".into()));
        }
        Ok(())
    }

    /// `(name, shape, fan_in)` for every parameter, in canonical order.
    fn layout(&self) -> Vec<(String, Vec<usize>, usize)> {
        let mut out = Vec::new();
        let mut prev = self.input_channels;
        for (i, &w) in self.channel_widths.iter().enumerate() {
            out.push((format!("block{i}.conv.weight"), vec![w, prev, 3, 3], prev * 9));
            out.push((format!("block{i}.conv.bias"), vec![w], 0));
            if self.use_residual {
                out.push((format!("block{i}.res.weight"), vec![w, w, 3, 3], w * 9));
                out.push((format!("block{i}.res.bias"), vec![w], 0));
            }
            prev = w;
        }
        out.push(("head.weight".into(), vec![prev, self.num_classes], prev));
        out.push(("head.bias".into(), vec![self.num_classes], 0));
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor<S = f32> {
    pub name: String,
    pub tensor: Tensor<S>,
}

/// Student parameters θ, in the canonical order of [`EncoderConfig`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<S = f32> {
    config: EncoderConfig,
    tensors: Vec<NamedTensor<S>>,
}

/// He-normal weights and zero biases, deterministic in `seed`.
pub fn build_encoder<S: Scalar>(config: &EncoderConfig, seed: u64) -> Result<ModelParams<S>, ModelError> {
    config.validate()?;
    let mut tensors = Vec::new();
    for (idx, (name, shape, fan_in)) in config.layout().into_iter().enumerate() {
        let n: usize = shape.iter().product();
        let data = if fan_in == 0 {
            vec![S::zero(); n]
        } else {
            let std = (2.0 / fan_in as f64).sqrt();
            let dist = Normal::new(0.0, std).expect("positive std");
            let mut rng = rng_from(derive_seed(seed, stream::INIT, idx as u64));
            (0..n).map(|_| S::from_f64_lossy(dist.sample(&mut rng))).collect()
        };
        tensors.push(NamedTensor { name, tensor: Tensor::new(shape, data)? });
    }
    Ok(ModelParams { config: config.clone(), tensors })
}

impl<S: Scalar> ModelParams<S> {
    /// Reassembles parameters, checking names and shapes against `config`.
    pub fn from_tensors(config: EncoderConfig, tensors: Vec<NamedTensor<S>>) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = config.layout();
        if layout.len() != tensors.len() {
            return Err(ModelError::Layout(format!("expected {} tensors, got {}", layout.len(), tensors.len())));
        }
        for ((name, shape, _), t) in layout.iter().zip(&tensors) {
            if *name != t.name || shape.as_slice() != t.tensor.shape() {
                return Err(ModelError::Layout(format!(
                    "expected {name} {shape:?}, got {} {:?}",
                    t.name,
                    t.tensor.shape()
                )));
            }
        }
        Ok(Self { config, tensors })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[NamedTensor<S>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<S>> {
        self.tensors.iter_mut().map(|t| &mut t.tensor)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.tensors.iter().find(|t| t.name == name).map(|t| &t.tensor)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.tensor.numel()).sum()
    }

    pub fn cast<T: Scalar>(&self) -> ModelParams<T> {
        ModelParams {
            config: self.config.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| NamedTensor { name: t.name.clone(), tensor: t.tensor.cast() })
                .collect(),
        }
    }

    pub fn check_same_layout<T>(&self, other: &ModelParams<T>) -> Result<(), ModelError>
    where
        T: Scalar,
    {
        if self.tensors.len() != other.tensors.len() {
            return Err(ModelError::Layout(format!("{} vs {} tensors", self.tensors.len(), other.tensors.len())));
        }
        for (a, b) in self.tensors.iter().zip(&other.tensors) {
            if a.name != b.name || a.tensor.shape() != b.tensor.shape() {
                return Err(ModelError::Layout(format!("{} {:?} vs {} {:?}", a.name, a.tensor.shape(), b.name, b.tensor.shape())));
            }
        }
        Ok(())
    }

    /// Registers every parameter as a tape leaf.
    pub fn bind(&self, tape: &mut Tape<S>, requires_grad: bool) -> Result<Vec<Var>, ModelError> {
        self.tensors
            .iter()
            .map(|t| tape.leaf(t.tensor.clone(), requires_grad).map_err(ModelError::from))
            .collect()
    }

    /// Logits for a `[B, C_in, H, W]` batch, computed on a throwaway tape.
    pub fn predict(&self, batch: &Tensor<S>) -> Result<Tensor<S>, ModelError> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false)?;
        let x = tape.constant(batch.clone())?;
        let logits = forward(&mut tape, &self.config, &vars, x)?;
        Ok(tape.value(logits).clone())
    }
}

/// Records `f(θ, x)` on `tape` with parameters `vars` bound by [`ModelParams::bind`].
pub fn forward<S: Scalar>(tape: &mut Tape<S>, config: &EncoderConfig, vars: &[Var], x: Var) -> Result<Var, ModelError> {
    let shape = tape.shape(x);
    let want = [config.input_channels, config.input_size, config.input_size];
    if shape.len() != 4 || shape[1..] != want {
        return Err(TensorError::Dimension {
            op: "forward",
            detail: format!("batch shape {shape:?} does not match [B, {}, {}, {}]", want[0], want[1], want[2]),
        }
        .into());
    }
    let mut params = vars.iter().copied();
    let mut next = || params.next().ok_or_else(|| ModelError::Layout("too few parameter vars".into()));
    let mut h = x;
    for _ in &config.channel_widths {
        let (w, b) = (next()?, next()?);
        let z = tape.conv2d(h, w, 1, 1)?;
        let z = tape.add_channel_bias(z, b)?;
        h = tape.relu(z)?;
        if config.use_residual {
            let (w, b) = (next()?, next()?);
            let z = tape.conv2d(h, w, 1, 1)?;
            let z = tape.add_channel_bias(z, b)?;
            let z = tape.add(z, h)?;
            h = tape.relu(z)?;
        }
        let s = tape.shape(h);
        if s[2] >= 2 && s[3] >= 2 {
            h = tape.avg_pool2(h)?;
        }
    }
    let pooled = tape.global_avg_pool(h)?;
    let (w, b) = (next()?, next()?);
    Ok(tape.dense(pooled, w, b)?)
}

/// Teacher parameters θ′ with their smoothing coefficient `m`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaParams<S = f32> {
    pub params: ModelParams<S>,
    pub m: f64,
}

impl<S: Scalar> EmaParams<S> {
    /// Teacher initialized as an exact copy of the student.
    pub fn new(student: &ModelParams<S>, m: f64) -> Result<Self, ModelError> {
        check_coefficient(m)?;
        Ok(Self { params: student.clone(), m })
    }

    pub fn update(&mut self, student: &ModelParams<S>) -> Result<(), ModelError> {
        ema_update_in_place(&mut self.params, student, self.m)
    }
}

fn check_coefficient(m: f64) -> Result<(), ModelError> {
    if !(0.0..=1.0).contains(&m) {
        return Err(ModelError::Config(format!("EMA coefficient must lie in [0, 1], got {m}")));
    }
    Ok(())
}

/// `θ′ ← m·θ′ + (1 − m)·θ` for every scalar.
pub fn ema_update<S: Scalar>(teacher: &EmaParams<S>, student: &ModelParams<S>, m: f64) -> Result<EmaParams<S>, ModelError> {
    let mut next = EmaParams { params: teacher.params.clone(), m };
    ema_update_in_place(&mut next.params, student, m)?;
    Ok(next)
}

fn ema_update_in_place<S: Scalar>(teacher: &mut ModelParams<S>, student: &ModelParams<S>, m: f64) -> Result<(), ModelError> {
    check_coefficient(m)?;
    teacher.check_same_layout(student)?;
    let keep = S::from_f64_lossy(m);
    let take = S::from_f64_lossy(1.0 - m);
    for (t, s) in teacher.tensors.iter_mut().zip(&student.tensors) {
        for (a, &b) in t.tensor.data_mut().iter_mut().zip(s.tensor.data()) {
            *a = keep * *a + take * b;
        }
    }
    Ok(())
}
