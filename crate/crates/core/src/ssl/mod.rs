//! Semi-supervised objectives.
//!
//! Each method consumes one labeled and one unlabeled batch and records a
//! differentiable loss `L = L_s + λ·L_u` on a fresh [`Tape`](crate::tensor::Tape).
//! Pseudo-labels, guesses, anchors and teacher predictions are constants on
//! that tape, so no gradient flows through them.

mod losses;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::AugmentError;
use crate::model::ModelError;
use crate::tensor::{Scalar, Tensor, TensorError};

pub use losses::{
    compute_loss, fixmatch_loss, mean_teacher_loss, mixmatch_guess, mixmatch_loss, pi_model_loss,
    pseudo_label_loss, remixmatch_loss, supervised_loss, uda_loss, vat_direction, vat_loss, vat_perturbation, anchor_seed, AugmentSet,
    LabeledBatch, MixCoefficient, MixMatchPlan, StepGradients, StepInputs, StepLoss, UnlabeledBatch,
};

#[derive(Debug, Error)]
pub enum SslError {
    #[error("{0} batch is empty")]
    EmptyBatch(&'static str),
    #[error("loss for {expected:?} called with a {got:?} config")]
    MethodMismatch { expected: Method, got: Method },
    #[error("invalid method config: {0}")]
    Config(String),
    #[error("{0}")]
    Missing(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    SupervisedOnly,
    PiModel,
    MeanTeacher,
    Vat,
    Uda,
    PseudoLabel,
    #[serde(rename = "mixmatch")]
    MixMatch,
    #[serde(rename = "remixmatch")]
    ReMixMatch,
    #[serde(rename = "fixmatch")]
    FixMatch,
}

impl Method {
    /// The eight semi-supervised methods, in table order.
    pub const SSL: [Method; 8] = [
        Method::PiModel,
        Method::PseudoLabel,
        Method::MeanTeacher,
        Method::Vat,
        Method::MixMatch,
        Method::ReMixMatch,
        Method::Uda,
        Method::FixMatch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::SupervisedOnly => "supervised-only",
            Method::PiModel => "pi-model",
            Method::MeanTeacher => "mean-teacher",
            Method::Vat => "vat",
            Method::Uda => "uda",
            Method::PseudoLabel => "pseudo-label",
            Method::MixMatch => "mixmatch",
            Method::ReMixMatch => "remixmatch",
            Method::FixMatch => "fixmatch",
        }
    }

    pub fn uses_unlabeled(self) -> bool {
        self != Method::SupervisedOnly
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        std::iter::once(Method::SupervisedOnly)
            .chain(Method::SSL)
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown method {s:?}"))
    }
}

/// Consistency divergence `R`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Divergence {
    /// Squared distance between probability vectors, normalized by `C·B`.
    MseProbs,
    /// `KL(target ‖ prediction)`.
    Kl,
}

/// Method selection plus every hyper-parameter, all explicit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodConfig {
    pub method: Method,
    pub lambda_u: f64,
    pub ema_m: f64,
    pub temperature: f64,
    pub p_cutoff: f64,
    /// MixMatch augmentations per unlabeled image.
    pub k: usize,
    /// ReMixMatch strong anchors per unlabeled image.
    pub n_strong: usize,
    pub vat_epsilon: f64,
    pub vat_xi: f64,
    pub divergence: Divergence,
    /// Beta concentration for mixup coefficients.
    pub mixup_concentration: f64,
    /// Fraction of total iterations over which λ ramps linearly from 0.
    pub rampup_fraction: f64,
}

impl MethodConfig {
    pub fn defaults(method: Method) -> Self {
        let base = Self {
            method,
            lambda_u: 1.0,
            ema_m: 0.999,
            temperature: 0.5,
            p_cutoff: 0.95,
            k: 2,
            n_strong: 2,
            vat_epsilon: 2.0,
            vat_xi: 0.1,
            divergence: Divergence::Kl,
            mixup_concentration: 0.75,
            rampup_fraction: 0.0,
        };
        match method {
            Method::SupervisedOnly => Self { lambda_u: 0.0, ..base },
            Method::PiModel => Self { lambda_u: 10.0, divergence: Divergence::MseProbs, rampup_fraction: 1.0 / 16.0, ..base },
            Method::MeanTeacher => Self { lambda_u: 50.0, divergence: Divergence::MseProbs, rampup_fraction: 1.0 / 16.0, ..base },
            Method::Vat => Self { lambda_u: 0.3, ..base },
            Method::MixMatch => Self { lambda_u: 100.0, divergence: Divergence::MseProbs, rampup_fraction: 1.0 / 16.0, ..base },
            Method::ReMixMatch => Self { lambda_u: 1.5, ..base },
            Method::Uda | Method::PseudoLabel | Method::FixMatch => base,
        }
    }

    pub fn validate(&self) -> Result<(), SslError> {
        let check = |ok: bool, what: String| if ok { Ok(()) } else { Err(SslError::Config(what)) };
        check(self.lambda_u >= 0.0 && self.lambda_u.is_finite(), format!("lambda_u must be >= 0, got {}", self.lambda_u))?;
        check((0.0..=1.0).contains(&self.ema_m), format!("ema_m must lie in [0, 1], got {}", self.ema_m))?;
        check(self.temperature > 0.0 && self.temperature.is_finite(), format!("temperature must be > 0, got {}", self.temperature))?;
        check((0.0..=1.0).contains(&self.p_cutoff), format!("p_cutoff must lie in [0, 1], got {}", self.p_cutoff))?;
        check(self.k >= 1, "k must be >= 1".into())?;
        check(self.n_strong >= 1, "n_strong must be >= 1".into())?;
        check(self.vat_epsilon >= 0.0 && self.vat_epsilon.is_finite(), format!("vat_epsilon must be >= 0, got {}", self.vat_epsilon))?;
        check(self.vat_xi > 0.0 && self.vat_xi.is_finite(), format!("vat_xi must be > 0, got {}", self.vat_xi))?;
        check(self.mixup_concentration > 0.0, format!("mixup_concentration must be > 0, got {}", self.mixup_concentration))?;
        check((0.0..=1.0).contains(&self.rampup_fraction), format!("rampup_fraction must lie in [0, 1], got {}", self.rampup_fraction))
    }

    /// λ at iteration `k` of `total`: linear ramp from 0 over `rampup_fraction·total`.
    pub fn lambda_at(&self, k: usize, total: usize) -> f64 {
        let ramp = self.rampup_fraction * total as f64;
        if ramp <= 0.0 {
            self.lambda_u
        } else {
            self.lambda_u * (k as f64 / ramp).min(1.0)
        }
    }
}

/// Supervised/unsupervised split of one step's loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub supervised_loss: f64,
    pub unsupervised_loss: f64,
    pub total: f64,
    /// Fraction of unlabeled examples contributing to the unsupervised term.
    pub mask_rate: f64,
    /// The (possibly ramped) λ used for `total`.
    pub lambda: f64,
}

/// Running average of unlabeled predictions and the labeled class prior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningClassDistribution {
    pub running: Vec<f64>,
    pub prior: Vec<f64>,
    pub decay: f64,
}

impl RunningClassDistribution {
    pub const DEFAULT_DECAY: f64 = 0.999;

    /// Starts the running average at the prior.
    pub fn new(prior: Vec<f64>, decay: f64) -> Result<Self, SslError> {
        check_distribution("prior", &prior)?;
        if !(0.0..=1.0).contains(&decay) {
            return Err(SslError::Config(format!("decay must lie in [0, 1], got {decay}")));
        }
        Ok(Self { running: prior.clone(), prior, decay })
    }

    pub fn uniform(classes: usize) -> Self {
        let p = vec![1.0 / classes as f64; classes];
        Self { running: p.clone(), prior: p, decay: Self::DEFAULT_DECAY }
    }

    /// Prior from labeled class counts.
    pub fn from_counts(counts: &[usize], decay: f64) -> Result<Self, SslError> {
        let total: usize = counts.iter().sum();
        if total == 0 {
            return Err(SslError::Config("no labeled examples for the prior".into()));
        }
        Self::new(counts.iter().map(|&c| c as f64 / total as f64).collect(), decay)
    }

    pub fn update(&mut self, batch_mean: &[f64]) -> Result<(), SslError> {
        check_distribution("batch mean prediction", batch_mean)?;
        if batch_mean.len() != self.running.len() {
            return Err(SslError::Config("class count mismatch in running distribution".into()));
        }
        for (r, &b) in self.running.iter_mut().zip(batch_mean) {
            *r = self.decay * *r + (1.0 - self.decay) * b;
        }
        let z: f64 = self.running.iter().sum();
        self.running.iter_mut().for_each(|r| *r /= z);
        Ok(())
    }
}

fn check_distribution(what: &'static str, p: &[f64]) -> Result<(), SslError> {
    let sum: f64 = p.iter().sum();
    if p.is_empty() || (sum - 1.0).abs() > 1e-6 || p.iter().any(|v| *v < 0.0 || !v.is_finite()) {
        return Err(SslError::Config(format!("{what} is not a distribution (sum {sum})")));
    }
    Ok(())
}

/// `p_c^{1/T} / Σ_j p_j^{1/T}`, computed relative to the max entry.
pub fn sharpen<S: Scalar>(p: &[S], temperature: f64) -> Result<Vec<S>, SslError> {
    if !(temperature > 0.0) {
        return Err(SslError::Config(format!("temperature must be > 0, got {temperature}")));
    }
    let max = p.iter().map(|v| v.to_f64_lossy()).fold(0.0, f64::max);
    if max <= 0.0 {
        return Err(SslError::Config("cannot sharpen an all-zero vector".into()));
    }
    let inv_t = 1.0 / temperature;
    let powered: Vec<f64> = p.iter().map(|v| (v.to_f64_lossy() / max).powf(inv_t)).collect();
    let z: f64 = powered.iter().sum();
    Ok(powered.into_iter().map(|v| S::from_f64_lossy(v / z)).collect())
}

/// `mask[b]` iff `max_c probs[b, c] ≥ cutoff`.
pub fn confidence_mask<S: Scalar>(probs: &Tensor<S>, cutoff: f64) -> Vec<bool> {
    let cols = probs.shape()[probs.ndim() - 1];
    probs
        .data()
        .chunks(cols)
        .map(|row| row.iter().map(|v| v.to_f64_lossy()).fold(f64::NEG_INFINITY, f64::max) >= cutoff)
        .collect()
}

pub(crate) const ALIGN_FLOOR: f64 = 1e-6;

/// `normalize(q · prior / max(running, 1e-6))`.
pub fn distribution_align<S: Scalar>(q: &[S], dist: &RunningClassDistribution) -> Result<Vec<S>, SslError> {
    if q.len() != dist.prior.len() {
        return Err(SslError::Config(format!("{} classes vs prior of {}", q.len(), dist.prior.len())));
    }
    let scaled: Vec<f64> = q
        .iter()
        .zip(&dist.prior)
        .zip(&dist.running)
        .map(|((&qc, &p), &r)| qc.to_f64_lossy() * p / r.max(ALIGN_FLOOR))
        .collect();
    let z: f64 = scaled.iter().sum();
    if !(z > 0.0) {
        return Err(SslError::Config("aligned distribution has zero mass".into()));
    }
    Ok(scaled.into_iter().map(|v| S::from_f64_lossy(v / z)).collect())
}

/// Index of the first maximum.
pub fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn one_hot<S: Scalar>(labels: &[usize], classes: usize) -> Vec<S> {
    let mut out = vec![S::zero(); labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        out[i * classes + l] = S::one();
    }
    out
}
