//! SGD training loop, evaluation and the plain-text metrics log.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DatasetSplits, ImageExample, Standardizer};
use crate::model::checkpoint::{Checkpoint, CheckpointError};
use crate::model::{build_encoder, EmaParams, EncoderConfig, ModelError, ModelParams};
use crate::rng::{derive_seed, rng_from, stream, RngState};
use crate::ssl::{compute_loss, AugmentSet, LabeledBatch, LossBreakdown, Method, MethodConfig, RunningClassDistribution, SslError, StepInputs, UnlabeledBatch};
use crate::tensor::{Scalar, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("metrics line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Ssl(#[from] SslError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub total_iterations: usize,
    pub labeled_batch: usize,
    /// Unlabeled batch is `unlabeled_ratio · labeled_batch`.
    pub unlabeled_ratio: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// EMA coefficient for methods other than mean-teacher (which uses its own `ema_m`).
    pub ema_m: f64,
    /// Validation every this many iterations; 0 evaluates only after the last one.
    pub eval_every: usize,
    pub seed: u64,
    /// Report the best evaluated checkpoint instead of the last.
    pub keep_best: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_iterations: 4096,
            labeled_batch: 32,
            unlabeled_ratio: 7,
            lr0: 0.03,
            momentum: 0.9,
            weight_decay: 0.0005,
            ema_m: 0.999,
            eval_every: 512,
            seed: 0,
            keep_best: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: String| Err(TrainError::Config(m));
        if self.total_iterations < 1 {
            return fail("total_iterations must be >= 1".into());
        }
        if self.labeled_batch < 1 || self.unlabeled_ratio < 1 {
            return fail("labeled_batch and unlabeled_ratio must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) || !(self.weight_decay >= 0.0) {
            return fail(format!("lr0 must be > 0 and weight_decay >= 0, got {} / {}", self.lr0, self.weight_decay));
        }
        if !(0.0..=1.0).contains(&self.ema_m) {
            return fail(format!("ema_m must lie in [0, 1], got {}", self.ema_m));
        }
        Ok(())
    }

    pub fn unlabeled_batch(&self) -> usize {
        self.labeled_batch * self.unlabeled_ratio
    }
}

/// `lr0 · cos(7πk / 16K)`.
pub fn cosine_lr(k: usize, total: usize, lr0: f64) -> Result<f64, TrainError> {
    if total == 0 || k > total {
        return Err(TrainError::Config(format!("iteration {k} outside [0, {total}]")));
    }
    Ok(lr0 * (7.0 * std::f64::consts::PI * k as f64 / (16.0 * total as f64)).cos())
}

/// Momentum buffers mirroring the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<S = f32> {
    pub velocity: Vec<Tensor<S>>,
    pub iteration: usize,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new(params: &ModelParams<S>) -> Self {
        Self { velocity: params.tensors().iter().map(|t| Tensor::zeros(t.tensor.shape())).collect(), iteration: 0 }
    }
}

/// `g ← grad + wd·θ; v ← momentum·v + g; θ ← θ − lr·v`.
pub fn sgd_step<S: Scalar>(
    params: &mut ModelParams<S>,
    grads: &[Tensor<S>],
    state: &mut OptimizerState<S>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<(), TrainError> {
    if grads.len() != params.len() || state.velocity.len() != params.len() {
        return Err(TrainError::Config(format!(
            "{} gradients and {} velocities for {} parameters",
            grads.len(),
            state.velocity.len(),
            params.len()
        )));
    }
    for ((p, g), v) in params.tensors().iter().zip(grads).zip(&state.velocity) {
        if p.tensor.shape() != g.shape() || p.tensor.shape() != v.shape() {
            return Err(TrainError::Config(format!("shape mismatch for {}: {:?} vs {:?}", p.name, p.tensor.shape(), g.shape())));
        }
    }
    let (lr, m, wd) = (S::from_f64_lossy(lr), S::from_f64_lossy(momentum), S::from_f64_lossy(weight_decay));
    for ((theta, g), v) in params.tensors_mut().zip(grads).zip(state.velocity.iter_mut()) {
        for ((t, &gi), vi) in theta.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            let step = gi + wd * *t;
            *vi = m * *vi + step;
            *t = *t - lr * *vi;
        }
    }
    state.iteration += 1;
    Ok(())
}

/// Endless reshuffled pass over `0..len`; each cycle is a fresh permutation.
#[derive(Clone, Debug)]
pub struct CycleSampler {
    len: usize,
    seed: u64,
    cycle: u64,
    order: Vec<usize>,
    pos: usize,
}

impl CycleSampler {
    pub fn new(len: usize, seed: u64) -> Self {
        let mut s = Self { len, seed, cycle: 0, order: Vec::new(), pos: 0 };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.len).collect();
        self.order.shuffle(&mut rng_from(derive_seed(self.seed, stream::SAMPLER, self.cycle)));
        self.pos = 0;
    }

    pub fn next_batch(&mut self, n: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n && self.len > 0 {
            if self.pos == self.len {
                self.cycle += 1;
                self.reshuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub iteration: usize,
    pub supervised_loss: f64,
    pub unsupervised_loss: f64,
    pub total: f64,
    pub mask_rate: f64,
    pub lr: f64,
    pub eval_accuracy: Option<f64>,
}

/// Per-iteration records.
///
/// Text form: a `# sslab metrics v1` line, a tab-separated header
/// `iteration sup_loss unsup_loss total mask_rate lr eval_accuracy`, then one
/// row per iteration. Reals use shortest round-trip formatting; a missing
/// evaluation is `-`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsHistory {
    pub records: Vec<MetricRecord>,
}

impl MetricsHistory {
    pub const FORMAT: &'static str = "# sslab metrics v1";
    const HEADER: &'static str = "iteration\tsup_loss\tunsup_loss\ttotal\tmask_rate\tlr\teval_accuracy";

    pub fn to_text(&self) -> String {
        let mut out = format!("{}\n{}\n", Self::FORMAT, Self::HEADER);
        for r in &self.records {
            let eval = r.eval_accuracy.map_or_else(|| "-".to_string(), |a| a.to_string());
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.iteration, r.supervised_loss, r.unsupervised_loss, r.total, r.mask_rate, r.lr, eval
            );
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, TrainError> {
        let mut lines = text.lines().enumerate();
        let bad = |line: usize, message: String| TrainError::Parse { line: line + 1, message };
        match lines.next() {
            Some((_, l)) if l.trim() == Self::FORMAT => {}
            _ => return Err(bad(0, format!("missing {:?} tag", Self::FORMAT))),
        }
        match lines.next() {
            Some((_, l)) if l.trim() == Self::HEADER => {}
            _ => return Err(bad(1, "missing column header".into())),
        }
        let mut records = Vec::new();
        for (i, line) in lines.filter(|(_, l)| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 7 {
                return Err(bad(i, format!("expected 7 columns, found {}", f.len())));
            }
            let real = |s: &str| s.parse::<f64>().map_err(|e| bad(i, format!("{s:?}: {e}")));
            records.push(MetricRecord {
                iteration: f[0].parse().map_err(|e| bad(i, format!("{:?}: {e}", f[0])))?,
                supervised_loss: real(f[1])?,
                unsupervised_loss: real(f[2])?,
                total: real(f[3])?,
                mask_rate: real(f[4])?,
                lr: real(f[5])?,
                eval_accuracy: if f[6] == "-" { None } else { Some(real(f[6])?) },
            });
        }
        Ok(Self { records })
    }

    pub fn write(&self, path: &Path) -> Result<(), TrainError> {
        fs::write(path, self.to_text()).map_err(|source| TrainError::Io { path: path.to_path_buf(), source })
    }

    pub fn read(path: &Path) -> Result<Self, TrainError> {
        let text = fs::read_to_string(path).map_err(|source| TrainError::Io { path: path.to_path_buf(), source })?;
        Self::parse(&text)
    }

    /// Last recorded validation accuracy.
    pub fn last_eval(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.eval_accuracy)
    }
}

/// `counts[i][j]`: examples of true class `i` predicted as `j`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { counts: vec![vec![0; classes]; classes] }
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            n => self.trace() as f64 / n as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
}

/// Scores `(label, prediction)` pairs.
pub fn evaluate_predictions(pairs: impl IntoIterator<Item = (usize, usize)>, classes: usize) -> Result<Evaluation, TrainError> {
    let mut confusion = ConfusionMatrix::new(classes);
    for (truth, pred) in pairs {
        if truth >= classes || pred >= classes {
            return Err(TrainError::Config(format!("class index out of range for {classes} classes")));
        }
        confusion.counts[truth][pred] += 1;
    }
    if confusion.total() == 0 {
        return Err(TrainError::EmptySplit("validation"));
    }
    Ok(Evaluation { accuracy: confusion.accuracy(), confusion })
}

const EVAL_CHUNK: usize = 256;

/// Accuracy and confusion of `params` on labeled `examples`.
pub fn evaluate<S: Scalar>(params: &ModelParams<S>, examples: &[ImageExample], standardizer: &Standardizer) -> Result<Evaluation, TrainError> {
    if examples.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    let classes = params.config().num_classes;
    let mut pairs = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(EVAL_CHUNK) {
        let refs: Vec<&Tensor<f32>> = chunk.iter().map(|e| &e.image).collect();
        let logits = params.predict(&standardizer.batch::<S>(&refs)?)?;
        for (i, e) in chunk.iter().enumerate() {
            let label = e.label.ok_or_else(|| TrainError::Config(format!("validation example {} is unlabeled", e.id)))?;
            pairs.push((label, crate::ssl::argmax(logits.row(i))));
        }
    }
    evaluate_predictions(pairs, classes)
}

/// What the observer sees after each parameter update.
pub struct StepEvent<'a> {
    pub iteration: usize,
    pub labeled_ids: &'a [u64],
    pub unlabeled_ids: &'a [u64],
    pub breakdown: &'a LossBreakdown,
    pub lr: f64,
    pub student: &'a ModelParams<f32>,
    pub ema: &'a EmaParams<f32>,
}

/// Encoder and augmentation choices that sit outside the two configs.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSetup {
    pub encoder: EncoderConfig,
    pub augment: AugmentSet,
}

impl TrainSetup {
    /// Default encoder widths for the split's image geometry.
    pub fn for_splits(data: &DatasetSplits) -> Self {
        let encoder = EncoderConfig {
            input_channels: data.channels,
            input_size: data.image_size,
            num_classes: data.num_classes,
            ..EncoderConfig::default()
        };
        Self { encoder, augment: AugmentSet::standard(data.image_size) }
    }
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub student: ModelParams<f32>,
    pub ema: EmaParams<f32>,
    /// Whether evaluation used the EMA teacher.
    pub evaluates_teacher: bool,
    pub running: Option<RunningClassDistribution>,
    /// Evaluation of the reported checkpoint (last, or best with `keep_best`).
    pub evaluation: Option<Evaluation>,
    /// Iteration count at the reported checkpoint.
    pub reported_iteration: usize,
    pub best: Option<(usize, ModelParams<f32>)>,
    pub optimizer: OptimizerState<f32>,
}

impl TrainedModel {
    /// Parameters used for prediction.
    pub fn eval_params(&self) -> &ModelParams<f32> {
        if self.evaluates_teacher {
            &self.ema.params
        } else {
            &self.student
        }
    }

    /// Student and teacher (prefixed `teacher.`) in one file.
    pub fn checkpoint(&self, seed: u64) -> Checkpoint {
        let it = self.optimizer.iteration as u64;
        let rng = RngState::capture(&rng_from(derive_seed(seed, stream::STEP, it)));
        Checkpoint::from_params(&self.student, it, rng).with_prefixed("teacher.", &self.ema.params)
    }
}

pub fn train(train_cfg: &TrainConfig, method_cfg: &MethodConfig, data: &DatasetSplits) -> Result<(TrainedModel, MetricsHistory), TrainError> {
    train_with(train_cfg, method_cfg, data, &TrainSetup::for_splits(data), |_| {})
}

/// [`train`] with explicit encoder/augmentation and a per-step observer.
pub fn train_with(
    train_cfg: &TrainConfig,
    method_cfg: &MethodConfig,
    data: &DatasetSplits,
    setup: &TrainSetup,
    mut observe: impl FnMut(&StepEvent<'_>),
) -> Result<(TrainedModel, MetricsHistory), TrainError> {
    train_cfg.validate()?;
    method_cfg.validate()?;
    setup.encoder.validate()?;
    let enc = &setup.encoder;
    if enc.input_channels != data.channels || enc.input_size != data.image_size || enc.num_classes != data.num_classes {
        return Err(TrainError::Config(format!(
            "encoder expects {}×{}px/{} classes, data is {}×{}px/{} classes",
            enc.input_channels, enc.input_size, enc.num_classes, data.channels, data.image_size, data.num_classes
        )));
    }
    if data.labeled.is_empty() {
        return Err(TrainError::EmptySplit("labeled"));
    }
    let method = method_cfg.method;
    if method.uses_unlabeled() && data.unlabeled.is_empty() {
        return Err(TrainError::EmptySplit("unlabeled"));
    }
    let labels: Vec<usize> = data
        .labeled
        .iter()
        .map(|e| e.label.ok_or_else(|| TrainError::Config(format!("labeled example {} has no label", e.id))))
        .collect::<Result<_, _>>()?;

    let k_total = train_cfg.total_iterations;
    let seed = train_cfg.seed;
    let mut student = build_encoder::<f32>(enc, seed)?;
    let ema_m = if method == Method::MeanTeacher { method_cfg.ema_m } else { train_cfg.ema_m };
    let mut ema = EmaParams::new(&student, ema_m)?;
    let mut opt = OptimizerState::new(&student);
    let mut running = (method == Method::ReMixMatch)
        .then(|| RunningClassDistribution::from_counts(&data.labeled_histogram(), RunningClassDistribution::DEFAULT_DECAY))
        .transpose()?;
    let mut lab_sampler = CycleSampler::new(data.labeled.len(), derive_seed(seed, stream::SAMPLER, 0));
    let mut unl_sampler = CycleSampler::new(data.unlabeled.len(), derive_seed(seed, stream::SAMPLER, 1));
    let evaluates_teacher = method == Method::MeanTeacher;

    let mut history = MetricsHistory::default();
    let mut best: Option<(usize, f64, ModelParams<f32>, Evaluation)> = None;
    let mut last_eval = None;
    for k in 0..k_total {
        let lr = cosine_lr(k, k_total, train_cfg.lr0)?;
        let li = lab_sampler.next_batch(train_cfg.labeled_batch);
        let ui = if method.uses_unlabeled() { unl_sampler.next_batch(train_cfg.unlabeled_batch()) } else { Vec::new() };
        let labeled = LabeledBatch { images: li.iter().map(|&i| &data.labeled[i].image).collect(), labels: li.iter().map(|&i| labels[i]).collect() };
        let unlabeled = UnlabeledBatch { images: ui.iter().map(|&i| &data.unlabeled[i].image).collect() };
        let mut inputs = StepInputs::new(&student, labeled, unlabeled, method_cfg.clone(), derive_seed(seed, stream::STEP, k as u64));
        inputs.lambda = method_cfg.lambda_at(k, k_total);
        inputs.standardizer = data.standardizer;
        inputs.augment = setup.augment.clone();
        inputs.running = running.clone();
        if evaluates_teacher {
            inputs.teacher = Some(&ema.params);
        }
        let loss = compute_loss(&inputs)?;
        let breakdown = loss.breakdown;
        let batch_mean = loss.batch_mean_prediction.clone();
        let grads = loss.backward()?;
        drop(inputs);
        if let (Some(r), Some(mean)) = (running.as_mut(), batch_mean) {
            r.update(&mean)?;
        }
        sgd_step(&mut student, &grads.student, &mut opt, lr, train_cfg.momentum, train_cfg.weight_decay)?;
        ema.update(&student)?;

        let due = (train_cfg.eval_every > 0 && (k + 1) % train_cfg.eval_every == 0) || k + 1 == k_total;
        let eval_accuracy = if due && !data.validation.is_empty() {
            let params = if evaluates_teacher { &ema.params } else { &student };
            let ev = evaluate(params, &data.validation, &data.standardizer)?;
            let acc = ev.accuracy;
            if train_cfg.keep_best && best.as_ref().is_none_or(|b| acc > b.1) {
                best = Some((k + 1, acc, params.clone(), ev.clone()));
            }
            last_eval = Some(ev);
            Some(acc)
        } else {
            None
        };
        history.records.push(MetricRecord {
            iteration: k,
            supervised_loss: breakdown.supervised_loss,
            unsupervised_loss: breakdown.unsupervised_loss,
            total: breakdown.total,
            mask_rate: breakdown.mask_rate,
            lr,
            eval_accuracy,
        });
        let lids: Vec<u64> = li.iter().map(|&i| data.labeled[i].id).collect();
        let uids: Vec<u64> = ui.iter().map(|&i| data.unlabeled[i].id).collect();
        observe(&StepEvent { iteration: k, labeled_ids: &lids, unlabeled_ids: &uids, breakdown: &breakdown, lr, student: &student, ema: &ema });
    }

    let (evaluation, reported_iteration, best) = match best {
        Some((it, _, params, ev)) => (Some(ev), it, Some((it, params))),
        None => (last_eval, k_total, None),
    };
    let model = TrainedModel { student, ema, evaluates_teacher, running, evaluation, reported_iteration, best, optimizer: opt };
    Ok((model, history))
}

/// Writes `metrics.tsv` and `checkpoint.bin` under `dir`.
pub fn save_run(dir: &Path, model: &TrainedModel, history: &MetricsHistory, seed: u64) -> Result<(), TrainError> {
    fs::create_dir_all(dir).map_err(|source| TrainError::Io { path: dir.to_path_buf(), source })?;
    history.write(&dir.join("metrics.tsv"))?;
    model.checkpoint(seed).save(&dir.join("checkpoint.bin"))?;
    Ok(())
}
