use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use super::{argmax, confidence_mask, distribution_align, one_hot, sharpen, Divergence, LossBreakdown, Method, MethodConfig, RunningClassDistribution, SslError};
use crate::augment::{mixup_with_coefficient, sample_mix_coefficient, AugmentPolicy};
use crate::data::Standardizer;
use crate::model::{forward, ModelParams};
use crate::rng::{derive_seed, rng_from, stream};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Images in `[0, 1]` with their class labels.
#[derive(Clone, Debug, Default)]
pub struct LabeledBatch<'a> {
    pub images: Vec<&'a Tensor<f32>>,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, Default)]
pub struct UnlabeledBatch<'a> {
    pub images: Vec<&'a Tensor<f32>>,
}

/// Weak and strong augmentation tiers used by the objectives.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentSet {
    pub weak: AugmentPolicy,
    pub strong: AugmentPolicy,
}

impl AugmentSet {
    pub fn standard(image_size: usize) -> Self {
        Self { weak: AugmentPolicy::weak(), strong: AugmentPolicy::strong(image_size) }
    }

    pub fn identity() -> Self {
        Self { weak: AugmentPolicy::identity(), strong: AugmentPolicy::identity() }
    }
}

/// Source of MixMatch mixing coefficients.
#[derive(Clone, Debug, PartialEq)]
pub enum MixCoefficient {
    /// `Beta(c, c)` draws with the configured concentration.
    Beta,
    /// Injected values: one for all mixed examples, or one per mixed example
    /// (labeled first, then unlabeled instances).
    Fixed(Vec<f64>),
}

/// Everything one loss evaluation reads.
#[derive(Clone, Debug)]
pub struct StepInputs<'a, S: Scalar> {
    pub student: &'a ModelParams<S>,
    /// EMA parameters, required by mean-teacher.
    pub teacher: Option<&'a ModelParams<S>>,
    /// Parameters for the branches that carry no gradient (pseudo-labels,
    /// guesses, anchors, the VAT direction); the student when absent.
    pub frozen: Option<&'a ModelParams<S>>,
    pub labeled: LabeledBatch<'a>,
    pub unlabeled: UnlabeledBatch<'a>,
    pub config: MethodConfig,
    /// Effective λ for this step (after any ramp-up).
    pub lambda: f64,
    pub seed: u64,
    pub standardizer: Standardizer,
    pub augment: AugmentSet,
    pub mix: MixCoefficient,
    /// ReMixMatch alignment state; uniform when absent.
    pub running: Option<RunningClassDistribution>,
}

impl<'a, S: Scalar> StepInputs<'a, S> {
    pub fn new(student: &'a ModelParams<S>, labeled: LabeledBatch<'a>, unlabeled: UnlabeledBatch<'a>, config: MethodConfig, seed: u64) -> Self {
        Self {
            student,
            teacher: None,
            frozen: None,
            labeled,
            unlabeled,
            lambda: config.lambda_u,
            config,
            seed,
            standardizer: Standardizer::IDENTITY,
            augment: AugmentSet::standard(student.config().input_size),
            mix: MixCoefficient::Beta,
            running: None,
        }
    }

    fn frozen(&self) -> &'a ModelParams<S> {
        self.frozen.unwrap_or(self.student)
    }

    fn classes(&self) -> usize {
        self.student.config().num_classes
    }

    fn batch(&self, images: &[Tensor<f32>]) -> Result<Tensor<S>, SslError> {
        let refs: Vec<&Tensor<f32>> = images.iter().collect();
        Ok(self.standardizer.batch(&refs)?)
    }

    fn unlabeled_nonempty(&self) -> Result<(), SslError> {
        if self.unlabeled.images.is_empty() {
            return Err(SslError::EmptyBatch("unlabeled"));
        }
        Ok(())
    }

    /// Labeled images under the weak policy.
    pub fn labeled_views(&self) -> Vec<Tensor<f32>> {
        self.labeled
            .images
            .iter()
            .enumerate()
            .map(|(i, x)| self.augment.weak.apply(x, derive_seed(self.seed, stream::LABELED_WEAK, i as u64)))
            .collect()
    }

    /// Unlabeled images under `policy`, seeded from `stream`.
    pub fn unlabeled_views(&self, policy: &AugmentPolicy, stream: u64) -> Vec<Tensor<f32>> {
        self.unlabeled
            .images
            .iter()
            .enumerate()
            .map(|(j, x)| policy.apply(x, derive_seed(self.seed, stream, j as u64)))
            .collect()
    }

    /// Unaugmented unlabeled images.
    pub fn unlabeled_clean(&self) -> Vec<Tensor<f32>> {
        self.unlabeled.images.iter().map(|x| (*x).clone()).collect()
    }
}

/// A recorded loss, ready for one backward pass.
#[derive(Debug)]
pub struct StepLoss<S: Scalar> {
    tape: Tape<S>,
    total: Var,
    student_vars: Vec<Var>,
    teacher_vars: Option<Vec<Var>>,
    pub breakdown: LossBreakdown,
    /// Mean unlabeled prediction, for updating a running class distribution.
    pub batch_mean_prediction: Option<Vec<f64>>,
    /// Per-example unlabeled mask of thresholded methods.
    pub mask: Option<Vec<bool>>,
}

/// Gradients of the total loss.
#[derive(Clone, Debug)]
pub struct StepGradients<S> {
    pub student: Vec<Tensor<S>>,
    /// Present when a teacher was bound; always zero.
    pub teacher: Option<Vec<Tensor<S>>>,
}

impl<S: Scalar> StepLoss<S> {
    pub fn backward(mut self) -> Result<StepGradients<S>, SslError> {
        let mut grads = self.tape.backward(self.total)?;
        let mut take = |vars: &[Var]| -> Vec<Tensor<S>> {
            vars.iter().map(|&v| grads.take(v).expect("parameter leaves require grad")).collect()
        };
        let student = take(&self.student_vars);
        let teacher = self.teacher_vars.as_deref().map(take);
        Ok(StepGradients { student, teacher })
    }
}

fn scalar<S: Scalar>(tape: &Tape<S>, v: Var) -> f64 {
    tape.value(v).item().expect("scalar loss").to_f64_lossy()
}

struct Recording<S: Scalar> {
    tape: Tape<S>,
    vars: Vec<Var>,
    supervised: Var,
}

fn check_method<S: Scalar>(inputs: &StepInputs<'_, S>, expected: Method) -> Result<(), SslError> {
    if inputs.config.method != expected {
        return Err(SslError::MethodMismatch { expected, got: inputs.config.method });
    }
    inputs.config.validate()?;
    if !(inputs.lambda >= 0.0 && inputs.lambda.is_finite()) {
        return Err(SslError::Config(format!("effective lambda must be >= 0, got {}", inputs.lambda)));
    }
    Ok(())
}

fn labeled_targets<S: Scalar>(inputs: &StepInputs<'_, S>) -> Result<Vec<S>, SslError> {
    let c = inputs.classes();
    if inputs.labeled.images.is_empty() {
        return Err(SslError::EmptyBatch("labeled"));
    }
    if inputs.labeled.labels.len() != inputs.labeled.images.len() {
        return Err(SslError::Config("labeled batch has mismatched label count".into()));
    }
    if let Some(&bad) = inputs.labeled.labels.iter().find(|&&l| l >= c) {
        return Err(SslError::Config(format!("label {bad} out of range for {c} classes")));
    }
    Ok(one_hot(&inputs.labeled.labels, c))
}

fn constant_rows<S: Scalar>(tape: &mut Tape<S>, rows: usize, cols: usize, data: Vec<S>) -> Result<Var, SslError> {
    Ok(tape.constant(Tensor::new(vec![rows, cols], data)?)?)
}

/// Student tape with the supervised CE on the weakly augmented labeled batch.
fn begin<S: Scalar>(inputs: &StepInputs<'_, S>) -> Result<Recording<S>, SslError> {
    let targets = labeled_targets(inputs)?;
    let mut tape = Tape::new();
    let vars = inputs.student.bind(&mut tape, true)?;
    let x = tape.constant(inputs.batch(&inputs.labeled_views())?)?;
    let logits = forward(&mut tape, inputs.student.config(), &vars, x)?;
    let target = constant_rows(&mut tape, inputs.labeled.images.len(), inputs.classes(), targets)?;
    let supervised = tape.cross_entropy(logits, target)?;
    Ok(Recording { tape, vars, supervised })
}

struct Unsupervised {
    loss: Option<Var>,
    mask_rate: f64,
    mask: Option<Vec<bool>>,
    batch_mean: Option<Vec<f64>>,
}

impl Unsupervised {
    fn dense(loss: Var) -> Self {
        Self { loss: Some(loss), mask_rate: 1.0, mask: None, batch_mean: None }
    }
}

fn finish<S: Scalar>(mut rec: Recording<S>, inputs: &StepInputs<'_, S>, teacher_vars: Option<Vec<Var>>, u: Unsupervised) -> Result<StepLoss<S>, SslError> {
    let unsup = match u.loss {
        Some(v) => v,
        None => rec.tape.constant(Tensor::scalar(S::zero()))?,
    };
    let weighted = rec.tape.scale(unsup, inputs.lambda)?;
    let total = rec.tape.add(rec.supervised, weighted)?;
    let breakdown = LossBreakdown {
        supervised_loss: scalar(&rec.tape, rec.supervised),
        unsupervised_loss: scalar(&rec.tape, unsup),
        total: scalar(&rec.tape, total),
        mask_rate: u.mask_rate,
        lambda: inputs.lambda,
    };
    Ok(StepLoss {
        tape: rec.tape,
        total,
        student_vars: rec.vars,
        teacher_vars,
        breakdown,
        batch_mean_prediction: u.batch_mean,
        mask: u.mask,
    })
}

fn student_logits<S: Scalar>(rec: &mut Recording<S>, inputs: &StepInputs<'_, S>, batch: Tensor<S>) -> Result<Var, SslError> {
    let x = rec.tape.constant(batch)?;
    Ok(forward(&mut rec.tape, inputs.student.config(), &rec.vars, x)?)
}

/// `R(target, prediction)`; `weights` masks rows (1 keeps, 0 drops).
fn divergence<S: Scalar>(tape: &mut Tape<S>, kind: Divergence, target: Var, pred: Var, weights: Option<&[f64]>) -> Result<Var, SslError> {
    Ok(match (kind, weights) {
        (Divergence::Kl, None) => tape.kl_divergence(target, pred)?,
        (Divergence::Kl, Some(w)) => tape.kl_divergence_weighted(target, pred, w)?,
        (Divergence::MseProbs, None) => tape.l2_prob_distance(pred, target)?,
        (Divergence::MseProbs, Some(w)) => {
            let cols = tape.shape(pred)[1];
            let m: Vec<S> = w.iter().flat_map(|&v| std::iter::repeat_n(S::from_f64_lossy(v), cols)).collect();
            let m = constant_rows(tape, w.len(), cols, m)?;
            let p = tape.mul(pred, m)?;
            let t = tape.mul(target, m)?;
            tape.l2_prob_distance(p, t)?
        }
    })
}

fn mask_weights(mask: &[bool]) -> Vec<f64> {
    mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()
}

fn rate(mask: &[bool]) -> f64 {
    mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64
}

fn row_mean<S: Scalar>(probs: &Tensor<S>) -> Vec<f64> {
    let cols = probs.shape()[1];
    let rows = probs.shape()[0];
    let mut mean = vec![0.0; cols];
    for r in 0..rows {
        for (m, v) in mean.iter_mut().zip(probs.row(r)) {
            *m += v.to_f64_lossy() / rows as f64;
        }
    }
    mean
}

/// Supervised CE only; `mask_rate` is 0.
pub fn supervised_loss<S: Scalar>(inputs: &StepInputs<'_, S>) -> Result<StepLoss<S>, SslError> {
    check_method(inputs, Method::SupervisedOnly)?;
    let rec = begin(inputs)?;
    finish(rec, inputs, None, Unsupervised { loss: None, mask_rate: 0.0, mask: None, batch_mean: None })
}

/// Divergence between predictions on two independent weak views; both branches carry gradient.
pub fn pi_model_loss<S: Scalar>(inputs: &StepInputs<'_, S>) -> Result<StepLoss<S>, SslError> {
    check_method(inputs, Method::PiModel)?;
    inputs.unlabeled_nonempty()?;
    let mut rec = begin(inputs)?;
    let x1 = inputs.batch(&inputs.unlabeled_views(&inputs.augment.weak, stream::UNLABELED_WEAK))?;
    let x2 = inputs.batch(&inputs.unlabeled_views(&inputs.augment.weak, stream::UNLABELED_WEAK_2))?;
    let l1 = student_logits(&mut rec, inputs, x1)?;
    let l2 = student_logits(&mut rec, inputs, x2)?;
    let p1 = rec.tape.softmax(l1)?;
    let p2 = rec.tape.softmax(l2)?;
    let u = divergence(&mut rec.tape, inputs.config.divergence, p2, p1, None)?;
    finish(rec, inputs, None, Unsupervised::dense(u))
}

/// Student on one weak view against the detached teacher on another.
pub fn mean_teacher_loss<S: Scalar>(inputs: &StepInputs<'_, S>) -> Result<StepLoss<S>, SslError> {
    check_method(inputs, Method::MeanTeacher)?;
    inputs.unlabeled_nonempty()?;
    let teacher = inputs.teacher.ok_or(SslError::Missing("mean-teacher needs teacher parameters"))?;
    inputs.student.check_same_layout(teacher)?;
    let mut rec = begin(inputs)?;
    let xs = inputs.batch(&inputs.unlabeled_views(&inputs.augment.weak, stream::UNLABELED_WEAK))?;
    let xt = inputs.batch(&inputs.unlabeled_views(&inputs.augment.weak, stream::UNLABELED_WEAK_2))?;
    let ls = student_logits(&mut rec, inputs, xs)?;
    let ps = rec.tape.softmax(ls)?;
    let tvars = teacher.bind(&mut rec.tape, true)?;
    let xt = rec.tape.constant(xt)?;
    let lt = forward(&mut rec.tape, teacher.config(), &tvars, xt)?;
    let pt = rec.tape.softmax(lt)?;
    let pt = rec.tape.detach(pt)?;
    let u = divergence(&mut rec.tape, inputs.config.divergence, pt, ps, None)?;
    finish(rec, inputs, Some(tvars), Unsupervised::dense(u))
}

fn unit_rows<S: Scalar>(data: &mut [S], per_row: usize) -> Vec<bool> {
    data.chunks_mut(per_row)
        .map(|row| {
            let norm = row.iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>().sqrt();
            if norm > 0.0 && norm.is_finite() {
                row.iter_mut().for_each(|v| *v = S::from_f64_lossy(v.to_f64_lossy() / norm));
                true
            } else {
                false
            }
        })
        .collect()
}

/// Random unit direction per example, drawn from a standard normal.
pub fn vat_direction<S: Scalar>(shape: &[usize], seed: u64) -> Tensor<S> {
    let mut rng = rng_from(seed);
    let n: usize = shape.iter().product();
    let mut data: Vec<S> = (0..n).map(|_| S::from_f64_lossy(StandardNormal.sample(&mut rng))).collect();
    unit_rows(&mut data, n / shape[0]);
    Tensor::new(shape.to_vec(), data).expect("finite normal draws")
}

/// One power-iteration step towards the most sensitive direction at `x`.
///
/// Each example's perturbation has L2 norm `epsilon`. Where the gradient
/// vanishes the initial random direction is kept.
pub fn vat_perturbation<S: Scalar>(params: &ModelParams<S>, x: &Tensor<S>, epsilon: f64, xi: f64, seed: u64) -> Result<Tensor<S>, SslError> {
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(SslError::Config(format!("vat epsilon must be >= 0, got {epsilon}")));
    }
    if !(xi > 0.0 && xi.is_finite()) {
        return Err(SslError::Config(format!("vat xi must be > 0, got {xi}")));
    }
    let d0 = vat_direction::<S>(x.shape(), seed);
    let clean = params.predict(x)?.softmax_rows();
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false)?;
    let d = tape.param(d0.clone())?;
    let xi_d = tape.scale(d, xi)?;
    let xv = tape.constant(x.clone())?;
    let xp = tape.add(xv, xi_d)?;
    let logits = forward(&mut tape, params.config(), &vars, xp)?;
    let q = tape.softmax(logits)?;
    let p = tape.constant(clean)?;
    let kl = tape.kl_divergence(p, q)?;
    let mut grads = tape.backward(kl)?;
    let mut g = grads.take(d).expect("direction requires grad").into_data();
    let per_row = x.numel() / x.shape()[0];
    let ok = unit_rows(&mut g, per_row);
    for (row, (good, init)) in g.chunks_mut(per_row).zip(ok.iter().zip(d0.data().chunks(per_row))) {
        if !good {
            row.copy_from_slice(init);
        }
        row.iter_mut().for_each(|v| *v = S::from_f64_lossy(v.to_f64_lossy() * epsilon));
    }
    Ok(Tensor::new(x.shape().to_vec(), g)?)
}

/// Divergence between the detached clean prediction and the prediction at `x + r_adv`.
pub fn vat_loss<S: Scalar>(inputs: &StepInputs<'_, S>) -> Result<StepLoss<S>, SslError> {
    check_method(inputs, Method::Vat)?;
    inputs.unlabeled_nonempty()?;
    let mut rec = begin(inputs)?;
    let x = inputs.batch(&inputs.unlabeled_clean())?;
    let clean = inputs.frozen().predict(&x)?.softmax_rows();
    let cfg = &inputs.config;
    let r = vat_perturbation(inputs.frozen(), &x, cfg.vat_epsilon, cfg.vat_xi, derive_seed(inputs.seed, stream::VAT_DIRECTION, 0))?;
    let shifted: Vec<S> = x.data().iter().zip(r.data()).map(|(&a, &b)| a + b).collect();
    let shifted = Tensor::new(x.shape().to_vec(), shifted)?;
    let logits = student_logits(&mut rec, inputs, shifted)?;
    let q = rec.tape.softmax(logits)?;
    let p = rec.tape.constant(clean)?;
    let u = divergence(&mut rec.tape, cfg.divergence, p, q, None)?;
    finish(rec, inputs, None, Unsupervised::dense(u))
}

/// Masked divergence between the sharpened clean prediction and the strong view.
pub fn uda_loss<S: Scalar>(inputs: &StepInputs<'_, S>) -> Result<StepLoss<S>, SslError> {
    check_method(inputs, Method::Uda)?;
    inputs.unlabeled_nonempty()?;
    let cfg = &inputs.config;
    let mut rec = begin(inputs)?;
    let clean = inputs.frozen().predict(&inputs.batch(&inputs.unlabeled_clean())?)?.softmax_rows();
    let c = inputs.classes();
    let mut target = Vec::with_capacity(clean.numel());
    for r in 0..clean.shape()[0] {
        target.extend(sharpen(clean.row(r), cfg.temperature)?);
    }
    let target = Tensor::new(clean.shape().to_vec(), target)?;
    let mask = confidence_mask(&target, cfg.p_cutoff);
    let strong = inputs.batch(&inputs.unlabeled_views(&inputs.augment.strong, stream::UNLABELED_STRONG))?;
    let logits = student_logits(&mut rec, inputs, strong)?;
    let q = rec.tape.softmax(logits)?;
    let t = constant_rows(&mut rec.tape, mask.len(), c, target.into_data())?;
    let u = divergence(&mut rec.tape, cfg.divergence, t, q, Some(&mask_weights(&mask)))?;
    finish(rec, inputs, None, Unsupervised { loss: Some(u), mask_rate: rate(&mask), mask: Some(mask), batch_mean: None })
}

/// Masked CE against the model's own argmax on unaugmented unlabeled images.
pub fn pseudo_label_loss<S: Scalar>(inputs: &StepInputs<'_, S>) -> Result<StepLoss<S>, SslError> {
    check_method(inputs, Method::PseudoLabel)?;
    inputs.unlabeled_nonempty()?;
    let mut rec = begin(inputs)?;
    let x = inputs.batch(&inputs.unlabeled_clean())?;
    let probs = inputs.frozen().predict(&x)?.softmax_rows();
    let logits = student_logits(&mut rec, inputs, x)?;
    let hard: Vec<usize> = (0..probs.shape()[0]).map(|r| argmax(probs.row(r))).collect();
    let mask = confidence_mask(&probs, inputs.config.p_cutoff);
    let c = inputs.classes();
    let t = constant_rows(&mut rec.tape, hard.len(), c, one_hot(&hard, c))?;
    let u = rec.tape.cross_entropy_weighted(logits, t, &mask_weights(&mask))?;
    finish(rec, inputs, None, Unsupervised { loss: Some(u), mask_rate: rate(&mask), mask: Some(mask), batch_mean: None })
}

/// Sharpened mean prediction over `views` of one unlabeled image; no gradient.
pub fn mixmatch_guess<S: Scalar>(params: &ModelParams<S>, views: &Tensor<S>, temperature: f64) -> Result<Vec<S>, SslError> {
    if views.shape()[0] < 1 {
        return Err(SslError::Config("mixmatch guess needs k >= 1 views".into()));
    }
    let probs = params.predict(views)?.softmax_rows();
    let k = probs.shape()[0];
    let mean: Vec<S> = row_mean(&probs).into_iter().map(S::from_f64_lossy).collect();
    debug_assert!(k >= 1);
    sharpen(&mean, temperature)
}

/// Shuffle of the combined pool and the coefficient of every mixed example.
#[derive(Clone, Debug, PartialEq)]
pub struct MixMatchPlan {
    /// `permutation[i]` is the pool entry mixed into output `i`.
    pub permutation: Vec<usize>,
    pub alphas: Vec<f64>,
}

impl MixMatchPlan {
    /// Pool order is the labeled batch, then unlabeled views `j·k + i`.
    pub fn sample(seed: u64, pool: usize, mix: &MixCoefficient, concentration: f64) -> Result<Self, SslError> {
        let mut permutation: Vec<usize> = (0..pool).collect();
        permutation.shuffle(&mut rng_from(derive_seed(seed, stream::MIXUP, 0)));
        let alphas = match mix {
            MixCoefficient::Beta => (0..pool)
                .map(|i| sample_mix_coefficient(concentration, derive_seed(seed, stream::MIXUP, 1 + i as u64)))
                .collect::<Result<_, _>>()?,
            MixCoefficient::Fixed(v) if v.len() == 1 => vec![v[0]; pool],
            MixCoefficient::Fixed(v) if v.len() == pool => v.clone(),
            MixCoefficient::Fixed(v) => {
                return Err(SslError::Config(format!("{} injected mix coefficients for {pool} examples", v.len())));
            }
        };
        if let Some(a) = alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(SslError::Config(format!("mix coefficient {a} outside [0, 1]")));
        }
        Ok(Self { permutation, alphas })
    }
}

/// MixMatch: guessed labels, mixup against a shuffled pool, CE on the mixed
/// labeled half and squared probability distance on the mixed unlabeled half.
pub fn mixmatch_loss<S: Scalar>(inputs: &StepInputs<'_, S>) -> Result<StepLoss<S>, SslError> {
    check_method(inputs, Method::MixMatch)?;
    inputs.unlabeled_nonempty()?;
    let cfg = &inputs.config;
    let targets = labeled_targets(inputs)?;
    let c = inputs.classes();
    let (b, bu, k) = (inputs.labeled.images.len(), inputs.unlabeled.images.len(), cfg.k);

    let x_l = inputs.batch(&inputs.labeled_views())?;
    let mut u_views = Vec::with_capacity(bu * k);
    for (j, img) in inputs.unlabeled.images.iter().enumerate() {
        let base = derive_seed(inputs.seed, stream::UNLABELED_WEAK, j as u64);
        for i in 0..k {
            u_views.push(inputs.augment.weak.apply(img, derive_seed(base, stream::AUGMENT_INSTANCE, i as u64)));
        }
    }
    let x_u = inputs.batch(&u_views)?;
    let per = x_u.numel() / x_u.shape()[0];
    let image_shape = x_u.shape()[1..].to_vec();
    let mut guesses = Vec::with_capacity(bu * c);
    for j in 0..bu {
        let views = Tensor::new(x_u.shape().iter().enumerate().map(|(d, &s)| if d == 0 { k } else { s }).collect(), x_u.data()[j * k * per..(j + 1) * k * per].to_vec())?;
        guesses.extend(mixmatch_guess(inputs.frozen(), &views, cfg.temperature)?);
    }

    // Combined pool W = labeled ++ unlabeled views (each view carries its image's guess).
    let pool_len = b + bu * k;
    let pool_image = |i: usize| -> Result<Tensor<S>, SslError> {
        let (src, row) = if i < b { (&x_l, i) } else { (&x_u, i - b) };
        Ok(Tensor::new(image_shape.clone(), src.data()[row * per..(row + 1) * per].to_vec())?)
    };
    let pool_label = |i: usize| -> &[S] {
        if i < b {
            &targets[i * c..(i + 1) * c]
        } else {
            let j = (i - b) / k;
            &guesses[j * c..(j + 1) * c]
        }
    };
    let plan = MixMatchPlan::sample(inputs.seed, pool_len, &inputs.mix, cfg.mixup_concentration)?;
    let (mut mixed_x, mut mixed_y) = (Vec::with_capacity(pool_len * per), Vec::with_capacity(pool_len * c));
    for i in 0..pool_len {
        let w = plan.permutation[i];
        let (x, y) = mixup_with_coefficient(&pool_image(i)?, pool_label(i), &pool_image(w)?, pool_label(w), plan.alphas[i])?;
        mixed_x.extend_from_slice(x.data());
        mixed_y.extend(y);
    }
    let batch_of = |rows: std::ops::Range<usize>| -> Result<Tensor<S>, SslError> {
        let mut shape = vec![rows.len()];
        shape.extend_from_slice(&image_shape);
        Ok(Tensor::new(shape, mixed_x[rows.start * per..rows.end * per].to_vec())?)
    };

    let mut tape = Tape::new();
    let vars = inputs.student.bind(&mut tape, true)?;
    let xl = tape.constant(batch_of(0..b)?)?;
    let ll = forward(&mut tape, inputs.student.config(), &vars, xl)?;
    let yl = constant_rows(&mut tape, b, c, mixed_y[..b * c].to_vec())?;
    let supervised = tape.cross_entropy(ll, yl)?;
    let mut rec = Recording { tape, vars, supervised };
    let lu = student_logits(&mut rec, inputs, batch_of(b..pool_len)?)?;
    let pu = rec.tape.softmax(lu)?;
    let yu = constant_rows(&mut rec.tape, pool_len - b, c, mixed_y[b * c..].to_vec())?;
    let u = rec.tape.l2_prob_distance(pu, yu)?;
    finish(rec, inputs, None, Unsupervised::dense(u))
}

/// Seed of strong anchor view `t` of unlabeled image `j`.
pub fn anchor_seed(seed: u64, j: usize, t: usize) -> u64 {
    derive_seed(derive_seed(seed, stream::UNLABELED_STRONG, j as u64), stream::AUGMENT_INSTANCE, t as u64)
}

/// Mean CE between the aligned, sharpened weak prediction and `n_strong` strong views.
pub fn remixmatch_loss<S: Scalar>(inputs: &StepInputs<'_, S>) -> Result<StepLoss<S>, SslError> {
    check_method(inputs, Method::ReMixMatch)?;
    inputs.unlabeled_nonempty()?;
    let cfg = &inputs.config;
    let c = inputs.classes();
    let dist = inputs.running.clone().unwrap_or_else(|| RunningClassDistribution::uniform(c));
    let mut rec = begin(inputs)?;
    let weak = inputs.frozen().predict(&inputs.batch(&inputs.unlabeled_views(&inputs.augment.weak, stream::UNLABELED_WEAK))?)?.softmax_rows();
    let bu = weak.shape()[0];
    let mut anchors = Vec::with_capacity(bu * c);
    for j in 0..bu {
        anchors.extend(sharpen(&distribution_align(weak.row(j), &dist)?, cfg.temperature)?);
    }
    let mut views = Vec::with_capacity(bu * cfg.n_strong);
    let mut targets = Vec::with_capacity(bu * cfg.n_strong * c);
    for t in 0..cfg.n_strong {
        for (j, img) in inputs.unlabeled.images.iter().enumerate() {
            views.push(inputs.augment.strong.apply(img, anchor_seed(inputs.seed, j, t)));
            targets.extend_from_slice(&anchors[j * c..(j + 1) * c]);
        }
    }
    let logits = student_logits(&mut rec, inputs, inputs.batch(&views)?)?;
    let target = constant_rows(&mut rec.tape, views.len(), c, targets)?;
    let u = rec.tape.cross_entropy(logits, target)?;
    finish(rec, inputs, None, Unsupervised { loss: Some(u), mask_rate: 1.0, mask: None, batch_mean: Some(row_mean(&weak)) })
}

/// Masked CE between the weak-view argmax and the strong view, averaged over the full batch.
pub fn fixmatch_loss<S: Scalar>(inputs: &StepInputs<'_, S>) -> Result<StepLoss<S>, SslError> {
    check_method(inputs, Method::FixMatch)?;
    inputs.unlabeled_nonempty()?;
    let mut rec = begin(inputs)?;
    let weak = inputs.frozen().predict(&inputs.batch(&inputs.unlabeled_views(&inputs.augment.weak, stream::UNLABELED_WEAK))?)?.softmax_rows();
    let hard: Vec<usize> = (0..weak.shape()[0]).map(|r| argmax(weak.row(r))).collect();
    let mask = confidence_mask(&weak, inputs.config.p_cutoff);
    let strong = inputs.batch(&inputs.unlabeled_views(&inputs.augment.strong, stream::UNLABELED_STRONG))?;
    let logits = student_logits(&mut rec, inputs, strong)?;
    let c = inputs.classes();
    let t = constant_rows(&mut rec.tape, hard.len(), c, one_hot(&hard, c))?;
    let u = rec.tape.cross_entropy_weighted(logits, t, &mask_weights(&mask))?;
    finish(rec, inputs, None, Unsupervised { loss: Some(u), mask_rate: rate(&mask), mask: Some(mask), batch_mean: None })
}

/// Dispatches on `inputs.config.method`.
pub fn compute_loss<S: Scalar>(inputs: &StepInputs<'_, S>) -> Result<StepLoss<S>, SslError> {
    match inputs.config.method {
        Method::SupervisedOnly => supervised_loss(inputs),
        Method::PiModel => pi_model_loss(inputs),
        Method::MeanTeacher => mean_teacher_loss(inputs),
        Method::Vat => vat_loss(inputs),
        Method::Uda => uda_loss(inputs),
        Method::PseudoLabel => pseudo_label_loss(inputs),
        Method::MixMatch => mixmatch_loss(inputs),
        Method::ReMixMatch => remixmatch_loss(inputs),
        Method::FixMatch => fixmatch_loss(inputs),
    }
}
