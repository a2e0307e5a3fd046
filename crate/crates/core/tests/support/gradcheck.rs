//! Central finite differences against the tape's reverse sweep.
//!
//! The error of one check is `‖a − n‖ / max(‖a‖, ‖n‖, 1e-12)` over the whole
//! gradient of one input, with `a` analytic and `n` numeric.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sslab::model::ModelParams;
use sslab::rng::rng_from;
use sslab::ssl::{compute_loss, StepInputs};
use sslab::tensor::{Tape, Tensor, Var};

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-3;
pub const INSTANCES: usize = 20;

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-12)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero, for inputs that pass through a kink at 0.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) { v } else { -v }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Inner product of `f(inputs)` with a fixed random tensor, as a scalar on the tape.
fn project(tape: &mut Tape<f64>, out: Var, weights: &Tensor<f64>) -> Var {
    if tape.value(out).is_scalar() {
        return out;
    }
    let w = tape.constant(weights.clone()).unwrap();
    let prod = tape.mul(out, w).unwrap();
    tape.sum(prod).unwrap()
}

/// Largest error over the differentiable inputs of `build`.
pub fn check_op(inputs: &[Tensor<f64>], differentiable: &[bool], seed: u64, build: impl Fn(&mut Tape<f64>, &[Var]) -> Var) -> f64 {
    let run = |vals: &[Tensor<f64>], weights: Option<&Tensor<f64>>| -> (f64, Tape<f64>, Vec<Var>, Var, Tensor<f64>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().zip(differentiable).map(|(t, &d)| tape.leaf(t.clone(), d).unwrap()).collect();
        let out = build(&mut tape, &vars);
        let w = weights.cloned().unwrap_or_else(|| random_tensor(&mut rng_from(seed ^ 0x5EED), tape.shape(out), -1.0, 1.0));
        let loss = project(&mut tape, out, &w);
        (tape.value(loss).item().unwrap(), tape, vars, loss, w)
    };
    let (_, mut tape, vars, loss, weights) = run(inputs, None);
    let mut grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, _) in inputs.iter().enumerate().filter(|(i, _)| differentiable[*i]) {
        let analytic = grads.take(vars[i]).unwrap().into_data();
        let mut numeric = Vec::with_capacity(analytic.len());
        for e in 0..inputs[i].numel() {
            let shifted = |delta: f64| {
                let mut vals = inputs.to_vec();
                vals[i].data_mut()[e] += delta;
                run(&vals, Some(&weights)).0
            };
            numeric.push((shifted(STEP) - shifted(-STEP)) / (2.0 * STEP));
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

/// One-sided differences of a smooth loss disagree by about `f'' * step`, which
/// shrinks tenfold with a tenfold smaller step. A gap above this that does not
/// shrink that way means a ReLU corner lies within one step, and the method
/// checks skip that coordinate.
pub const KINK_JUMP: f64 = 1e-3;
/// Largest fraction of coordinates a method suite may skip as kinks.
pub const MAX_KINK_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, Copy, Default)]
pub struct MethodCheck {
    pub error: f64,
    pub kinks: usize,
    pub coordinates: usize,
}

impl MethodCheck {
    pub fn kink_fraction(&self) -> f64 {
        self.kinks as f64 / self.coordinates.max(1) as f64
    }
}

/// Error of the student gradient of a method's total loss.
///
/// Gradient-free branches are pinned to the unperturbed parameters through
/// `frozen`, so the numeric derivative sees exactly what the tape differentiates.
pub fn check_method(inputs: &StepInputs<'_, f64>) -> MethodCheck {
    let base = inputs.student.clone();
    let pinned = StepInputs { frozen: Some(&base), ..inputs.clone() };
    let grads = compute_loss(&pinned).unwrap().backward().unwrap().student;
    let all: Vec<f64> = grads.iter().flat_map(|g| g.data().to_vec()).collect();
    let (mut analytic, mut numeric) = (Vec::with_capacity(all.len()), Vec::with_capacity(all.len()));
    let center = compute_loss(&pinned).unwrap().breakdown.total;
    let sizes: Vec<usize> = base.tensors().iter().map(|t| t.tensor.numel()).collect();
    let mut kinks = 0;
    let mut idx = 0;
    for (ti, &n) in sizes.iter().enumerate() {
        for e in 0..n {
            let eval = |delta: f64| {
                let mut p: ModelParams<f64> = base.clone();
                p.tensors_mut().nth(ti).unwrap().data_mut()[e] += delta;
                let probe = StepInputs { student: &p, frozen: Some(&base), ..inputs.clone() };
                compute_loss(&probe).unwrap().breakdown.total
            };
            let gap = |h: f64| ((eval(h) - center) - (center - eval(-h))) / h;
            let (up, down) = (eval(STEP), eval(-STEP));
            let wide = ((up - center) - (center - down)) / STEP;
            let kinked = wide.abs() > KINK_JUMP && {
                let ratio = wide / (10.0 * gap(STEP / 10.0));
                !(0.5..2.0).contains(&ratio)
            };
            if kinked {
                kinks += 1;
            } else {
                analytic.push(all[idx]);
                numeric.push((up - down) / (2.0 * STEP));
            }
            idx += 1;
        }
    }
    MethodCheck { error: relative_error(&analytic, &numeric), kinks, coordinates: all.len() }
}

use super::toy;
use sslab::ssl::{Method, RunningClassDistribution};

type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Var>;

/// One random instance of every differentiable op: `(name, inputs, differentiable, build)`.
fn op_instances(seed: u64) -> Vec<(&'static str, Vec<Tensor<f64>>, Vec<bool>, Build)> {
    let mut rng = rng_from(seed);
    let r = &mut rng;
    let b = r.random_range(1..4);
    let (i, o) = (r.random_range(1..5), r.random_range(1..5));
    let (c, f) = (r.random_range(1..3), r.random_range(1..4));
    let (h, w) = (r.random_range(3..7), r.random_range(3..7));
    let stride = r.random_range(1..3);
    let pad = r.random_range(0..2);
    let classes = r.random_range(2..5);
    let dist = |r: &mut ChaCha8Rng| {
        let t = random_tensor(r, &[b, classes], 0.05, 1.0);
        let data: Vec<f64> = t.data().chunks(classes).flat_map(|row| {
            let s: f64 = row.iter().sum();
            row.iter().map(move |v| v / s)
        }).collect();
        Tensor::new(vec![b, classes], data).unwrap()
    };
    let weights: Vec<f64> = (0..b).map(|_| r.random_range(0.0..1.5)).collect();
    let scale: f64 = r.random_range(-2.0..2.0);
    let x4 = random_tensor(r, &[b, c, h, w], -1.0, 1.0);
    let k4 = random_tensor(r, &[f, c, 3, 3], -1.0, 1.0);
    let fb = random_tensor(r, &[f], -1.0, 1.0);
    let x2 = random_tensor(r, &[b, i], -1.0, 1.0);
    let w2 = random_tensor(r, &[i, o], -1.0, 1.0);
    let b1 = random_tensor(r, &[o], -1.0, 1.0);
    let kinked = away_from_zero(r, &[b, c, h, w]);
    let y2 = random_tensor(r, &[b, i], -1.0, 1.0);
    let logits = random_tensor(r, &[b, classes], -3.0, 3.0);
    let logits2 = random_tensor(r, &[b, classes], -3.0, 3.0);
    let target = dist(r);
    let p = dist(r);
    let q = dist(r);
    let fx = random_tensor(r, &[b, f, h, w], -1.0, 1.0);
    let wts = weights.clone();
    let wts2 = weights.clone();
    vec![
        ("dense", vec![x2.clone(), w2, b1], vec![true; 3], Box::new(|t: &mut Tape<f64>, v: &[Var]| t.dense(v[0], v[1], v[2]).unwrap()) as Build),
        ("conv2d", vec![x4.clone(), k4], vec![true; 2], Box::new(move |t: &mut Tape<f64>, v: &[Var]| t.conv2d(v[0], v[1], stride, pad).unwrap())),
        ("add_channel_bias", vec![fx, fb], vec![true; 2], Box::new(|t: &mut Tape<f64>, v: &[Var]| t.add_channel_bias(v[0], v[1]).unwrap())),
        ("relu", vec![kinked], vec![true], Box::new(|t: &mut Tape<f64>, v: &[Var]| t.relu(v[0]).unwrap())),
        ("avg_pool2", vec![x4.clone()], vec![true], Box::new(|t: &mut Tape<f64>, v: &[Var]| t.avg_pool2(v[0]).unwrap())),
        ("global_avg_pool", vec![x4], vec![true], Box::new(|t: &mut Tape<f64>, v: &[Var]| t.global_avg_pool(v[0]).unwrap())),
        ("add", vec![x2.clone(), y2.clone()], vec![true; 2], Box::new(|t: &mut Tape<f64>, v: &[Var]| t.add(v[0], v[1]).unwrap())),
        ("sub", vec![x2.clone(), y2.clone()], vec![true; 2], Box::new(|t: &mut Tape<f64>, v: &[Var]| t.sub(v[0], v[1]).unwrap())),
        ("mul", vec![x2.clone(), y2], vec![true; 2], Box::new(|t: &mut Tape<f64>, v: &[Var]| t.mul(v[0], v[1]).unwrap())),
        ("scale", vec![x2.clone()], vec![true], Box::new(move |t: &mut Tape<f64>, v: &[Var]| t.scale(v[0], scale).unwrap())),
        ("sum", vec![x2], vec![true], Box::new(|t: &mut Tape<f64>, v: &[Var]| t.sum(v[0]).unwrap())),
        ("softmax", vec![logits.clone()], vec![true], Box::new(|t: &mut Tape<f64>, v: &[Var]| t.softmax(v[0]).unwrap())),
        ("cross_entropy", vec![logits.clone(), target.clone()], vec![true, false], Box::new(|t: &mut Tape<f64>, v: &[Var]| t.cross_entropy(v[0], v[1]).unwrap())),
        (
            "cross_entropy_weighted",
            vec![logits.clone(), target],
            vec![true, false],
            Box::new(move |t: &mut Tape<f64>, v: &[Var]| t.cross_entropy_weighted(v[0], v[1], &wts).unwrap()),
        ),
        (
            "kl_divergence",
            vec![logits.clone(), logits2.clone()],
            vec![true; 2],
            Box::new(|t: &mut Tape<f64>, v: &[Var]| {
                let (p, q) = (t.softmax(v[0]).unwrap(), t.softmax(v[1]).unwrap());
                t.kl_divergence(p, q).unwrap()
            }),
        ),
        (
            "kl_divergence_weighted",
            vec![logits, logits2],
            vec![true; 2],
            Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
                let (p, q) = (t.softmax(v[0]).unwrap(), t.softmax(v[1]).unwrap());
                t.kl_divergence_weighted(p, q, &wts2).unwrap()
            }),
        ),
        ("l2_prob_distance", vec![p, q], vec![true; 2], Box::new(|t: &mut Tape<f64>, v: &[Var]| t.l2_prob_distance(v[0], v[1]).unwrap())),
    ]
}

/// Worst error per op over `instances` random instances.
pub fn op_suite(instances: usize) -> Vec<(&'static str, f64)> {
    let mut worst: Vec<(&'static str, f64)> = Vec::new();
    for s in 0..instances as u64 {
        for (k, (name, inputs, diff, build)) in op_instances(1000 + s).into_iter().enumerate() {
            let err = check_op(&inputs, &diff, s, build);
            match worst.get_mut(k) {
                Some(entry) => entry.1 = entry.1.max(err),
                None => worst.push((name, err)),
            }
        }
    }
    worst
}

/// Worst student-gradient error of `method` over `instances` random toy batches,
/// with kink counts summed over all of them.
pub fn method_suite(method: Method, instances: usize) -> MethodCheck {
    let mut worst = MethodCheck::default();
    for s in 0..instances as u64 {
        let residual = s % 2 == 1;
        let cfg = toy::encoder(residual);
        let student = toy::params(&cfg, 50 + s, 4.0);
        let teacher = toy::params(&cfg, 90 + s, 4.0);
        let batch = toy::Batch::new(3, 4, 300 + s);
        let mut inputs = batch.inputs(&student, method, s);
        inputs.teacher = Some(&teacher);
        inputs.config.p_cutoff = 0.6;
        inputs.running = Some(RunningClassDistribution { running: vec![0.2, 0.5, 0.3], prior: vec![1.0 / 3.0; 3], decay: 0.999 });
        let c = check_method(&inputs);
        worst.error = worst.error.max(c.error);
        worst.kinks += c.kinks;
        worst.coordinates += c.coordinates;
    }
    worst
}
