//! Acceptance criteria as reusable checks. Each returns a one-line summary on
//! success and the first violation on failure.

use std::collections::HashSet;
use std::time::{Duration, Instant};

use rand::Rng;
use sslab::augment::mixup_with_coefficient;
use sslab::data::{
    generate_synthetic, generate_synthetic_with, make_full_splits, make_splits, parse_fer_csv, unit_to_pixel, DatasetSplits,
    SyntheticConfig, Usage, UsageMapping, FER_PIXELS,
};
use sslab::model::{ema_update, EmaParams, EncoderConfig, ModelParams};
use sslab::rng::rng_from;
use sslab::ssl::{
    compute_loss, distribution_align, sharpen, vat_perturbation, argmax, AugmentSet, LabeledBatch, Method, MethodConfig,
    MixCoefficient, RunningClassDistribution, StepInputs, UnlabeledBatch,
};
use sslab::trainer::{cosine_lr, train_with, TrainConfig, TrainSetup};

use super::gradcheck::{method_suite, op_suite, INSTANCES, MAX_KINK_FRACTION, TOLERANCE};
use super::oracle::{deviation, expected, toy_comparison, CONFIDENT_HEAD};
use super::toy;

pub type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond { Ok(()) } else { Err(msg()) }
}

fn all_methods() -> impl Iterator<Item = Method> {
    std::iter::once(Method::SupervisedOnly).chain(Method::SSL)
}

pub const GRADIENT_BUDGET: Duration = Duration::from_secs(60);

pub fn gradients() -> Outcome {
    let start = Instant::now();
    let mut worst_op = ("none", 0.0);
    for (name, err) in op_suite(INSTANCES) {
        ensure(err < TOLERANCE, || format!("op {name}: relative error {err:e}"))?;
        if err > worst_op.1 {
            worst_op = (name, err);
        }
    }
    let mut worst_method = (Method::SupervisedOnly, 0.0);
    let mut kinks = (0, 0);
    for m in all_methods() {
        let c = method_suite(m, INSTANCES);
        ensure(c.error < TOLERANCE, || format!("{m}: relative error {:e}", c.error))?;
        ensure(c.kink_fraction() <= MAX_KINK_FRACTION, || format!("{m}: {} of {} coordinates at a kink", c.kinks, c.coordinates))?;
        if c.error > worst_method.1 {
            worst_method = (m, c.error);
        }
        kinks = (kinks.0 + c.kinks, kinks.1 + c.coordinates);
    }
    let took = start.elapsed();
    ensure(took < GRADIENT_BUDGET, || format!("took {took:?}"))?;
    Ok(format!(
        "{INSTANCES} instances; worst op {} {:.1e}, worst method {} {:.1e}; {}/{} kink coordinates skipped; {:.1}s",
        worst_op.0,
        worst_op.1,
        worst_method.0,
        worst_method.1,
        kinks.0,
        kinks.1,
        took.as_secs_f64()
    ))
}

pub const ORACLE_TOLERANCE: f64 = 1e-5;

pub fn oracle_equivalence() -> Outcome {
    let mut worst: f64 = 0.0;
    for m in all_methods() {
        for (seed, residual) in [(3, false), (4, true)] {
            let (got, want) = toy_comparison(m, seed, residual);
            let dev = deviation(&got, &want);
            ensure(dev < ORACLE_TOLERANCE, || format!("{m} seed {seed}: {got:?} vs {want:?}"))?;
            worst = worst.max(dev);
        }
    }
    for m in [Method::FixMatch, Method::PseudoLabel, Method::Uda] {
        let (got, _) = toy_comparison(m, 3, false);
        ensure(got.mask_rate > 0.0 && got.mask_rate < 1.0, || format!("{m}: toy batch mask rate {} is not mixed", got.mask_rate))?;
    }
    Ok(format!("9 objectives x 2 toy batches, worst deviation {worst:.1e}"))
}

fn f32_inputs<'a>(student: &'a ModelParams<f32>, batch: &'a toy::Batch, method: Method, seed: u64) -> StepInputs<'a, f32> {
    let labeled = LabeledBatch { images: batch.labeled.iter().collect(), labels: batch.labels.clone() };
    let unlabeled = UnlabeledBatch { images: batch.unlabeled.iter().collect() };
    let mut inputs = StepInputs::new(student, labeled, unlabeled, MethodConfig::defaults(method), seed);
    inputs.standardizer = sslab::data::Standardizer { mean: 0.45, std: 0.3 };
    inputs
}

fn same_bits(a: &ModelParams<f32>, b: &ModelParams<f32>) -> bool {
    a.tensors().iter().zip(b.tensors()).all(|(x, y)| bits(x.tensor.data()) == bits(y.tensor.data()))
}

fn bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

pub fn identities() -> Outcome {
    let cfg = toy::encoder(true);
    let student = toy::params(&cfg, 1, 1.0).cast::<f32>();
    let other = toy::params(&cfg, 2, 1.0).cast::<f32>();
    let teacher = EmaParams { params: other.clone(), m: 0.5 };
    ensure(same_bits(&ema_update(&teacher, &student, 0.0).map_err(|e| e.to_string())?.params, &student), || "EMA m=0 is not the student".into())?;
    ensure(same_bits(&ema_update(&teacher, &student, 1.0).map_err(|e| e.to_string())?.params, &other), || "EMA m=1 moved the teacher".into())?;

    let mut rng = rng_from(0x1DE7);
    let xl = toy::images(1, 11)[0].clone();
    let xu = toy::images(1, 12)[0].clone();
    let (yl, yu) = (vec![1.0f32, 0.0, 0.0], vec![0.2f32, 0.3, 0.5]);
    for alpha in [1.0, 0.0] {
        let (x, y) = mixup_with_coefficient(&xl, &yl, &xu, &yu, alpha).map_err(|e| e.to_string())?;
        ensure(bits(x.data()) == bits(xl.data()) && bits(&y) == bits(&yl), || format!("mixup at alpha={alpha} is not the first input"))?;
    }

    let mut sharpen_dev: f64 = 0.0;
    for _ in 0..1000 {
        let c = rng.random_range(2..10);
        let raw: Vec<f64> = (0..c).map(|_| rng.random_range(0.001..1.0)).collect();
        let z: f64 = raw.iter().sum();
        let p: Vec<f64> = raw.iter().map(|v| v / z).collect();
        let same = sharpen(&p, 1.0).map_err(|e| e.to_string())?;
        sharpen_dev = same.iter().zip(&p).map(|(a, b)| (a - b).abs()).fold(sharpen_dev, f64::max);
        let t = rng.random_range(0.05..5.0);
        let hot = sharpen(&p, t).map_err(|e| e.to_string())?;
        ensure(argmax(&hot) == argmax(&p), || format!("sharpen at T={t} moved the argmax of {p:?}"))?;
        let prior: Vec<f64> = {
            let r: Vec<f64> = (0..c).map(|_| rng.random_range(0.01..1.0)).collect();
            let s: f64 = r.iter().sum();
            r.iter().map(|v| v / s).collect()
        };
        let dist = RunningClassDistribution { running: prior.clone(), prior, decay: 0.999 };
        let aligned = distribution_align(&p, &dist).map_err(|e| e.to_string())?;
        let dev = aligned.iter().zip(&p).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        ensure(dev < 1e-12, || format!("distribution_align with running == prior moved {p:?} by {dev:e}"))?;
    }
    ensure(sharpen_dev < 1e-12, || format!("sharpen T=1 deviates by {sharpen_dev:e}"))?;

    let mut vat_dev: f64 = 0.0;
    let batch = toy::Batch::new(4, 6, 21);
    let std = sslab::data::Standardizer { mean: 0.45, std: 0.3 };
    let refs: Vec<_> = batch.unlabeled.iter().collect();
    let x = std.batch::<f32>(&refs).map_err(|e| e.to_string())?;
    for eps in [0.5, 1.0, 2.0, 6.0] {
        let r = vat_perturbation(&student, &x, eps, 0.1, 77).map_err(|e| e.to_string())?;
        let per = r.numel() / r.shape()[0];
        for row in r.data().chunks(per) {
            let n = row.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            vat_dev = vat_dev.max((n - eps).abs());
        }
    }
    ensure(vat_dev <= 1e-5, || format!("VAT perturbation norm off by {vat_dev:e}"))?;

    let teacher32 = other;
    for seed in [5u64, 6] {
        let reference = {
            let inputs = f32_inputs(&student, &batch, Method::SupervisedOnly, seed);
            compute_loss(&inputs).and_then(|l| l.backward()).map_err(|e| e.to_string())?.student
        };
        for m in Method::SSL {
            let mut inputs = f32_inputs(&student, &batch, m, seed);
            inputs.lambda = 0.0;
            inputs.teacher = Some(&teacher32);
            inputs.mix = MixCoefficient::Fixed(vec![1.0; 4 + 6 * inputs.config.k]);
            let grads = compute_loss(&inputs).and_then(|l| l.backward()).map_err(|e| e.to_string())?.student;
            let equal = grads.iter().zip(&reference).all(|(a, b)| bits(a.data()) == bits(b.data()));
            ensure(equal, || format!("{m}: lambda=0 gradients differ from supervised-only"))?;
        }
    }
    Ok(format!(
        "EMA and mixup endpoints exact; sharpen T=1 dev {sharpen_dev:.1e} over 1000; VAT norm dev {vat_dev:.1e}; lambda=0 gradients bitwise equal for 8 methods"
    ))
}

/// Small encoder for trainer-level checks on 16px synthetic data.
pub fn small_setup(classes: usize, size: usize, widths: Vec<usize>) -> TrainSetup {
    let encoder = EncoderConfig { input_channels: 1, input_size: size, channel_widths: widths, use_residual: false, num_classes: classes };
    TrainSetup { encoder, augment: AugmentSet::standard(size) }
}

fn check_cycles(stream: &[u64], pool: usize, what: &str) -> Result<(), String> {
    for (i, cycle) in stream.chunks(pool).enumerate() {
        let distinct: HashSet<_> = cycle.iter().collect();
        ensure(distinct.len() == cycle.len(), || format!("{what} cycle {i} repeats an example"))?;
    }
    Ok(())
}

pub fn protocol() -> Outcome {
    let tc_default = TrainConfig::default();
    ensure(tc_default.unlabeled_ratio == 7, || "default unlabeled ratio is not 7".into())?;
    ensure(cosine_lr(0, tc_default.total_iterations, tc_default.lr0).ok() == Some(0.03), || "lr(0) is not 0.03".into())?;

    let ds = generate_synthetic(60, 4, 16, 3).map_err(|e| e.to_string())?;
    let data = make_splits(&ds, 10, 0.15, 3).map_err(|e| e.to_string())?;
    let tc = TrainConfig { total_iterations: 12, eval_every: 0, ..TrainConfig::default() };
    let (b, ub) = (tc.labeled_batch, tc.unlabeled_batch());
    let mut lab = Vec::new();
    let mut unl = Vec::new();
    let mut counts = Vec::new();
    let (_, history) = train_with(&tc, &MethodConfig::defaults(Method::FixMatch), &data, &small_setup(4, 16, vec![4, 8]), |ev| {
        counts.push((ev.labeled_ids.len(), ev.unlabeled_ids.len()));
        lab.extend_from_slice(ev.labeled_ids);
        unl.extend_from_slice(ev.unlabeled_ids);
    })
    .map_err(|e| e.to_string())?;
    ensure(counts.len() == tc.total_iterations && counts.iter().all(|&c| c == (b, ub)), || format!("per-iteration batch sizes {counts:?}, expected ({b}, {ub})"))?;
    check_cycles(&lab, data.labeled.len(), "labeled")?;
    check_cycles(&unl, data.unlabeled.len(), "unlabeled")?;
    ensure(history.records[0].lr == 0.03, || format!("first recorded lr {}", history.records[0].lr))?;
    for r in &history.records {
        let want = cosine_lr(r.iteration, tc.total_iterations, tc.lr0).map_err(|e| e.to_string())?;
        ensure(r.lr == want, || format!("lr at {} is {}, schedule says {want}", r.iteration, r.lr))?;
    }

    let mut recounted = 0;
    for m in [Method::FixMatch, Method::PseudoLabel, Method::Uda] {
        ensure(MethodConfig::defaults(m).p_cutoff == 0.95, || format!("{m} default cutoff is not 0.95"))?;
        let mut mixed = false;
        for seed in 0..40u64 {
            let cfg = toy::encoder(seed % 2 == 1);
            let student = toy::params(&cfg, 500 + seed, CONFIDENT_HEAD);
            let batch = toy::Batch::new(2, 16, 900 + seed);
            let inputs = batch.inputs(&student, m, seed);
            let got = compute_loss(&inputs).map_err(|e| e.to_string())?.mask.ok_or_else(|| format!("{m} reports no mask"))?;
            let want = expected(&inputs).mask.ok_or_else(|| format!("oracle has no {m} mask"))?;
            ensure(got == want, || format!("{m} seed {seed}: mask {got:?}, recount {want:?}"))?;
            recounted += got.len();
            mixed |= got.iter().any(|&k| k) && got.iter().any(|&k| !k);
        }
        ensure(mixed, || format!("{m}: no toy batch straddles the 0.95 cutoff"))?;
    }

    let ds7 = generate_synthetic(290, 7, 8, 4).map_err(|e| e.to_string())?;
    let mut sizes = Vec::new();
    for n in [10, 25, 100, 250] {
        let s = make_splits(&ds7, n, 0.1, 4).map_err(|e| e.to_string())?;
        s.check_disjoint().map_err(|e| e.to_string())?;
        ensure(s.labeled_histogram().iter().all(|&h| h == n), || format!("n={n}: labeled histogram {:?}", s.labeled_histogram()))?;
        ensure(s.labeled.len() + s.unlabeled.len() + s.validation.len() == ds7.len(), || format!("n={n}: splits do not cover the dataset"))?;
        sizes.push(s.labeled.len());
    }
    ensure(sizes == [70, 175, 700, 1750], || format!("labeled split sizes {sizes:?}"))?;
    Ok(format!("batches ({b}, {ub}) x {} iterations, lr(0)=0.03, {recounted} masked rows recounted, split sizes {sizes:?}", tc.total_iterations))
}

/// Configuration of the directional learning experiment.
pub struct LearningSetup {
    pub seeds: Vec<u64>,
    pub iterations: usize,
    pub labeled_batch: usize,
}

impl Default for LearningSetup {
    fn default() -> Self {
        Self { seeds: vec![0, 1, 2], iterations: 4096, labeled_batch: 16 }
    }
}

pub const LEARNING_MARGIN: f64 = 0.05;
pub const LEARNING_BUDGET: Duration = Duration::from_secs(15 * 60);

/// 4 classes of 600 at 16px, 15% held out: 2040 training images, 40 labeled, 2000 unlabeled.
pub fn learning_splits(seed: u64, full: bool) -> Result<DatasetSplits, String> {
    let ds = generate_synthetic_with(&SyntheticConfig::new(600, 4, 16, 1000 + seed)).map_err(|e| e.to_string())?;
    if full { make_full_splits(&ds, 0.15, seed) } else { make_splits(&ds, 10, 0.15, seed) }.map_err(|e| e.to_string())
}

pub fn learning(setup: &LearningSetup) -> Outcome {
    let start = Instant::now();
    let enc = small_setup(4, 16, vec![8, 16, 32]);
    let run = |method: Method, seed: u64, full: bool| -> Result<f64, String> {
        let data = learning_splits(seed, full)?;
        if !full {
            ensure(data.unlabeled.len() == 2000 && data.labeled.len() == 40, || format!("splits {}+{}", data.labeled.len(), data.unlabeled.len()))?;
        }
        let tc = TrainConfig { total_iterations: setup.iterations, labeled_batch: setup.labeled_batch, eval_every: 0, seed, ..TrainConfig::default() };
        let (model, _) = train_with(&tc, &MethodConfig::defaults(method), &data, &enc, |_| {}).map_err(|e| e.to_string())?;
        Ok(model.evaluation.ok_or("no evaluation")?.accuracy)
    };
    let mut acc = [Vec::new(), Vec::new(), Vec::new()];
    for &seed in &setup.seeds {
        acc[0].push(run(Method::SupervisedOnly, seed, false)?);
        acc[1].push(run(Method::FixMatch, seed, false)?);
        acc[2].push(run(Method::SupervisedOnly, seed, true)?);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (sup, fix, full) = (mean(&acc[0]), mean(&acc[1]), mean(&acc[2]));
    let took = start.elapsed();
    let summary = format!(
        "mean accuracy supervised-10 {:.1}%, fixmatch-10 {:.1}%, supervised-all {:.1}% ({:.0}s; per seed {:?} / {:?} / {:?})",
        100.0 * sup,
        100.0 * fix,
        100.0 * full,
        took.as_secs_f64(),
        acc[0],
        acc[1],
        acc[2]
    );
    ensure(fix >= sup + LEARNING_MARGIN, || format!("fixmatch margin too small: {summary}"))?;
    ensure(full > fix && full > sup, || format!("supervised-all not best: {summary}"))?;
    ensure(took < LEARNING_BUDGET, || format!("over budget: {summary}"))?;
    Ok(summary)
}

/// Short runs of several methods, each trained twice.
pub fn determinism() -> Outcome {
    let ds = generate_synthetic(40, 3, 16, 8).map_err(|e| e.to_string())?;
    let data = make_splits(&ds, 5, 0.2, 8).map_err(|e| e.to_string())?;
    let setup = small_setup(3, 16, vec![4, 8]);
    let tc = TrainConfig { total_iterations: 8, labeled_batch: 4, eval_every: 4, seed: 17, ..TrainConfig::default() };
    for m in all_methods() {
        let once = || train_with(&tc, &MethodConfig::defaults(m), &data, &setup, |_| {}).map_err(|e| e.to_string());
        let (a, ha) = once()?;
        let (b, hb) = once()?;
        ensure(ha.to_text() == hb.to_text(), || format!("{m}: histories differ"))?;
        ensure(same_bits(&a.student, &b.student) && same_bits(&a.ema.params, &b.ema.params), || format!("{m}: parameters differ"))?;
        ensure(ha.records.len() == tc.total_iterations, || format!("{m}: {} records", ha.records.len()))?;
    }
    Ok(format!("9 methods x {} iterations repeated: identical histories and parameter bits", tc.total_iterations))
}

pub const FER_FIXTURE: &str = include_str!("../fixtures/fer10.csv");
pub const FER_MALFORMED: &str = include_str!("../fixtures/fer10_malformed.csv");
pub const FER_LABELS: [usize; 10] = [0, 1, 2, 3, 4, 5, 6, 3, 3, 0];

/// Pixel `i` of fixture row `r`.
pub fn fer_pixel(r: usize, i: usize) -> u8 {
    ((r * 31 + i * 7) % 256) as u8
}

fn check_fixture_rows(examples: &[sslab::data::ImageExample]) -> Result<(), String> {
    ensure(examples.len() == 10, || format!("{} examples", examples.len()))?;
    for (r, e) in examples.iter().enumerate() {
        ensure(e.label == Some(FER_LABELS[r]), || format!("row {r}: label {:?}", e.label))?;
        let usage = if r == 7 || r == 8 { Usage::Validation } else { Usage::Train };
        ensure(e.usage == usage, || format!("row {r}: usage {:?}", e.usage))?;
        ensure(e.image.shape() == [1, 48, 48], || format!("row {r}: shape {:?}", e.image.shape()))?;
        let exact = e.image.data().iter().enumerate().all(|(i, &v)| unit_to_pixel(v) == fer_pixel(r, i));
        ensure(exact && e.image.numel() == FER_PIXELS, || format!("row {r}: pixel values differ"))?;
    }
    Ok(())
}

pub fn fer_loader() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("fer10.csv");
    std::fs::write(&path, FER_FIXTURE).map_err(|e| e.to_string())?;
    let load = sslab::data::load_fer_csv(&path, &UsageMapping::default()).map_err(|e| e.to_string())?;
    ensure(load.errors.is_empty() && load.rows == 10, || format!("clean fixture: {} rows, errors {:?}", load.rows, load.errors))?;
    check_fixture_rows(&load.dataset.examples)?;
    let hist = load.dataset.class_histogram();
    ensure(hist == [2, 1, 1, 3, 1, 1, 1], || format!("histogram {hist:?}"))?;

    let bad = parse_fer_csv(FER_MALFORMED, &UsageMapping::default(), "bad").map_err(|e| e.to_string())?;
    check_fixture_rows(&bad.dataset.examples)?;
    let rows: Vec<usize> = bad.errors.iter().map(|e| e.row).collect();
    ensure(rows == [5, 8, 11, 14, 16], || format!("error rows {rows:?}: {:?}", bad.errors))?;
    ensure(bad.rows == bad.dataset.len() + bad.errors.len(), || "rows lost".into())?;
    Ok(format!("10 rows exact (histogram {hist:?}); malformed file: 10 kept, errors at lines {rows:?}"))
}
