//! Brute-force recomputation of every objective with plain loops over `f64`.
//!
//! Only the documented random decisions are shared with the library: the
//! seed of each augmentation draw, the VAT starting direction and the MixMatch
//! shuffle. Forward passes, losses, sharpening, masks and mixing are redone here.

use sslab::augment::AugmentPolicy;
use sslab::data::Standardizer;
use sslab::model::ModelParams;
use sslab::rng::{derive_seed, stream};
use sslab::ssl::{vat_direction, Divergence, MixMatchPlan, Method, StepInputs};
use sslab::tensor::Tensor;

pub struct Net {
    residual: bool,
    blocks: Vec<Block>,
    head_w: Vec<f64>,
    head_b: Vec<f64>,
    hidden: usize,
    classes: usize,
    size: usize,
    channels: usize,
}

struct Conv {
    w: Vec<f64>,
    b: Vec<f64>,
    cin: usize,
    cout: usize,
}

struct Block {
    conv: Conv,
    res: Option<Conv>,
}

fn data(p: &ModelParams<f64>, name: &str) -> Vec<f64> {
    p.get(name).unwrap_or_else(|| panic!("missing {name}")).data().to_vec()
}

impl Net {
    pub fn new(p: &ModelParams<f64>) -> Self {
        let cfg = p.config();
        let mut prev = cfg.input_channels;
        let mut blocks = Vec::new();
        for (i, &w) in cfg.channel_widths.iter().enumerate() {
            let conv = Conv { w: data(p, &format!("block{i}.conv.weight")), b: data(p, &format!("block{i}.conv.bias")), cin: prev, cout: w };
            let res = cfg
                .use_residual
                .then(|| Conv { w: data(p, &format!("block{i}.res.weight")), b: data(p, &format!("block{i}.res.bias")), cin: w, cout: w });
            blocks.push(Block { conv, res });
            prev = w;
        }
        Self {
            residual: cfg.use_residual,
            blocks,
            head_w: data(p, "head.weight"),
            head_b: data(p, "head.bias"),
            hidden: prev,
            classes: cfg.num_classes,
            size: cfg.input_size,
            channels: cfg.input_channels,
        }
    }

    fn conv3(&self, x: &[f64], n: usize, c: &Conv) -> Vec<f64> {
        let mut out = vec![0.0; c.cout * n * n];
        for f in 0..c.cout {
            for y in 0..n {
                for xx in 0..n {
                    let mut s = c.b[f];
                    for ch in 0..c.cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (iy, ix) = (y as i64 + ky as i64 - 1, xx as i64 + kx as i64 - 1);
                                if iy < 0 || ix < 0 || iy >= n as i64 || ix >= n as i64 {
                                    continue;
                                }
                                s += c.w[((f * c.cin + ch) * 3 + ky) * 3 + kx] * x[(ch * n + iy as usize) * n + ix as usize];
                            }
                        }
                    }
                    out[(f * n + y) * n + xx] = s;
                }
            }
        }
        out
    }

    /// Logits of one standardized `[C, H, W]` image.
    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.channels * self.size * self.size);
        let mut h = x.to_vec();
        let mut n = self.size;
        let mut ch = self.channels;
        for block in &self.blocks {
            h = self.conv3(&h, n, &block.conv).into_iter().map(|v| v.max(0.0)).collect();
            ch = block.conv.cout;
            if self.residual {
                let r = self.conv3(&h, n, block.res.as_ref().unwrap());
                h = r.iter().zip(&h).map(|(a, b)| (a + b).max(0.0)).collect();
            }
            if n >= 2 {
                let m = n / 2;
                let mut pooled = vec![0.0; ch * m * m];
                for c in 0..ch {
                    for y in 0..m {
                        for xx in 0..m {
                            let at = |dy: usize, dx: usize| h[(c * n + 2 * y + dy) * n + 2 * xx + dx];
                            pooled[(c * m + y) * m + xx] = (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) / 4.0;
                        }
                    }
                }
                h = pooled;
                n = m;
            }
        }
        let gap: Vec<f64> = (0..ch).map(|c| h[c * n * n..(c + 1) * n * n].iter().sum::<f64>() / (n * n) as f64).collect();
        (0..self.classes)
            .map(|j| self.head_b[j] + (0..self.hidden).map(|i| gap[i] * self.head_w[i * self.classes + j]).sum::<f64>())
            .collect()
    }

    pub fn probs(&self, x: &[f64]) -> Vec<f64> {
        softmax(&self.logits(x))
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `H(target, softmax(logits))`.
pub fn ce(target: &[f64], logits: &[f64]) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    target.iter().zip(logits).map(|(t, l)| -t * (l - lse)).sum()
}

pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).filter(|(a, _)| **a > 0.0).map(|(a, b)| a * (a / b.max(1e-12)).ln()).sum()
}

pub fn sq_dist(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| (a - b).powi(2)).sum()
}

pub fn sharpen(p: &[f64], t: f64) -> Vec<f64> {
    let w: Vec<f64> = p.iter().map(|v| v.powf(1.0 / t)).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

pub fn one_hot(label: usize, classes: usize) -> Vec<f64> {
    (0..classes).map(|c| if c == label { 1.0 } else { 0.0 }).collect()
}

pub fn argmax(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b })
}

fn standardize(img: &Tensor<f32>, st: &Standardizer) -> Vec<f64> {
    img.data().iter().map(|&v| (v as f64 - st.mean as f64) / st.std as f64).collect()
}

#[derive(Clone, Debug)]
pub struct Expected {
    pub supervised: f64,
    pub unsupervised: f64,
    pub total: f64,
    pub mask_rate: f64,
    /// Per-row confidence mask of the thresholded methods.
    pub mask: Option<Vec<bool>>,
}

struct Ctx<'a, 'b> {
    inp: &'b StepInputs<'a, f64>,
    net: Net,
    classes: usize,
}

impl Ctx<'_, '_> {
    fn view(&self, policy: &AugmentPolicy, img: &Tensor<f32>, seed: u64) -> Vec<f64> {
        standardize(&policy.apply(img, seed), &self.inp.standardizer)
    }

    fn clean(&self, j: usize) -> Vec<f64> {
        standardize(self.inp.unlabeled.images[j], &self.inp.standardizer)
    }

    fn weak_u(&self, j: usize, s: u64) -> Vec<f64> {
        self.view(&self.inp.augment.weak, self.inp.unlabeled.images[j], derive_seed(self.inp.seed, s, j as u64))
    }

    fn strong_u(&self, j: usize) -> Vec<f64> {
        self.view(&self.inp.augment.strong, self.inp.unlabeled.images[j], derive_seed(self.inp.seed, stream::UNLABELED_STRONG, j as u64))
    }

    fn labeled_views(&self) -> Vec<Vec<f64>> {
        (0..self.inp.labeled.images.len())
            .map(|i| self.view(&self.inp.augment.weak, self.inp.labeled.images[i], derive_seed(self.inp.seed, stream::LABELED_WEAK, i as u64)))
            .collect()
    }

    fn supervised(&self) -> f64 {
        let views = self.labeled_views();
        let b = views.len() as f64;
        views.iter().zip(&self.inp.labeled.labels).map(|(x, &y)| ce(&one_hot(y, self.classes), &self.net.logits(x))).sum::<f64>() / b
    }

    fn bu(&self) -> usize {
        self.inp.unlabeled.images.len()
    }

    /// `R(target, pred)` averaged over rows.
    fn divergence(&self, kind: Divergence, targets: &[Vec<f64>], preds: &[Vec<f64>], mask: &[bool]) -> f64 {
        let n = targets.len() as f64;
        let mut acc = 0.0;
        for ((t, p), &m) in targets.iter().zip(preds).zip(mask) {
            if m {
                acc += match kind {
                    Divergence::Kl => kl(t, p),
                    Divergence::MseProbs => sq_dist(t, p) / self.classes as f64,
                };
            }
        }
        acc / n
    }
}

fn rate(mask: &[bool], rows: &mut Option<Vec<bool>>) -> f64 {
    *rows = Some(mask.to_vec());
    mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64
}

/// The loss `inputs` describes, recomputed from scratch.
pub fn expected(inp: &StepInputs<'_, f64>) -> Expected {
    let ctx = Ctx { inp, net: Net::new(inp.student), classes: inp.student.config().num_classes };
    let cfg = &inp.config;
    let c = ctx.classes;
    let all = vec![true; ctx.bu()];
    let mut rows = None;
    let (supervised, unsupervised, mask_rate) = match cfg.method {
        Method::SupervisedOnly => (ctx.supervised(), 0.0, 0.0),
        Method::PiModel => {
            let p1: Vec<_> = (0..ctx.bu()).map(|j| ctx.net.probs(&ctx.weak_u(j, stream::UNLABELED_WEAK))).collect();
            let p2: Vec<_> = (0..ctx.bu()).map(|j| ctx.net.probs(&ctx.weak_u(j, stream::UNLABELED_WEAK_2))).collect();
            (ctx.supervised(), ctx.divergence(cfg.divergence, &p2, &p1, &all), 1.0)
        }
        Method::MeanTeacher => {
            let teacher = Net::new(inp.teacher.expect("teacher"));
            let ps: Vec<_> = (0..ctx.bu()).map(|j| ctx.net.probs(&ctx.weak_u(j, stream::UNLABELED_WEAK))).collect();
            let pt: Vec<_> = (0..ctx.bu()).map(|j| teacher.probs(&ctx.weak_u(j, stream::UNLABELED_WEAK_2))).collect();
            (ctx.supervised(), ctx.divergence(cfg.divergence, &pt, &ps, &all), 1.0)
        }
        Method::Vat => {
            let per = inp.unlabeled.images[0].numel();
            let mut shape = vec![ctx.bu()];
            shape.extend_from_slice(inp.unlabeled.images[0].shape());
            let d0 = vat_direction::<f64>(&shape, derive_seed(inp.seed, stream::VAT_DIRECTION, 0));
            let mut qs = Vec::new();
            let mut ps = Vec::new();
            for j in 0..ctx.bu() {
                let x = ctx.clean(j);
                let p = ctx.net.probs(&x);
                let d = &d0.data()[j * per..(j + 1) * per];
                let base: Vec<f64> = x.iter().zip(d).map(|(a, b)| a + cfg.vat_xi * b).collect();
                // Gradient of KL(p ‖ f(x + ξd)) w.r.t. d by central differences.
                let h = 1e-5;
                let g: Vec<f64> = (0..per)
                    .map(|i| {
                        let mut up = base.clone();
                        let mut dn = base.clone();
                        up[i] += h * cfg.vat_xi;
                        dn[i] -= h * cfg.vat_xi;
                        (kl(&p, &ctx.net.probs(&up)) - kl(&p, &ctx.net.probs(&dn))) / (2.0 * h)
                    })
                    .collect();
                let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
                let r: Vec<f64> = if norm > 0.0 { g.iter().map(|v| cfg.vat_epsilon * v / norm).collect() } else { d.iter().map(|v| cfg.vat_epsilon * v).collect() };
                let shifted: Vec<f64> = x.iter().zip(&r).map(|(a, b)| a + b).collect();
                qs.push(ctx.net.probs(&shifted));
                ps.push(p);
            }
            (ctx.supervised(), ctx.divergence(cfg.divergence, &ps, &qs, &all), 1.0)
        }
        Method::Uda => {
            let targets: Vec<_> = (0..ctx.bu()).map(|j| sharpen(&ctx.net.probs(&ctx.clean(j)), cfg.temperature)).collect();
            let mask: Vec<bool> = targets.iter().map(|t| t.iter().cloned().fold(0.0, f64::max) >= cfg.p_cutoff).collect();
            let preds: Vec<_> = (0..ctx.bu()).map(|j| ctx.net.probs(&ctx.strong_u(j))).collect();
            (ctx.supervised(), ctx.divergence(cfg.divergence, &targets, &preds, &mask), rate(&mask, &mut rows))
        }
        Method::PseudoLabel => {
            let mut acc = 0.0;
            let mut mask = Vec::new();
            for j in 0..ctx.bu() {
                let z = ctx.net.logits(&ctx.clean(j));
                let p = softmax(&z);
                let keep = p.iter().cloned().fold(0.0, f64::max) >= cfg.p_cutoff;
                if keep {
                    acc += ce(&one_hot(argmax(&p), c), &z);
                }
                mask.push(keep);
            }
            (ctx.supervised(), acc / ctx.bu() as f64, rate(&mask, &mut rows))
        }
        Method::FixMatch => {
            let mut acc = 0.0;
            let mut mask = Vec::new();
            for j in 0..ctx.bu() {
                let p = ctx.net.probs(&ctx.weak_u(j, stream::UNLABELED_WEAK));
                let keep = p.iter().cloned().fold(0.0, f64::max) >= cfg.p_cutoff;
                if keep {
                    acc += ce(&one_hot(argmax(&p), c), &ctx.net.logits(&ctx.strong_u(j)));
                }
                mask.push(keep);
            }
            (ctx.supervised(), acc / ctx.bu() as f64, rate(&mask, &mut rows))
        }
        Method::ReMixMatch => {
            let dist = inp.running.clone().unwrap_or_else(|| sslab::ssl::RunningClassDistribution::uniform(c));
            let mut acc = 0.0;
            let mut n = 0.0;
            for j in 0..ctx.bu() {
                let p = ctx.net.probs(&ctx.weak_u(j, stream::UNLABELED_WEAK));
                let aligned: Vec<f64> = (0..c).map(|k| p[k] * dist.prior[k] / dist.running[k].max(1e-6)).collect();
                let z: f64 = aligned.iter().sum();
                let anchor = sharpen(&aligned.iter().map(|v| v / z).collect::<Vec<_>>(), cfg.temperature);
                for t in 0..cfg.n_strong {
                    let seed = derive_seed(derive_seed(inp.seed, stream::UNLABELED_STRONG, j as u64), stream::AUGMENT_INSTANCE, t as u64);
                    let s = ctx.view(&inp.augment.strong, inp.unlabeled.images[j], seed);
                    acc += ce(&anchor, &ctx.net.logits(&s));
                    n += 1.0;
                }
            }
            (ctx.supervised(), acc / n, 1.0)
        }
        Method::MixMatch => {
            let k = cfg.k;
            let xl = ctx.labeled_views();
            let yl: Vec<Vec<f64>> = inp.labeled.labels.iter().map(|&y| one_hot(y, c)).collect();
            let mut xu = Vec::new();
            let mut yu = Vec::new();
            for j in 0..ctx.bu() {
                let base = derive_seed(inp.seed, stream::UNLABELED_WEAK, j as u64);
                let views: Vec<Vec<f64>> = (0..k)
                    .map(|i| ctx.view(&inp.augment.weak, inp.unlabeled.images[j], derive_seed(base, stream::AUGMENT_INSTANCE, i as u64)))
                    .collect();
                let mut mean = vec![0.0; c];
                for v in &views {
                    for (m, p) in mean.iter_mut().zip(ctx.net.probs(v)) {
                        *m += p / k as f64;
                    }
                }
                let guess = sharpen(&mean, cfg.temperature);
                for v in views {
                    xu.push(v);
                    yu.push(guess.clone());
                }
            }
            let pool_x: Vec<&Vec<f64>> = xl.iter().chain(&xu).collect();
            let pool_y: Vec<&Vec<f64>> = yl.iter().chain(&yu).collect();
            let plan = MixMatchPlan::sample(inp.seed, pool_x.len(), &inp.mix, cfg.mixup_concentration).unwrap();
            let mix = |i: usize| {
                let a = plan.alphas[i].max(1.0 - plan.alphas[i]);
                let w = plan.permutation[i];
                let x: Vec<f64> = pool_x[i].iter().zip(pool_x[w]).map(|(p, q)| a * p + (1.0 - a) * q).collect();
                let y: Vec<f64> = pool_y[i].iter().zip(pool_y[w]).map(|(p, q)| a * p + (1.0 - a) * q).collect();
                (x, y)
            };
            let b = xl.len();
            let sup = (0..b).map(|i| {
                let (x, y) = mix(i);
                ce(&y, &ctx.net.logits(&x))
            });
            let sup = sup.sum::<f64>() / b as f64;
            let nu = pool_x.len() - b;
            let unsup = (b..pool_x.len())
                .map(|i| {
                    let (x, y) = mix(i);
                    sq_dist(&ctx.net.probs(&x), &y)
                })
                .sum::<f64>()
                / (nu * c) as f64;
            (sup, unsup, 1.0)
        }
    };
    Expected { supervised, unsupervised, total: supervised + inp.lambda * unsupervised, mask_rate, mask: rows }
}

use super::toy;
use sslab::ssl::{compute_loss, LossBreakdown, MixCoefficient, RunningClassDistribution};

/// Head scale that leaves the toy batch with a mix of confident and unsure rows.
pub const CONFIDENT_HEAD: f64 = 12.0;

/// Library breakdown and brute-force expectation for one toy batch
/// (4 labeled, 8 unlabeled) with injected mixing coefficients.
/// Cutoff at which the toy batches have some confident and some unconfident rows.
pub const TOY_CUTOFF: f64 = 0.7;

pub fn toy_comparison(method: Method, seed: u64, residual: bool) -> (LossBreakdown, Expected) {
    let cfg = toy::encoder(residual);
    let student = toy::params(&cfg, seed, CONFIDENT_HEAD);
    let teacher = toy::params(&cfg, seed + 1, CONFIDENT_HEAD);
    let batch = toy::Batch::new(4, 8, seed);
    let mut inputs = batch.inputs(&student, method, seed);
    inputs.teacher = Some(&teacher);
    inputs.config.p_cutoff = TOY_CUTOFF;
    inputs.mix = MixCoefficient::Fixed((0..4 + 8 * inputs.config.k).map(|i| 0.15 + 0.05 * (i % 16) as f64).collect());
    inputs.running = Some(RunningClassDistribution { running: vec![0.5, 0.3, 0.2], prior: vec![0.25, 0.25, 0.5], decay: 0.999 });
    let got = compute_loss(&inputs).unwrap().breakdown;
    (got, expected(&inputs))
}

/// Largest absolute deviation between library and oracle over the four reported values.
pub fn deviation(got: &LossBreakdown, want: &Expected) -> f64 {
    [
        (got.supervised_loss - want.supervised).abs(),
        (got.unsupervised_loss - want.unsupervised).abs(),
        (got.total - want.total).abs(),
        (got.mask_rate - want.mask_rate).abs(),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}
