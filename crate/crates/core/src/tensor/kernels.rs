//! Forward and backward kernels on flat row-major buffers.

use super::{dim_err, gemm, MatRef, Result, Scalar};

/// Resolved geometry of a 2-d cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], k: &[usize], stride: usize, padding: usize) -> Result<Self> {
        const OP: &str = "conv2d";
        if x.len() != 4 || k.len() != 4 {
            return Err(dim_err(OP, format!("expected 4-d input/kernels, got {x:?} and {k:?}")));
        }
        if stride == 0 {
            return Err(dim_err(OP, "stride must be at least 1"));
        }
        let (batch, channels, height, width) = (x[0], x[1], x[2], x[3]);
        let (filters, kc, kh, kw) = (k[0], k[1], k[2], k[3]);
        if kc != channels {
            return Err(dim_err(OP, format!("kernel channels {kc} != input channels {channels}")));
        }
        if kh > height + 2 * padding || kw > width + 2 * padding {
            return Err(dim_err(
                OP,
                format!("kernel {kh}x{kw} larger than padded input {height}x{width} (padding {padding})"),
            ));
        }
        let out_h = (height + 2 * padding - kh) / stride + 1;
        let out_w = (width + 2 * padding - kw) / stride + 1;
        Ok(Self { batch, channels, height, width, filters, kh, kw, stride, padding, out_h, out_w })
    }

    fn patch(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Input coordinate for output position `o` and kernel offset `k`, if inside.
    #[inline]
    fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

/// Unfolds one image into a `[C·kh·kw, P]` patch matrix.
fn im2col<S: Scalar>(img: &[S], g: &ConvGeom, cols: &mut [S]) {
    let p = g.positions();
    for c in 0..g.channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = g.source(oy, ki, g.height);
                    for ox in 0..g.out_w {
                        dst[oy * g.out_w + ox] = match (iy, g.source(ox, kj, g.width)) {
                            (Some(iy), Some(ix)) => plane[iy * g.width + ix],
                            _ => S::zero(),
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<S: Scalar>(cols: &[S], g: &ConvGeom, img: &mut [S]) {
    let p = g.positions();
    for c in 0..g.channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let Some(iy) = g.source(oy, ki, g.height) else { continue };
                    for ox in 0..g.out_w {
                        if let Some(ix) = g.source(ox, kj, g.width) {
                            plane[iy * g.width + ix] = plane[iy * g.width + ix] + src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<S: Scalar>(x: &[S], k: &[S], g: &ConvGeom) -> Vec<S> {
    let (patch, p) = (g.patch(), g.positions());
    let in_len = g.channels * g.height * g.width;
    let out_len = g.filters * p;
    let mut out = vec![S::zero(); g.batch * out_len];
    let mut cols = vec![S::zero(); patch * p];
    let kmat = MatRef::row_major(k, g.filters, patch);
    for b in 0..g.batch {
        im2col(&x[b * in_len..(b + 1) * in_len], g, &mut cols);
        gemm(kmat, MatRef::row_major(&cols, patch, p), S::zero(), &mut out[b * out_len..(b + 1) * out_len]);
    }
    out
}

/// Returns `(d_input, d_kernels)`, each computed only when requested.
pub(crate) fn conv2d_backward<S: Scalar>(
    x: &[S],
    k: &[S],
    dout: &[S],
    g: &ConvGeom,
    need_dx: bool,
    need_dk: bool,
) -> (Option<Vec<S>>, Option<Vec<S>>) {
    let (patch, p) = (g.patch(), g.positions());
    let in_len = g.channels * g.height * g.width;
    let out_len = g.filters * p;
    let mut dx = need_dx.then(|| vec![S::zero(); g.batch * in_len]);
    let mut dk = need_dk.then(|| vec![S::zero(); g.filters * patch]);
    let mut cols = vec![S::zero(); patch * p];
    let mut dcols = vec![S::zero(); patch * p];
    for b in 0..g.batch {
        let dout_b = MatRef::row_major(&dout[b * out_len..(b + 1) * out_len], g.filters, p);
        if let Some(dk) = dk.as_mut() {
            im2col(&x[b * in_len..(b + 1) * in_len], g, &mut cols);
            gemm(dout_b, MatRef::transposed(&cols, patch, p), S::one(), dk);
        }
        if let Some(dx) = dx.as_mut() {
            gemm(MatRef::transposed(k, g.filters, patch), dout_b, S::zero(), &mut dcols);
            col2im_add(&dcols, g, &mut dx[b * in_len..(b + 1) * in_len]);
        }
    }
    (dx, dk)
}

/// 2×2 average pooling with stride 2; odd trailing rows/columns are dropped.
pub(crate) fn avg_pool2_forward<S: Scalar>(x: &[S], shape: &[usize]) -> (Vec<usize>, Vec<S>) {
    let (planes, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
    let (oh, ow) = (h / 2, w / 2);
    let quarter = S::from_f64_lossy(0.25);
    let mut out = Vec::with_capacity(planes * oh * ow);
    for pl in 0..planes {
        let src = &x[pl * h * w..(pl + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let (y, xx) = (2 * oy, 2 * ox);
                let s = src[y * w + xx] + src[y * w + xx + 1] + src[(y + 1) * w + xx] + src[(y + 1) * w + xx + 1];
                out.push(s * quarter);
            }
        }
    }
    (vec![shape[0], shape[1], oh, ow], out)
}

pub(crate) fn avg_pool2_backward<S: Scalar>(dout: &[S], in_shape: &[usize]) -> Vec<S> {
    let (planes, h, w) = (in_shape[0] * in_shape[1], in_shape[2], in_shape[3]);
    let (oh, ow) = (h / 2, w / 2);
    let quarter = S::from_f64_lossy(0.25);
    let mut dx = vec![S::zero(); planes * h * w];
    for pl in 0..planes {
        let dst = &mut dx[pl * h * w..(pl + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let g = dout[(pl * oh + oy) * ow + ox] * quarter;
                let (y, xx) = (2 * oy, 2 * ox);
                dst[y * w + xx] = g;
                dst[y * w + xx + 1] = g;
                dst[(y + 1) * w + xx] = g;
                dst[(y + 1) * w + xx + 1] = g;
            }
        }
    }
    dx
}

pub(crate) fn softmax_rows<S: Scalar>(x: &[S], cols: usize) -> Vec<S> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(cols) {
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let exps: Vec<S> = row.iter().map(|&v| (v - max).exp()).collect();
        let z: S = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|e| e / z));
    }
    out
}

fn log_sum_exp<S: Scalar>(row: &[S]) -> S {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<S>().ln()
}

/// Validates that each row of `t` is a probability distribution.
pub(crate) fn check_distribution_rows<S: Scalar>(op: &'static str, t: &[S], cols: usize) -> Result<()> {
    for (i, row) in t.chunks(cols).enumerate() {
        let sum: f64 = row.iter().map(|v| v.to_f64_lossy()).sum();
        if (sum - 1.0).abs() > 1e-6 || row.iter().any(|v| *v < S::zero()) {
            return Err(super::TensorError::Validation {
                op,
                detail: format!("target row {i} is not a distribution (sum {sum})"),
            });
        }
    }
    Ok(())
}

/// `(1/B)·Σ_b w_b·H(target_b, softmax(logits_b))`.
pub(crate) fn cross_entropy_forward<S: Scalar>(logits: &[S], target: &[S], weights: &[S], cols: usize) -> S {
    let batch = weights.len();
    let mut total = S::zero();
    for ((row, t), &w) in logits.chunks(cols).zip(target.chunks(cols)).zip(weights) {
        if w == S::zero() {
            continue;
        }
        let lse = log_sum_exp(row);
        let h: S = row.iter().zip(t).map(|(&l, &tc)| tc * (lse - l)).sum();
        total = total + w * h;
    }
    total / S::from_usize(batch).unwrap()
}

pub(crate) fn cross_entropy_backward<S: Scalar>(
    logits: &[S],
    target: &[S],
    weights: &[S],
    cols: usize,
    upstream: S,
) -> Vec<S> {
    let batch = S::from_usize(weights.len()).unwrap();
    let probs = softmax_rows(logits, cols);
    let mut grad = Vec::with_capacity(logits.len());
    for ((p, t), &w) in probs.chunks(cols).zip(target.chunks(cols)).zip(weights) {
        let scale = upstream * w / batch;
        let tsum: S = t.iter().copied().sum();
        grad.extend(p.iter().zip(t).map(|(&pc, &tc)| scale * (pc * tsum - tc)));
    }
    grad
}

pub(crate) const KL_FLOOR: f64 = 1e-12;

/// `(1/B)·Σ_b w_b·Σ_c p log(p / max(q, floor))`, with `0·log 0 = 0`.
pub(crate) fn kl_forward<S: Scalar>(p: &[S], q: &[S], weights: &[S], cols: usize) -> S {
    let floor = S::from_f64_lossy(KL_FLOOR);
    let mut total = S::zero();
    for ((pr, qr), &w) in p.chunks(cols).zip(q.chunks(cols)).zip(weights) {
        if w == S::zero() {
            continue;
        }
        let row: S = pr
            .iter()
            .zip(qr)
            .filter(|(&pc, _)| pc > S::zero())
            .map(|(&pc, &qc)| pc * (pc / qc.max(floor)).ln())
            .sum();
        total = total + w * row;
    }
    total / S::from_usize(weights.len()).unwrap()
}

pub(crate) fn kl_backward<S: Scalar>(
    p: &[S],
    q: &[S],
    weights: &[S],
    cols: usize,
    upstream: S,
) -> (Vec<S>, Vec<S>) {
    let floor = S::from_f64_lossy(KL_FLOOR);
    let batch = S::from_usize(weights.len()).unwrap();
    let mut dp = Vec::with_capacity(p.len());
    let mut dq = Vec::with_capacity(q.len());
    for ((pr, qr), &w) in p.chunks(cols).zip(q.chunks(cols)).zip(weights) {
        let scale = upstream * w / batch;
        for (&pc, &qc) in pr.iter().zip(qr) {
            if pc > S::zero() {
                let qf = qc.max(floor);
                dp.push(scale * ((pc / qf).ln() + S::one()));
                dq.push(if qc >= floor { -scale * pc / qc } else { S::zero() });
            } else {
                dp.push(S::zero());
                dq.push(S::zero());
            }
        }
    }
    (dp, dq)
}
