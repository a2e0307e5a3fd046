use super::kernels::{self, ConvGeom};
use super::{dim_err, gemm, MatRef, Result, Scalar, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Dense { x: Var, w: Var, b: Var },
    Conv2d { x: Var, k: Var, geom: ConvGeom },
    ChannelBias { x: Var, b: Var },
    Relu { x: Var },
    AvgPool2 { x: Var },
    GlobalAvgPool { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: S },
    Sum { x: Var },
    Softmax { x: Var },
    CrossEntropy { logits: Var, target: Var, weights: Vec<S> },
    Kl { p: Var, q: Var, weights: Vec<S> },
    L2Prob { p: Var, q: Var },
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Define-by-run record of executed operations.
///
/// Every operation appends one node; [`Tape::backward`] walks the nodes in
/// reverse and may be called once per recording.
#[derive(Debug)]
pub struct Tape<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
    consumed: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
    visited: usize,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the loss w.r.t. `var`; `None` when `var` does not require grad.
    pub fn get(&self, var: Var) -> Option<&Tensor<S>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }

    /// Number of recorded operations the backward sweep propagated through.
    pub fn visited_ops(&self) -> usize {
        self.visited
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(dim_err(op, format!("shape {a:?} vs {b:?}")));
    }
    Ok(())
}

fn add_into<S: Scalar>(acc: &mut Option<Tensor<S>>, shape: &[usize], delta: Vec<S>) {
    match acc {
        Some(t) => {
            for (a, d) in t.data_mut().iter_mut().zip(delta) {
                *a = *a + d;
            }
        }
        None => *acc = Some(Tensor::from_parts(shape.to_vec(), delta)),
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded value so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Result<Var> {
        if self.consumed {
            return Err(TensorError::Usage("tape already consumed by backward; reset it first".into()));
        }
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Result<Var> {
        self.push("leaf", value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor<S>) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Copy of `v` with no path back to it: stop-gradient.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// `out[b, o] = Σ_i x[b, i]·w[i, o] + bias[o]`.
    pub fn dense(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        const OP: &str = "dense";
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(bias));
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 {
            return Err(dim_err(OP, format!("expected [B,I]·[I,O]+[O], got {xs:?}, {ws:?}, {bs:?}")));
        }
        let (batch, inner, out) = (xs[0], xs[1], ws[1]);
        if ws[0] != inner || bs[0] != out {
            return Err(dim_err(OP, format!("inner dimensions {xs:?}, {ws:?}, {bs:?} do not match")));
        }
        let bv = self.value(bias).data();
        let mut data: Vec<S> = (0..batch).flat_map(|_| bv.iter().copied()).collect();
        gemm(
            MatRef::row_major(self.value(x).data(), batch, inner),
            MatRef::row_major(self.value(w).data(), inner, out),
            S::one(),
            &mut data,
        );
        let rg = self.any_grad(&[x, w, bias]);
        self.push(OP, Tensor::from_parts(vec![batch, out], data), Op::Dense { x, w, b: bias }, rg)
    }

    /// Cross-correlation of `[B,C,H,W]` input with `[F,C,kh,kw]` kernels.
    pub fn conv2d(&mut self, x: Var, kernels: Var, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(kernels), stride, padding)?;
        let data = kernels::conv2d_forward(self.value(x).data(), self.value(kernels).data(), &geom);
        let shape = vec![geom.batch, geom.filters, geom.out_h, geom.out_w];
        let rg = self.any_grad(&[x, kernels]);
        self.push("conv2d", Tensor::from_parts(shape, data), Op::Conv2d { x, k: kernels, geom }, rg)
    }

    /// Adds `bias[c]` to every element of channel `c` of a `[B,C,H,W]` tensor.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        const OP: &str = "add_channel_bias";
        let xs = self.shape(x).to_vec();
        let bs = self.shape(bias);
        if xs.len() != 4 || bs != [xs[1]] {
            return Err(dim_err(OP, format!("input {xs:?} with bias {bs:?}")));
        }
        let plane = xs[2] * xs[3];
        let bv = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv[(i / plane) % xs[1]])
            .collect();
        let rg = self.any_grad(&[x, bias]);
        self.push(OP, Tensor::from_parts(xs, data), Op::ChannelBias { x, b: bias }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| if v > S::zero() { v } else { S::zero() }).collect();
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        let rg = self.any_grad(&[x]);
        self.push("relu", value, Op::Relu { x }, rg)
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x);
        if shape.len() != 4 || shape[2] < 2 || shape[3] < 2 {
            return Err(dim_err("avg_pool2", format!("needs [B,C,H≥2,W≥2], got {shape:?}")));
        }
        let (shape, data) = kernels::avg_pool2_forward(self.value(x).data(), shape);
        let rg = self.any_grad(&[x]);
        self.push("avg_pool2", Tensor::from_parts(shape, data), Op::AvgPool2 { x }, rg)
    }

    /// Mean over spatial positions: `[B,C,H,W]` to `[B,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(dim_err("global_avg_pool", format!("needs [B,C,H,W], got {shape:?}")));
        }
        let plane = shape[2] * shape[3];
        let inv = S::one() / S::from_usize(plane).unwrap();
        let data = self.value(x).data().chunks(plane).map(|c| c.iter().copied().sum::<S>() * inv).collect();
        let rg = self.any_grad(&[x]);
        self.push("global_avg_pool", Tensor::from_parts(vec![shape[0], shape[1]], data), Op::GlobalAvgPool { x }, rg)
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        same_shape(op, self.shape(a), self.shape(b))?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("add", a, b, |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        self.push("add", value, Op::Add { a, b }, rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("sub", a, b, |x, y| x - y)?;
        let rg = self.any_grad(&[a, b]);
        self.push("sub", value, Op::Sub { a, b }, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("mul", a, b, |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        self.push("mul", value, Op::Mul { a, b }, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = S::from_f64_lossy(c);
        let t = self.value(x);
        let value = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&v| v * c).collect());
        let rg = self.any_grad(&[x]);
        self.push("scale", value, Op::Scale { x, c }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.any_grad(&[x]);
        self.push("sum", Tensor::scalar(s), Op::Sum { x }, rg)
    }

    fn classes(&self, op: &'static str, v: Var) -> Result<usize> {
        match self.shape(v) {
            [_, c] => Ok(*c),
            s => Err(dim_err(op, format!("expected [B,C], got {s:?}"))),
        }
    }

    /// Row-wise softmax of `[B,C]` logits, max-subtracted.
    pub fn softmax(&mut self, logits: Var) -> Result<Var> {
        let cols = self.classes("softmax", logits)?;
        let t = self.value(logits);
        let value = Tensor::from_parts(t.shape().to_vec(), kernels::softmax_rows(t.data(), cols));
        let rg = self.any_grad(&[logits]);
        self.push("softmax", value, Op::Softmax { x: logits }, rg)
    }

    /// Mean over the batch of `H(target, softmax(logits))`.
    ///
    /// Target rows must be distributions; no gradient flows into `target`.
    pub fn cross_entropy(&mut self, logits: Var, target: Var) -> Result<Var> {
        let batch = self.shape(logits)[0];
        self.cross_entropy_weighted(logits, target, &vec![1.0; batch])
    }

    /// `(1/B)·Σ_b weights[b]·H(target_b, softmax(logits_b))`.
    ///
    /// Zero weights give masked-out rows that still count toward `B`.
    pub fn cross_entropy_weighted(&mut self, logits: Var, target: Var, weights: &[f64]) -> Result<Var> {
        const OP: &str = "cross_entropy";
        let cols = self.classes(OP, logits)?;
        same_shape(OP, self.shape(logits), self.shape(target))?;
        let batch = self.shape(logits)[0];
        if weights.len() != batch {
            return Err(dim_err(OP, format!("{} weights for batch {batch}", weights.len())));
        }
        kernels::check_distribution_rows(OP, self.value(target).data(), cols)?;
        let weights: Vec<S> = weights.iter().map(|&w| S::from_f64_lossy(w)).collect();
        let loss = kernels::cross_entropy_forward(self.value(logits).data(), self.value(target).data(), &weights, cols);
        let rg = self.any_grad(&[logits]);
        self.push(OP, Tensor::scalar(loss), Op::CrossEntropy { logits, target, weights }, rg)
    }

    /// Mean over the batch of `Σ_c p log(p/q)`, with `q` floored at 1e-12.
    pub fn kl_divergence(&mut self, p: Var, q: Var) -> Result<Var> {
        let batch = self.shape(p)[0];
        self.kl_divergence_weighted(p, q, &vec![1.0; batch])
    }

    pub fn kl_divergence_weighted(&mut self, p: Var, q: Var, weights: &[f64]) -> Result<Var> {
        const OP: &str = "kl_divergence";
        let cols = self.classes(OP, p)?;
        same_shape(OP, self.shape(p), self.shape(q))?;
        if weights.len() != self.shape(p)[0] {
            return Err(dim_err(OP, format!("{} weights for batch {}", weights.len(), self.shape(p)[0])));
        }
        let weights: Vec<S> = weights.iter().map(|&w| S::from_f64_lossy(w)).collect();
        let loss = kernels::kl_forward(self.value(p).data(), self.value(q).data(), &weights, cols);
        let rg = self.any_grad(&[p, q]);
        self.push(OP, Tensor::scalar(loss), Op::Kl { p, q, weights }, rg)
    }

    /// `(1/(C·B))·Σ_b ‖p_b − q_b‖²`.
    pub fn l2_prob_distance(&mut self, p: Var, q: Var) -> Result<Var> {
        const OP: &str = "l2_prob_distance";
        self.classes(OP, p)?;
        same_shape(OP, self.shape(p), self.shape(q))?;
        let n = S::from_usize(self.value(p).numel()).unwrap();
        let sq: S = self
            .value(p)
            .data()
            .iter()
            .zip(self.value(q).data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        let rg = self.any_grad(&[p, q]);
        self.push(OP, Tensor::scalar(sq / n), Op::L2Prob { p, q }, rg)
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every leaf created with `requires_grad` receives a gradient of its own
    /// shape (zeros when unreachable). The tape is consumed.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<S>> {
        if self.consumed {
            return Err(TensorError::Usage("backward called twice on one recording".into()));
        }
        let node = self.nodes.get(loss.0).ok_or_else(|| TensorError::Usage("loss is not on this tape".into()))?;
        if !node.value.is_scalar() {
            return Err(TensorError::Usage(format!("loss must be scalar, got shape {:?}", node.value.shape())));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(S::one()));
        let mut visited = 0;
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            visited += 1;
            self.propagate(i, &g, &mut grads);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            } else if !matches!(node.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads, visited })
    }

    fn propagate(&self, i: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let gd = g.data();
        let mut send = |v: Var, delta: Vec<S>| {
            if nodes[v.0].requires_grad {
                add_into(&mut grads[v.0], nodes[v.0].value.shape(), delta);
            }
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Dense { x, w, b } => {
                let (batch, inner) = (val(*x).shape()[0], val(*x).shape()[1]);
                let out = val(*w).shape()[1];
                if wants(*x) {
                    let mut dx = vec![S::zero(); batch * inner];
                    gemm(
                        MatRef::row_major(gd, batch, out),
                        MatRef::transposed(val(*w).data(), inner, out),
                        S::zero(),
                        &mut dx,
                    );
                    send(*x, dx);
                }
                if wants(*w) {
                    let mut dw = vec![S::zero(); inner * out];
                    gemm(
                        MatRef::transposed(val(*x).data(), batch, inner),
                        MatRef::row_major(gd, batch, out),
                        S::zero(),
                        &mut dw,
                    );
                    send(*w, dw);
                }
                if wants(*b) {
                    let mut db = vec![S::zero(); out];
                    for row in gd.chunks(out) {
                        for (d, &r) in db.iter_mut().zip(row) {
                            *d = *d + r;
                        }
                    }
                    send(*b, db);
                }
            }
            Op::Conv2d { x, k, geom } => {
                let (dx, dk) =
                    kernels::conv2d_backward(val(*x).data(), val(*k).data(), gd, geom, wants(*x), wants(*k));
                if let Some(dx) = dx {
                    send(*x, dx);
                }
                if let Some(dk) = dk {
                    send(*k, dk);
                }
            }
            Op::ChannelBias { x, b } => {
                let shape = val(*x).shape();
                let (channels, plane) = (shape[1], shape[2] * shape[3]);
                if wants(*b) {
                    let mut db = vec![S::zero(); channels];
                    for (j, chunk) in gd.chunks(plane).enumerate() {
                        db[j % channels] = db[j % channels] + chunk.iter().copied().sum::<S>();
                    }
                    send(*b, db);
                }
                send(*x, gd.to_vec());
            }
            Op::Relu { x } => {
                let d = val(*x)
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&v, &gv)| if v > S::zero() { gv } else { S::zero() })
                    .collect();
                send(*x, d);
            }
            Op::AvgPool2 { x } => send(*x, kernels::avg_pool2_backward(gd, val(*x).shape())),
            Op::GlobalAvgPool { x } => {
                let shape = val(*x).shape();
                let plane = shape[2] * shape[3];
                let inv = S::one() / S::from_usize(plane).unwrap();
                send(*x, gd.iter().flat_map(|&v| std::iter::repeat_n(v * inv, plane)).collect());
            }
            Op::Add { a, b } => {
                send(*a, gd.to_vec());
                send(*b, gd.to_vec());
            }
            Op::Sub { a, b } => {
                send(*a, gd.to_vec());
                send(*b, gd.iter().map(|&v| -v).collect());
            }
            Op::Mul { a, b } => {
                if wants(*a) {
                    send(*a, gd.iter().zip(val(*b).data()).map(|(&gv, &bv)| gv * bv).collect());
                }
                if wants(*b) {
                    send(*b, gd.iter().zip(val(*a).data()).map(|(&gv, &av)| gv * av).collect());
                }
            }
            Op::Scale { x, c } => send(*x, gd.iter().map(|&v| v * *c).collect()),
            Op::Sum { x } => send(*x, vec![gd[0]; val(*x).numel()]),
            Op::Softmax { x } => {
                let p = nodes[i].value.data();
                let cols = nodes[i].value.shape()[1];
                let mut d = Vec::with_capacity(p.len());
                for (pr, gr) in p.chunks(cols).zip(gd.chunks(cols)) {
                    let dot: S = pr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    d.extend(pr.iter().zip(gr).map(|(&pc, &gc)| pc * (gc - dot)));
                }
                send(*x, d);
            }
            Op::CrossEntropy { logits, target, weights } => {
                let cols = val(*logits).shape()[1];
                let d = kernels::cross_entropy_backward(val(*logits).data(), val(*target).data(), weights, cols, gd[0]);
                send(*logits, d);
            }
            Op::Kl { p, q, weights } => {
                let cols = val(*p).shape()[1];
                let (dp, dq) = kernels::kl_backward(val(*p).data(), val(*q).data(), weights, cols, gd[0]);
                send(*p, dp);
                send(*q, dq);
            }
            Op::L2Prob { p, q } => {
                let n = S::from_usize(val(*p).numel()).unwrap();
                let two = S::from_f64_lossy(2.0) * gd[0] / n;
                let diff: Vec<S> =
                    val(*p).data().iter().zip(val(*q).data()).map(|(&a, &b)| two * (a - b)).collect();
                send(*q, diff.iter().map(|&v| -v).collect());
                send(*p, diff);
            }
        }
    }
}
