//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! A [`Graph`] owns every value produced during a forward pass. Operations
//! return [`Var`] handles; since a node can only reference earlier nodes the
//! tape is topologically ordered by construction and [`Graph::backward`]
//! visits each node once, in reverse.
//!
//! Gradients accumulate on leaves created with `requires_grad = true`;
//! repeated `backward` calls add up until [`Graph::zero_grad`]. Broadcasting
//! is limited to a per-channel `[C]` vector against `[N, C, ...]`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{dim_err, Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Normalization statistics used by [`Graph::batch_norm`].
#[derive(Debug, Clone, Copy)]
pub enum BnMode<'a> {
    /// Normalize with the batch's own per-channel statistics.
    Train,
    /// Normalize with stored running mean and variance.
    Eval { mean: &'a [f64], var: &'a [f64] },
}

/// Output of [`Graph::batch_norm`]: the normalized tensor plus the batch
/// statistics of its input (biased variance), whatever the mode.
#[derive(Debug, Clone)]
pub struct BnOutput {
    pub y: Var,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { input: Var, weight: Var, geom: ConvGeom },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulConst(Var, Vec<f64>),
    ChannelMul { x: Var, v: Var },
    ChannelAdd { x: Var, v: Var },
    Sigmoid(Var),
    Relu(Var),
    Abs(Var),
    Sqrt(Var),
    StopGradient,
    MeanAxes { x: Var, map: Vec<usize>, count: usize },
    SumAll(Var),
    Linear { x: Var, w: Var, b: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    MinMaxNorm { x: Var, argmin: usize, argmax: usize, range: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// The tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

/// Below this range a min-max normalization is treated as degenerate.
pub const MINMAX_DEGENERATE_RANGE: f64 = 1e-12;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Adds a leaf. Only leaves with `requires_grad` accumulate gradient.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf, if any was produced.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient as a tensor shaped like the leaf (zeros if none accumulated).
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let shape = self.nodes[v.0].value.shape().to_vec();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(dim_err(op, format!("operand shapes {:?} and {:?}", sa, sb)));
        }
        Ok(())
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    fn binary(&mut self, opname: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(opname, a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    // ── Elementwise ──────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, |x| k * x, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, |x| x + k, Op::AddScalar(a))
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        let va = self.value(a);
        if va.shape() != c.shape() {
            return Err(dim_err("mul_const", format!("operand shapes {:?} and {:?}", va.shape(), c.shape())));
        }
        let data = va.data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::MulConst(a, c.data().to_vec()), rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, libm::fabs, Op::Abs(a))
    }

    /// Square root; its derivative is taken as zero at 0.
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, |x| libm::sqrt(x.max(0.0)), Op::Sqrt(a))
    }

    /// Identity forward, zero gradient backward.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.push(value, Op::StopGradient, false)
    }

    // ── Per-channel broadcast ────────────────────────────────────────

    fn channel_layout(&self, op: &'static str, x: Var, v: Var) -> Result<(usize, usize, usize)> {
        let sx = self.value(x).shape();
        let sv = self.value(v).shape();
        if sx.len() < 2 || sv.len() != 1 || sv[0] != sx[1] {
            return Err(dim_err(op, format!("channel axis: {:?} against per-channel {:?}", sx, sv)));
        }
        Ok((sx[0], sx[1], sx[2..].iter().product()))
    }

    /// `x[n, c, ...] * v[c]`.
    pub fn channel_mul(&mut self, x: Var, v: Var) -> Result<Var> {
        let (n, c, inner) = self.channel_layout("channel_mul", x, v)?;
        let vx = self.value(x);
        let vv = self.value(v).data();
        let mut data = vx.data().to_vec();
        for ni in 0..n {
            for ci in 0..c {
                let k = vv[ci];
                for d in &mut data[(ni * c + ci) * inner..][..inner] {
                    *d *= k;
                }
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(v);
        Ok(self.push(value, Op::ChannelMul { x, v }, rg))
    }

    /// `x[n, c, ...] + v[c]`.
    pub fn channel_add(&mut self, x: Var, v: Var) -> Result<Var> {
        let (n, c, inner) = self.channel_layout("channel_add", x, v)?;
        let vx = self.value(x);
        let vv = self.value(v).data();
        let mut data = vx.data().to_vec();
        for ni in 0..n {
            for ci in 0..c {
                let k = vv[ci];
                for d in &mut data[(ni * c + ci) * inner..][..inner] {
                    *d += k;
                }
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(v);
        Ok(self.push(value, Op::ChannelAdd { x, v }, rg))
    }

    // ── Reductions ───────────────────────────────────────────────────

    /// Mean over the listed axes; reduced axes are dropped from the shape.
    pub fn mean_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if axes.iter().any(|&a| a >= shape.len()) {
            return Err(dim_err("mean_axes", format!("axes {:?} out of range for {:?}", axes, shape)));
        }
        let keep: Vec<usize> = (0..shape.len()).filter(|a| !axes.contains(a)).collect();
        let out_shape: Vec<usize> = keep.iter().map(|&a| shape[a]).collect();
        let out_numel: usize = out_shape.iter().product();
        let count: usize = axes.iter().map(|&a| shape[a]).product::<usize>().max(1);
        if axes.iter().any(|&a| shape[a] == 0) {
            return Err(Error::Empty("mean_axes"));
        }
        // Map every input position to its output slot.
        let numel: usize = shape.iter().product();
        let mut map = Vec::with_capacity(numel);
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..numel {
            let mut o = 0;
            for &a in &keep {
                o = o * shape[a] + idx[a];
            }
            map.push(o);
            for d in (0..shape.len()).rev() {
                idx[d] += 1;
                if idx[d] < shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        let mut out = vec![0.0; out_numel];
        for (&o, &v) in map.iter().zip(self.value(x).data()) {
            out[o] += v;
        }
        let inv = 1.0 / count as f64;
        for v in &mut out {
            *v *= inv;
        }
        let value = Tensor::new(out_shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::MeanAxes { x, map, count }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(Error::Empty("mean"));
        }
        let s = self.sum(x);
        Ok(self.scale(s, 1.0 / n as f64))
    }

    /// Per-channel mean of `[N, C, H, W]` over `(N, H, W)`.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        self.value(x).dims4("channel_mean")?;
        self.mean_axes(x, &[0, 2, 3])
    }

    /// Per-channel biased variance of `[N, C, H, W]` over `(N, H, W)`.
    pub fn channel_var(&mut self, x: Var) -> Result<Var> {
        let mu = self.channel_mean(x)?;
        let neg = self.scale(mu, -1.0);
        let centered = self.channel_add(x, neg)?;
        let sq = self.mul(centered, centered)?;
        self.mean_axes(sq, &[0, 2, 3])
    }

    /// `mean(|a - b|)` over all elements.
    pub fn l1_mean_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let ad = self.abs(d);
        self.mean(ad)
    }

    /// Min-max normalization of a vector onto `[0, 1]`; a vector whose range
    /// is below [`MINMAX_DEGENERATE_RANGE`] maps to 0.5 everywhere.
    pub fn minmax_normalize(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() != 1 || vx.numel() == 0 {
            return Err(dim_err("minmax_normalize", format!("expected a nonempty vector, got {:?}", vx.shape())));
        }
        let d = vx.data();
        let (mut argmin, mut argmax) = (0, 0);
        for (i, &v) in d.iter().enumerate() {
            if v < d[argmin] {
                argmin = i;
            }
            if v > d[argmax] {
                argmax = i;
            }
        }
        let range = d[argmax] - d[argmin];
        let data = if range <= MINMAX_DEGENERATE_RANGE {
            vec![0.5; d.len()]
        } else {
            d.iter().map(|&v| (v - d[argmin]) / range).collect()
        };
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::MinMaxNorm { x, argmin, argmax, range }, rg))
    }

    // ── Network layers ───────────────────────────────────────────────

    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeom::infer(self.value(input).shape(), self.value(weight).shape(), stride, padding)?;
        let value = kernels::conv2d_forward(self.value(input), self.value(weight), stride, padding)?;
        let rg = self.rg(input) || self.rg(weight);
        Ok(self.push(value, Op::Conv2d { input, weight, geom }, rg))
    }

    /// Batch normalization over `(N, H, W)` followed by the per-channel
    /// affine map `gamma * xhat + beta`.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64, mode: BnMode<'_>) -> Result<BnOutput> {
        let (n, c, h, w) = self.value(x).dims4("batch_norm")?;
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            if self.value(p).shape() != [c] {
                return Err(dim_err(
                    "batch_norm",
                    format!("channel axis: {} has shape {:?}, input has C={}", name, self.value(p).shape(), c),
                ));
            }
        }
        let m = n * h * w;
        if matches!(mode, BnMode::Train) && m < 2 {
            return Err(Error::DegenerateBatch { count: m });
        }
        if m == 0 {
            return Err(Error::Empty("batch_norm"));
        }
        let hw = h * w;
        let xd = self.value(x).data();
        let mut batch_mean = vec![0.0; c];
        let mut batch_var = vec![0.0; c];
        for ci in 0..c {
            let mut s = 0.0;
            for ni in 0..n {
                s += xd[(ni * c + ci) * hw..][..hw].iter().sum::<f64>();
            }
            let mu = s / m as f64;
            let mut v = 0.0;
            for ni in 0..n {
                v += xd[(ni * c + ci) * hw..][..hw].iter().map(|&t| (t - mu) * (t - mu)).sum::<f64>();
            }
            batch_mean[ci] = mu;
            batch_var[ci] = v / m as f64;
        }
        let (mean, var, train) = match mode {
            BnMode::Train => (batch_mean.clone(), batch_var.clone(), true),
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(dim_err("batch_norm", "running statistics do not match channel count"));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / libm::sqrt(v + eps)).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut y = vec![0.0; xd.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                for k in base..base + hw {
                    let xh = (xd[k] - mean[ci]) * inv_std[ci];
                    xhat[k] = xh;
                    y[k] = g[ci] * xh + b[ci];
                }
            }
        }
        let value = Tensor::new([n, c, h, w], y)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let y = self.push(value, Op::BatchNorm { x, gamma, beta, xhat, inv_std, train }, rg);
        Ok(BnOutput { y, batch_mean, batch_var })
    }

    /// `x[N, I] @ w[O, I]^T + b[O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.value(x).shape(), self.value(w).shape(), self.value(b).shape());
        let (n, i, o) = match (sx, sw, sb) {
            (&[n, i], &[o, wi], &[bo]) if wi == i && bo == o => (n, i, o),
            _ => return Err(dim_err("linear", format!("x {:?}, w {:?}, b {:?}", sx, sw, sb))),
        };
        let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut y = vec![0.0; n * o];
        for ni in 0..n {
            for oi in 0..o {
                let row = &wd[oi * i..][..i];
                y[ni * o + oi] = bd[oi] + row.iter().zip(&xd[ni * i..][..i]).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        let value = Tensor::new([n, o], y)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(value, Op::Linear { x, w, b }, rg))
    }

    /// Mean softmax cross-entropy of `logits[N, K]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = match self.value(logits).shape() {
            &[n, k] if n == labels.len() && labels.iter().all(|&l| l < k) => (n, k),
            s => return Err(dim_err("cross_entropy", format!("logits {:?} with {} labels", s, labels.len()))),
        };
        if n == 0 {
            return Err(Error::Empty("cross_entropy"));
        }
        let ld = self.value(logits).data();
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for ni in 0..n {
            let row = &ld[ni * k..][..k];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&v| libm::exp(v - mx)).sum();
            for ki in 0..k {
                probs[ni * k + ki] = libm::exp(row[ki] - mx) / z;
            }
            loss -= row[labels[ni]] - mx - libm::log(z);
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss / n as f64),
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
            rg,
        ))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Back-propagates from a scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.numel() != 1 || lv.rank() > 1 {
            return Err(Error::Rank(lv.shape().to_vec()));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let mut tmp: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        tmp.resize_with(loss.0 + 1, || None);
        tmp[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = tmp[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let nodes = &self.nodes;
            let mut send = |v: Var, contrib: Vec<f64>| {
                if !nodes[v.0].requires_grad {
                    return;
                }
                match &mut tmp[v.0] {
                    Some(acc) => acc.iter_mut().zip(contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Leaf => match &mut self.grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(g),
                },
                Op::StopGradient => {}
                Op::Add(a, b) => {
                    send(*b, g.clone());
                    send(*a, g);
                }
                Op::Sub(a, b) => {
                    send(*b, g.iter().map(|v| -v).collect());
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    send(*a, g.iter().zip(vb).map(|(g, y)| g * y).collect());
                    send(*b, g.iter().zip(va).map(|(g, x)| g * x).collect());
                }
                Op::Scale(a, k) => send(*a, g.iter().map(|v| v * k).collect()),
                Op::AddScalar(a) => send(*a, g),
                Op::MulConst(a, c) => send(*a, g.iter().zip(c).map(|(g, c)| g * c).collect()),
                Op::ChannelMul { x, v } => {
                    let shape = nodes[x.0].value.shape();
                    let (n, c) = (shape[0], shape[1]);
                    let inner = g.len() / (n * c).max(1);
                    let vx = nodes[x.0].value.data();
                    let vv = nodes[v.0].value.data();
                    let mut gx = g.clone();
                    let mut gv = vec![0.0; c];
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * inner;
                            let mut acc = 0.0;
                            for k in base..base + inner {
                                acc += g[k] * vx[k];
                                gx[k] *= vv[ci];
                            }
                            gv[ci] += acc;
                        }
                    }
                    send(*v, gv);
                    send(*x, gx);
                }
                Op::ChannelAdd { x, v } => {
                    let shape = nodes[x.0].value.shape();
                    let (n, c) = (shape[0], shape[1]);
                    let inner = g.len() / (n * c).max(1);
                    let mut gv = vec![0.0; c];
                    for ni in 0..n {
                        for ci in 0..c {
                            gv[ci] += g[(ni * c + ci) * inner..][..inner].iter().sum::<f64>();
                        }
                    }
                    send(*v, gv);
                    send(*x, g);
                }
                Op::Sigmoid(a) => {
                    let y = node.value.data();
                    send(*a, g.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect());
                }
                Op::Relu(a) => {
                    let x = nodes[a.0].value.data();
                    send(*a, g.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect());
                }
                Op::Abs(a) => {
                    let x = nodes[a.0].value.data();
                    send(*a, g.iter().zip(x).map(|(g, &x)| g * sign(x)).collect());
                }
                Op::Sqrt(a) => {
                    let y = node.value.data();
                    send(*a, g.iter().zip(y).map(|(g, &r)| if r > 0.0 { g / (2.0 * r) } else { 0.0 }).collect());
                }
                Op::MeanAxes { x, map, count } => {
                    let inv = 1.0 / *count as f64;
                    send(*x, map.iter().map(|&o| g[o] * inv).collect());
                }
                Op::SumAll(x) => {
                    let n = nodes[x.0].value.numel();
                    send(*x, vec![g[0]; n]);
                }
                Op::MinMaxNorm { x, argmin, argmax, range } => {
                    let n = g.len();
                    let mut gx = vec![0.0; n];
                    if *range > MINMAX_DEGENERATE_RANGE {
                        let y = node.value.data();
                        for i in 0..n {
                            gx[i] += g[i] / range;
                            gx[*argmin] += g[i] * (y[i] - 1.0) / range;
                            gx[*argmax] -= g[i] * y[i] / range;
                        }
                    }
                    send(*x, gx);
                }
                Op::Conv2d { input, weight, geom } => {
                    if nodes[weight.0].requires_grad {
                        send(*weight, kernels::conv2d_backward_weight(&g, nodes[input.0].value.data(), geom));
                    }
                    if nodes[input.0].requires_grad {
                        send(*input, kernels::conv2d_backward_input(&g, nodes[weight.0].value.data(), geom));
                    }
                }
                Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                    let shape = nodes[x.0].value.shape();
                    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                    let m = (n * hw) as f64;
                    let gam = nodes[gamma.0].value.data();
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            for k in base..base + hw {
                                dgamma[ci] += g[k] * xhat[k];
                                dbeta[ci] += g[k];
                            }
                        }
                    }
                    if nodes[x.0].requires_grad {
                        let mut dx = vec![0.0; g.len()];
                        for ni in 0..n {
                            for ci in 0..c {
                                let base = (ni * c + ci) * hw;
                                for k in base..base + hw {
                                    dx[k] = if *train {
                                        // dxhat = g * gamma; sums over the channel are dbeta and dgamma.
                                        gam[ci] * inv_std[ci] / m
                                            * (m * g[k] - dbeta[ci] - xhat[k] * dgamma[ci])
                                    } else {
                                        g[k] * gam[ci] * inv_std[ci]
                                    };
                                }
                            }
                        }
                        send(*x, dx);
                    }
                    send(*gamma, dgamma);
                    send(*beta, dbeta);
                }
                Op::Linear { x, w, b } => {
                    let (n, i) = (nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]);
                    let o = nodes[w.0].value.shape()[0];
                    let (xd, wd) = (nodes[x.0].value.data(), nodes[w.0].value.data());
                    let mut gx = vec![0.0; n * i];
                    let mut gw = vec![0.0; o * i];
                    let mut gb = vec![0.0; o];
                    for ni in 0..n {
                        for oi in 0..o {
                            let go = g[ni * o + oi];
                            gb[oi] += go;
                            for ii in 0..i {
                                gx[ni * i + ii] += go * wd[oi * i + ii];
                                gw[oi * i + ii] += go * xd[ni * i + ii];
                            }
                        }
                    }
                    send(*x, gx);
                    send(*w, gw);
                    send(*b, gb);
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let n = labels.len();
                    let k = probs.len() / n;
                    let scale = g[0] / n as f64;
                    let mut gl = probs.clone();
                    for (ni, &l) in labels.iter().enumerate() {
                        gl[ni * k + l] -= 1.0;
                    }
                    gl.iter_mut().for_each(|v| *v *= scale);
                    send(*logits, gl);
                }
            }
        }
        Ok(())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
