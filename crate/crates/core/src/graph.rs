//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation as a node; [`Graph::backward`] walks
//! the tape from a scalar root in reverse insertion order. Nodes created from
//! [`Graph::constant`] never receive gradients, which is how frozen networks
//! are wired in: their parameters are constants, so gradients with respect
//! to them are identically zero while gradients still flow *through* them.

use crate::tensor::{conv2d_backward, conv2d_forward, dims2, dims4, gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Conv2d(Var, Var, Var),
    ChannelAffine(Var, Var, Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Square(Var),
    Log(Var),
    Upsample2x(Var),
    AvgPool2x(Var),
    GlobalAvgPool(Var),
    ConcatFeatures(Vec<Var>),
    ConcatBatch(Vec<Var>),
    Select(Var, Vec<usize>),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    MeanPerSample(Var),
    SoftmaxCrossEntropy(Var, Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every differentiable node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, or zeros shaped like `like` when none reached it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape().to_vec()))
    }
}

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

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable input (parameter or image that gradients are requested for).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.any_grad(&[a, b]);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.any_grad(&[a, b]);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.any_grad(&[a, b]);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::AddScalar(a), rg)
    }

    /// `[N, I] x [I, O] -> [N, O]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Var {
        let (n, i) = dims2(self.value(x));
        let (wi, o) = dims2(self.value(w));
        assert_eq!(i, wi, "matmul inner dimension mismatch");
        let mut out = vec![0.0; n * o];
        gemm(n, i, o, 1.0, self.value(x).data(), (i as isize, 1), self.value(w).data(), (o as isize, 1), 0.0, &mut out, (o as isize, 1));
        let rg = self.any_grad(&[x, w]);
        self.push(Tensor::new(vec![n, o], out), Op::MatMul(x, w), rg)
    }

    /// Adds a `[O]` bias to every row of a `[N, O]` tensor.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let (n, o) = dims2(self.value(x));
        assert_eq!(self.value(b).len(), o, "bias length");
        let bias = self.value(b).data().to_vec();
        let mut value = self.value(x).clone();
        for r in 0..n {
            for (v, bb) in value.data_mut()[r * o..(r + 1) * o].iter_mut().zip(&bias) {
                *v += bb;
            }
        }
        let rg = self.any_grad(&[x, b]);
        self.push(value, Op::AddBias(x, b), rg)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Var {
        let value = conv2d_forward(self.value(x), self.value(w), self.value(b));
        let rg = self.any_grad(&[x, w, b]);
        self.push(value, Op::Conv2d(x, w, b), rg)
    }

    /// Per-sample, per-channel affine: `y[n,c,..] = x[n,c,..] * scale[n,c] + shift[n,c]`.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Var {
        let (n, c, h, w) = dims4(self.value(x));
        assert_eq!(self.value(scale).shape(), &[n, c], "modulation scale shape");
        assert_eq!(self.value(shift).shape(), &[n, c], "modulation shift shape");
        let hw = h * w;
        let mut value = self.value(x).clone();
        let s = self.value(scale).data();
        let t = self.value(shift).data();
        for (i, chunk) in value.data_mut().chunks_mut(hw).enumerate() {
            let (si, ti) = (s[i], t[i]);
            for v in chunk {
                *v = *v * si + ti;
            }
        }
        let rg = self.any_grad(&[x, scale, shift]);
        self.push(value, Op::ChannelAffine(x, scale, shift), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.value(a).map(|x| if x >= 0.0 { x } else { slope * x });
        let rg = self.any_grad(&[a]);
        self.push(value, Op::LeakyRelu(a, slope), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Sigmoid(a), rg)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(softplus);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Softplus(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Square(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Log(a), rg)
    }

    /// Nearest-neighbour 2x upsampling of `[N, C, H, W]`.
    pub fn upsample2x(&mut self, a: Var) -> Var {
        let (n, c, h, w) = dims4(self.value(a));
        let src = self.value(a).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * c * h2 * w2];
        for p in 0..n * c {
            let s = &src[p * h * w..(p + 1) * h * w];
            let d = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
            for y in 0..h2 {
                for x in 0..w2 {
                    d[y * w2 + x] = s[(y / 2) * w + x / 2];
                }
            }
        }
        let rg = self.any_grad(&[a]);
        self.push(Tensor::new(vec![n, c, h2, w2], out), Op::Upsample2x(a), rg)
    }

    /// 2x2 average pooling of `[N, C, H, W]` (H, W even).
    pub fn avg_pool2x(&mut self, a: Var) -> Var {
        let (n, c, h, w) = dims4(self.value(a));
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2x needs even spatial size");
        let src = self.value(a).data();
        let (h2, w2) = (h / 2, w / 2);
        let mut out = vec![0.0; n * c * h2 * w2];
        for p in 0..n * c {
            let s = &src[p * h * w..(p + 1) * h * w];
            let d = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
            for y in 0..h2 {
                for x in 0..w2 {
                    let i = 2 * y * w + 2 * x;
                    d[y * w2 + x] = 0.25 * (s[i] + s[i + 1] + s[i + w] + s[i + w + 1]);
                }
            }
        }
        let rg = self.any_grad(&[a]);
        self.push(Tensor::new(vec![n, c, h2, w2], out), Op::AvgPool2x(a), rg)
    }

    /// `[N, C, H, W] -> [N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, a: Var) -> Var {
        let (n, c, h, w) = dims4(self.value(a));
        let hw = h * w;
        let out: Vec<f64> = self.value(a).data().chunks(hw).map(|ch| ch.iter().sum::<f64>() / hw as f64).collect();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::new(vec![n, c], out), Op::GlobalAvgPool(a), rg)
    }

    /// Per-sample concatenation along axis 1 (channels for images, features for rows).
    pub fn concat_features(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.value(parts[0]).batch();
        let rest = self.value(parts[0]).shape()[2..].to_vec();
        let mut axis = 0;
        for &p in parts {
            let s = self.value(p).shape();
            assert_eq!(s[0], n, "concat batch mismatch");
            assert_eq!(&s[2..], &rest[..], "concat trailing shape mismatch");
            axis += s[1];
        }
        let mut out = Vec::with_capacity(n * axis * rest.iter().product::<usize>());
        for s in 0..n {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(s));
            }
        }
        let mut shape = vec![n, axis];
        shape.extend(rest);
        let rg = self.any_grad(parts);
        self.push(Tensor::new(shape, out), Op::ConcatFeatures(parts.to_vec()), rg)
    }

    pub fn concat_batch(&mut self, parts: &[Var]) -> Var {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat_batch(&tensors);
        let rg = self.any_grad(parts);
        self.push(value, Op::ConcatBatch(parts.to_vec()), rg)
    }

    pub fn select(&mut self, a: Var, idx: &[usize]) -> Var {
        let value = self.value(a).select(idx);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Select(a, idx.to_vec()), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let value = self.value(a).clone().reshape(shape);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Reshape(a), rg)
    }

    /// Flattens everything after the batch axis.
    pub fn flatten(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let shape = vec![t.batch(), t.per_sample()];
        self.reshape(a, shape)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).mean());
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Mean(a), rg)
    }

    /// `[N, ...] -> [N]` mean over everything but the batch axis.
    pub fn mean_per_sample(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let k = t.per_sample();
        let out: Vec<f64> = t.data().chunks(k).map(|c| c.iter().sum::<f64>() / k as f64).collect();
        let n = out.len();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::new(vec![n], out), Op::MeanPerSample(a), rg)
    }

    /// Mean cross-entropy of `[N, K]` logits against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let (n, k) = dims2(self.value(logits));
        assert_eq!(labels.len(), n, "one label per row");
        let mut total = 0.0;
        for (row, &y) in self.value(logits).data().chunks(k).zip(labels) {
            assert!(y < k, "label out of range");
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        let rg = self.any_grad(&[logits]);
        self.push(Tensor::scalar(total / n as f64), Op::SoftmaxCrossEntropy(logits, labels.to_vec()), rg)
    }

    /// Reverse pass from a single-element root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward root must be a scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if !self.nodes[root.0].requires_grad {
            return Gradients { grads };
        }
        grads[root.0] = Some(Tensor::full(self.value(root).shape().to_vec(), 1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, g.map(|x| x * c));
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::MatMul(x, w) => {
                let (n, i) = dims2(self.value(*x));
                let (_, o) = dims2(self.value(*w));
                if self.wants(*x) {
                    let mut dx = vec![0.0; n * i];
                    gemm(n, o, i, 1.0, g.data(), (o as isize, 1), self.value(*w).data(), (1, o as isize), 0.0, &mut dx, (i as isize, 1));
                    self.accumulate(grads, *x, Tensor::new(vec![n, i], dx));
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0; i * o];
                    gemm(i, n, o, 1.0, self.value(*x).data(), (1, i as isize), g.data(), (o as isize, 1), 0.0, &mut dw, (o as isize, 1));
                    self.accumulate(grads, *w, Tensor::new(vec![i, o], dw));
                }
            }
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if self.wants(*b) {
                    let (n, o) = dims2(g);
                    let mut db = vec![0.0; o];
                    for r in 0..n {
                        for (d, v) in db.iter_mut().zip(&g.data()[r * o..(r + 1) * o]) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(vec![o], db));
                }
            }
            Op::Conv2d(x, w, b) => {
                let need_params = self.wants(*w) || self.wants(*b);
                let cg = conv2d_backward(self.value(*x), self.value(*w), g, self.wants(*x), need_params);
                if let Some(d) = cg.input {
                    self.accumulate(grads, *x, d);
                }
                if let Some(d) = cg.weight {
                    self.accumulate(grads, *w, d);
                }
                if let Some(d) = cg.bias {
                    self.accumulate(grads, *b, d);
                }
            }
            Op::ChannelAffine(x, scale, shift) => {
                let (_, _, h, w) = dims4(self.value(*x));
                let hw = h * w;
                if self.wants(*x) {
                    let s = self.value(*scale).data();
                    let mut dx = g.clone();
                    for (i, chunk) in dx.data_mut().chunks_mut(hw).enumerate() {
                        for v in chunk {
                            *v *= s[i];
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.wants(*scale) {
                    let xs = self.value(*x).data();
                    let ds: Vec<f64> = g
                        .data()
                        .chunks(hw)
                        .zip(xs.chunks(hw))
                        .map(|(gc, xc)| gc.iter().zip(xc).map(|(a, b)| a * b).sum())
                        .collect();
                    self.accumulate(grads, *scale, Tensor::new(self.value(*scale).shape().to_vec(), ds));
                }
                if self.wants(*shift) {
                    let dt: Vec<f64> = g.data().chunks(hw).map(|c| c.iter().sum()).collect();
                    self.accumulate(grads, *shift, Tensor::new(self.value(*shift).shape().to_vec(), dt));
                }
            }
            Op::LeakyRelu(a, slope) => {
                let slope = *slope;
                let d = g.zip_map(self.value(*a), |gv, x| if x >= 0.0 { gv } else { slope * gv });
                self.accumulate(grads, *a, d);
            }
            Op::Tanh(a) => {
                let d = g.zip_map(&node.value, |gv, y| gv * (1.0 - y * y));
                self.accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = g.zip_map(&node.value, |gv, y| gv * y * (1.0 - y));
                self.accumulate(grads, *a, d);
            }
            Op::Softplus(a) => {
                let d = g.zip_map(self.value(*a), |gv, x| gv * sigmoid(x));
                self.accumulate(grads, *a, d);
            }
            Op::Square(a) => {
                let d = g.zip_map(self.value(*a), |gv, x| 2.0 * gv * x);
                self.accumulate(grads, *a, d);
            }
            Op::Log(a) => {
                let d = g.zip_map(self.value(*a), |gv, x| gv / x);
                self.accumulate(grads, *a, d);
            }
            Op::Upsample2x(a) => {
                let (n, c, h, w) = dims4(self.value(*a));
                let (h2, w2) = (2 * h, 2 * w);
                let mut d = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    let gs = &g.data()[p * h2 * w2..(p + 1) * h2 * w2];
                    let ds = &mut d[p * h * w..(p + 1) * h * w];
                    for y in 0..h2 {
                        for x in 0..w2 {
                            ds[(y / 2) * w + x / 2] += gs[y * w2 + x];
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::new(vec![n, c, h, w], d));
            }
            Op::AvgPool2x(a) => {
                let (n, c, h, w) = dims4(self.value(*a));
                let (h2, w2) = (h / 2, w / 2);
                let mut d = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    let gs = &g.data()[p * h2 * w2..(p + 1) * h2 * w2];
                    let ds = &mut d[p * h * w..(p + 1) * h * w];
                    for y in 0..h {
                        for x in 0..w {
                            ds[y * w + x] = 0.25 * gs[(y / 2) * w2 + x / 2];
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::new(vec![n, c, h, w], d));
            }
            Op::GlobalAvgPool(a) => {
                let (n, c, h, w) = dims4(self.value(*a));
                let hw = h * w;
                let mut d = vec![0.0; n * c * hw];
                for (i, chunk) in d.chunks_mut(hw).enumerate() {
                    chunk.fill(g.data()[i] / hw as f64);
                }
                self.accumulate(grads, *a, Tensor::new(vec![n, c, h, w], d));
            }
            Op::ConcatFeatures(parts) => {
                let n = g.batch();
                let sizes: Vec<usize> = parts.iter().map(|&p| self.value(p).per_sample()).collect();
                let total: usize = sizes.iter().sum();
                let mut offset = 0;
                for (&p, &k) in parts.iter().zip(&sizes) {
                    if self.wants(p) {
                        let mut d = Vec::with_capacity(n * k);
                        for s in 0..n {
                            d.extend_from_slice(&g.data()[s * total + offset..s * total + offset + k]);
                        }
                        self.accumulate(grads, p, Tensor::new(self.value(p).shape().to_vec(), d));
                    }
                    offset += k;
                }
            }
            Op::ConcatBatch(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.wants(p) {
                        let d = g.data()[offset..offset + len].to_vec();
                        self.accumulate(grads, p, Tensor::new(self.value(p).shape().to_vec(), d));
                    }
                    offset += len;
                }
            }
            Op::Select(a, idx) => {
                let src = self.value(*a);
                let k = src.per_sample();
                let mut d = Tensor::zeros(src.shape().to_vec());
                for (j, &i) in idx.iter().enumerate() {
                    for (dv, gv) in d.data_mut()[i * k..(i + 1) * k].iter_mut().zip(&g.data()[j * k..(j + 1) * k]) {
                        *dv += gv;
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::Reshape(a) => {
                let d = g.clone().reshape(self.value(*a).shape().to_vec());
                self.accumulate(grads, *a, d);
            }
            Op::Sum(a) => {
                let gv = g.item();
                self.accumulate(grads, *a, Tensor::full(self.value(*a).shape().to_vec(), gv));
            }
            Op::Mean(a) => {
                let t = self.value(*a);
                let gv = g.item() / t.len() as f64;
                self.accumulate(grads, *a, Tensor::full(t.shape().to_vec(), gv));
            }
            Op::SoftmaxCrossEntropy(a, labels) => {
                let t = self.value(*a);
                let (n, k) = dims2(t);
                let scale = g.item() / n as f64;
                let mut d = Tensor::zeros(vec![n, k]);
                for (i, (row, &y)) in t.data().chunks(k).zip(labels).enumerate() {
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
                    for j in 0..k {
                        let p = (row[j] - m).exp() / z;
                        d.data_mut()[i * k + j] = scale * (p - if j == y { 1.0 } else { 0.0 });
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::MeanPerSample(a) => {
                let t = self.value(*a);
                let k = t.per_sample();
                let mut d = Tensor::zeros(t.shape().to_vec());
                for (i, chunk) in d.data_mut().chunks_mut(k).enumerate() {
                    chunk.fill(g.data()[i] / k as f64);
                }
                self.accumulate(grads, *a, d);
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seeded(shape: Vec<usize>, seed: u64) -> Tensor {
        let n: usize = shape.iter().product();
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let data = (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        Tensor::new(shape, data)
    }

    /// Checks d(loss)/d(input) of `build` against central differences.
    fn check(inputs: Vec<Tensor>, build: impl Fn(&mut Graph, &[Var]) -> Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let root = build(&mut g, &vars);
        let grads = g.backward(root);
        let h = 1e-6;
        for (k, t) in inputs.iter().enumerate() {
            let analytic = grads.get_or_zeros(vars[k], t);
            for i in 0..t.len() {
                let eval = |delta: f64| {
                    let mut g = Graph::new();
                    let vs: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, u)| {
                            let mut u = u.clone();
                            if j == k {
                                u.data_mut()[i] += delta;
                            }
                            g.leaf(u)
                        })
                        .collect();
                    let r = build(&mut g, &vs);
                    g.value(r).item()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = analytic.data()[i];
                assert!((fd - an).abs() <= 1e-6 * (1.0 + fd.abs()), "input {k} elem {i}: analytic {an} vs fd {fd}");
            }
        }
    }

    #[test]
    fn softmax_cross_entropy_gradient() {
        check(vec![seeded(vec![3, 4], 9)], |g, v| {
            let s = g.scale(v[0], 3.0);
            g.softmax_cross_entropy(s, &[0, 3, 1])
        });
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]));
        let l = g.softmax_cross_entropy(x, &[1]);
        assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn elementwise_ops() {
        check(vec![seeded(vec![2, 3], 1), seeded(vec![2, 3], 2)], |g, v| {
            let a = g.mul(v[0], v[1]);
            let b = g.sub(a, v[1]);
            let c = g.tanh(b);
            let d = g.softplus(c);
            let e = g.sigmoid(d);
            let f = g.square(e);
            let s = g.scale(f, 1.7);
            let t = g.add_scalar(s, 3.0);
            let l = g.log(t);
            let q = g.add(l, v[0]);
            g.sum(q)
        });
    }

    #[test]
    fn linear_ops() {
        check(vec![seeded(vec![3, 4], 3), seeded(vec![4, 2], 4), seeded(vec![2], 5)], |g, v| {
            let m = g.matmul(v[0], v[1]);
            let b = g.add_bias(m, v[2]);
            let r = g.leaky_relu(b, 0.2);
            let s = g.select(r, &[2, 0, 2]);
            let c = g.concat_features(&[s, s]);
            let cb = g.concat_batch(&[c, c]);
            let m = g.mean_per_sample(cb);
            let sq = g.square(m);
            g.mean(sq)
        });
    }

    #[test]
    fn spatial_ops() {
        check(
            vec![seeded(vec![2, 2, 4, 4], 6), seeded(vec![3, 2, 3, 3], 7), seeded(vec![3], 8), seeded(vec![2, 3], 9), seeded(vec![2, 3], 10)],
            |g, v| {
                let c = g.conv2d(v[0], v[1], v[2]);
                let m = g.channel_affine(c, v[3], v[4]);
                let u = g.upsample2x(m);
                let p = g.avg_pool2x(u);
                let p2 = g.avg_pool2x(p);
                let cat = g.concat_features(&[p2, p2]);
                let gp = g.global_avg_pool(cat);
                let f = g.flatten(p2);
                let all = g.concat_features(&[gp, f]);
                let t = g.tanh(all);
                g.sum(t)
            },
        );
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let w = g.constant(seeded(vec![2, 2], 1));
        let x = g.leaf(seeded(vec![1, 2], 2));
        let y = g.matmul(x, w);
        let l = g.sum(y);
        let grads = g.backward(l);
        assert!(grads.get(w).is_none());
        assert!(grads.get(x).is_some());
    }

    #[test]
    fn stable_softplus_and_sigmoid() {
        assert_eq!(softplus(-800.0), 0.0);
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0);
    }
}
