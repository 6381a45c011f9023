//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in execution order; [`Graph::backward`]
//! walks that record in exact reverse order, so a node's adjoint is complete
//! before it is propagated to its inputs. Fan-out accumulates additively.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{ensure, invalid, Result};
use crate::losses;
use crate::nn::{ParamId, ParamStore};
use crate::tensor::{channel_moments, conv2d_backward, conv2d_forward, ConvGeometry, ConvScratch, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Where batch normalization takes its statistics from.
#[derive(Clone, Copy, Debug)]
pub enum NormStats<'a> {
    /// Normalize by the statistics of the current batch.
    Batch,
    /// Normalize by fixed running statistics.
    Running { mean: &'a [f64], var: &'a [f64] },
}

/// Statistics observed by a train-mode batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance of the batch.
    pub var: Vec<f64>,
    /// Elements per channel (`N·H·W`).
    pub count: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { input: Var, kernel: Var, bias: Option<Var>, geom: ConvGeometry },
    BatchNorm { input: Var, gamma: Var, beta: Var, x_hat: Vec<f64>, inv_std: Vec<f64>, batch: bool },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Upsample2x(Var),
    Concat(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MeanAll(Var),
    SumAll(Var),
    SelectBatch { input: Var, indices: Vec<usize> },
    WeightedSum(Vec<(Var, f64)>),
    Bce { pred: Var, target: Tensor },
    Dice { pred: Var, target: Tensor, eps: f64 },
    SymKl(Var, Var),
    Mse { pred: Var, target: Tensor },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// The recording tape. Values are immutable once recorded.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<Option<Var>>,
    scratch: ConvScratch,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite value produced by {op:?}");
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn grad_flag(&self, inputs: &[Var]) -> bool {
        inputs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient (inputs, targets).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Inserts a stored parameter; repeated calls return the same node so a
    /// parameter has exactly one storage slot per graph.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let i = id.index();
        if self.params.len() <= i {
            self.params.resize(i + 1, None);
        }
        if let Some(v) = self.params[i] {
            return v;
        }
        let v = self.leaf(store.get(id).clone());
        self.params[i] = Some(v);
        v
    }

    /// Node holding parameter `id`, if it was used in this graph.
    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.params.get(id.index()).copied().flatten()
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeometry::new(self.value(input).shape(), self.value(kernel).shape(), stride, padding)?;
        if let Some(b) = bias {
            ensure!(
                self.value(b).numel() == geom.out_channels,
                "conv bias has {} values for {} output channels",
                self.value(b).numel(),
                geom.out_channels
            );
        }
        let out = conv2d_forward(
            &geom,
            self.nodes[input.0].value.data(),
            self.nodes[kernel.0].value.data(),
            bias.map(|b| self.nodes[b.0].value.data()),
            &mut self.scratch,
        );
        let value = Tensor::new(geom.output_shape(), out)?;
        let mut deps = vec![input, kernel];
        deps.extend(bias);
        let rg = self.grad_flag(&deps);
        Ok(self.push(value, Op::Conv2d { input, kernel, bias, geom }, rg))
    }

    /// Per-channel normalization of an NCHW tensor followed by `γ·x̂ + β`.
    /// Returns the observed batch statistics when normalizing by batch.
    pub fn batchnorm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        stats: NormStats<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let [n, c, h, w] = self.value(input).dims4()?;
        ensure!(
            self.value(gamma).numel() == c && self.value(beta).numel() == c,
            "batchnorm affine parameters must have {c} entries"
        );
        let plane = h * w;
        let (mean, var, observed) = match stats {
            NormStats::Batch => {
                ensure!(n * plane >= 2, "batch normalization needs at least 2 values per channel in train mode");
                let (mean, var) = channel_moments(self.value(input).data(), n, c, plane);
                let observed = BatchStats { mean: mean.clone(), var: var.clone(), count: n * plane };
                (mean, var, Some(observed))
            }
            NormStats::Running { mean, var } => {
                ensure!(mean.len() == c && var.len() == c, "running statistics must have {c} entries");
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / libm::sqrt(v + eps)).collect();
        let x = self.value(input).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut x_hat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * plane;
                for i in base..base + plane {
                    let xh = (x[i] - mean[ch]) * inv_std[ch];
                    x_hat[i] = xh;
                    out[i] = g[ch] * xh + b[ch];
                }
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        let rg = self.grad_flag(&[input, gamma, beta]);
        let batch = observed.is_some();
        let v = self.push(value, Op::BatchNorm { input, gamma, beta, x_hat, inv_std, batch }, rg);
        Ok((v, observed))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).map(f);
        let rg = self.grad_flag(&[x]);
        self.push(value, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, libm::tanh, Op::Tanh(x))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.unary(x, |v| v * factor, Op::Scale(x, factor))
    }

    /// Nearest-neighbour 2x upsampling of an NCHW tensor.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        let src = self.value(x).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * c * h2 * w2];
        for p in 0..n * c {
            for y in 0..h2 {
                let src_row = &src[(p * h + y / 2) * w..(p * h + y / 2 + 1) * w];
                let dst_row = &mut out[(p * h2 + y) * w2..(p * h2 + y + 1) * w2];
                for (xo, d) in dst_row.iter_mut().enumerate() {
                    *d = src_row[xo / 2];
                }
            }
        }
        let value = Tensor::new(vec![n, c, h2, w2], out)?;
        let rg = self.grad_flag(&[x]);
        Ok(self.push(value, Op::Upsample2x(x), rg))
    }

    /// Concatenates two NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [n, ca, h, w] = self.value(a).dims4()?;
        let [nb, cb, hb, wb] = self.value(b).dims4()?;
        ensure!(
            (n, h, w) == (nb, hb, wb),
            "concat needs matching N, H, W: {:?} vs {:?}",
            self.value(a).shape(),
            self.value(b).shape()
        );
        let plane = h * w;
        let mut out = Vec::with_capacity(n * (ca + cb) * plane);
        for s in 0..n {
            out.extend_from_slice(&self.value(a).data()[s * ca * plane..(s + 1) * ca * plane]);
            out.extend_from_slice(&self.value(b).data()[s * cb * plane..(s + 1) * cb * plane]);
        }
        let value = Tensor::new(vec![n, ca + cb, h, w], out)?;
        let rg = self.grad_flag(&[a, b]);
        Ok(self.push(value, Op::Concat(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.grad_flag(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.grad_flag(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / t.numel() as f64);
        let rg = self.grad_flag(&[x]);
        self.push(value, Op::MeanAll(x), rg)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.grad_flag(&[x]);
        self.push(value, Op::SumAll(x), rg)
    }

    /// Gathers entries of the batch (first) axis.
    pub fn select_batch(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let value = self.value(x).select_batch(indices)?;
        let rg = self.grad_flag(&[x]);
        Ok(self.push(value, Op::SelectBatch { input: x, indices: indices.to_vec() }, rg))
    }

    /// `Σ wᵢ·xᵢ` over equally shaped terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        ensure!(!terms.is_empty(), "weighted sum needs at least one term");
        let shape = self.value(terms[0].0).shape().to_vec();
        let mut acc = Tensor::zeros(&shape);
        for &(v, w) in terms {
            let t = self.value(v);
            ensure!(t.shape() == &shape[..], "weighted sum terms must share a shape");
            for (a, x) in acc.data_mut().iter_mut().zip(t.data()) {
                *a += w * x;
            }
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let rg = self.grad_flag(&vars);
        Ok(self.push(acc, Op::WeightedSum(terms.to_vec()), rg))
    }

    /// Mean binary cross-entropy against a fixed target.
    pub fn bce(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let value = Tensor::scalar(losses::ce_loss(self.value(pred), target)?);
        let rg = self.grad_flag(&[pred]);
        Ok(self.push(value, Op::Bce { pred, target: target.clone() }, rg))
    }

    /// Per-class soft Dice loss against a fixed target.
    pub fn dice(&mut self, pred: Var, target: &Tensor, eps: f64) -> Result<Var> {
        let value = Tensor::scalar(losses::dice_loss(self.value(pred), target, eps)?);
        let rg = self.grad_flag(&[pred]);
        Ok(self.push(value, Op::Dice { pred, target: target.clone(), eps }, rg))
    }

    /// Symmetric binary KL divergence between two probability maps.
    pub fn sym_kl(&mut self, p: Var, q: Var) -> Result<Var> {
        let value = Tensor::scalar(losses::kl_consistency_loss(self.value(p), self.value(q))?);
        let rg = self.grad_flag(&[p, q]);
        Ok(self.push(value, Op::SymKl(p, q), rg))
    }

    /// Mean squared error against a fixed target.
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let value = Tensor::scalar(losses::restoration_loss(self.value(pred), target)?);
        let rg = self.grad_flag(&[pred]);
        Ok(self.push(value, Op::Mse { pred, target: target.clone() }, rg))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        ensure!(self.value(loss).is_scalar(), "backward needs a scalar loss, got shape {:?}", self.value(loss).shape());
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        let mut scratch = ConvScratch::default();
        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(node, &dy, &mut grads, &mut scratch)?;
            }
            grads[idx] = Some(dy);
        }
        Ok(Gradients { grads, params: self.params.clone() })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn with_shape_of(&self, v: Var, data: Vec<f64>) -> Tensor {
        Tensor::new(self.value(v).shape().to_vec(), data).expect("adjoint shape matches its node")
    }

    fn propagate(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>], scratch: &mut ConvScratch) -> Result<()> {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, bias, geom } => {
                let need_input = self.nodes[input.0].requires_grad;
                let g = conv2d_backward(geom, self.value(*input).data(), self.value(*kernel).data(), dy.data(), need_input, scratch);
                if let Some(dx) = g.input {
                    self.accumulate(grads, *input, self.with_shape_of(*input, dx));
                }
                self.accumulate(grads, *kernel, self.with_shape_of(*kernel, g.kernel));
                if let Some(b) = bias {
                    self.accumulate(grads, *b, self.with_shape_of(*b, g.bias));
                }
            }
            Op::BatchNorm { input, gamma, beta, x_hat, inv_std, batch } => {
                let [n, c, h, w] = out.dims4()?;
                let plane = h * w;
                let m = (n * plane) as f64;
                let gv = self.value(*gamma).data();
                let d = dy.data();
                let mut d_gamma = vec![0.0; c];
                let mut d_beta = vec![0.0; c];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * plane;
                        for i in base..base + plane {
                            d_gamma[ch] += d[i] * x_hat[i];
                            d_beta[ch] += d[i];
                        }
                    }
                }
                if self.nodes[input.0].requires_grad {
                    let mut dx = vec![0.0; d.len()];
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * plane;
                            let k = gv[ch] * inv_std[ch];
                            for i in base..base + plane {
                                dx[i] = if *batch {
                                    k / m * (m * d[i] - d_beta[ch] - x_hat[i] * d_gamma[ch])
                                } else {
                                    k * d[i]
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *input, self.with_shape_of(*input, dx));
                }
                self.accumulate(grads, *gamma, self.with_shape_of(*gamma, d_gamma));
                self.accumulate(grads, *beta, self.with_shape_of(*beta, d_beta));
            }
            Op::Relu(x) => {
                let g = self.value(*x).zip_map(dy, |v, d| if v > 0.0 { d } else { 0.0 })?;
                self.accumulate(grads, *x, g);
            }
            Op::Sigmoid(x) => {
                let g = out.zip_map(dy, |s, d| d * s * (1.0 - s))?;
                self.accumulate(grads, *x, g);
            }
            Op::Tanh(x) => {
                let g = out.zip_map(dy, |t, d| d * (1.0 - t * t))?;
                self.accumulate(grads, *x, g);
            }
            Op::Scale(x, f) => self.accumulate(grads, *x, dy.map(|d| d * f)),
            Op::Upsample2x(x) => {
                let [n, c, h, w] = self.value(*x).dims4()?;
                let (h2, w2) = (2 * h, 2 * w);
                let mut g = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    for y in 0..h2 {
                        for xo in 0..w2 {
                            g[(p * h + y / 2) * w + xo / 2] += dy.data()[(p * h2 + y) * w2 + xo];
                        }
                    }
                }
                self.accumulate(grads, *x, self.with_shape_of(*x, g));
            }
            Op::Concat(a, b) => {
                let [n, ca, h, w] = self.value(*a).dims4()?;
                let cb = self.value(*b).shape()[1];
                let plane = h * w;
                let (mut ga, mut gb) = (Vec::with_capacity(n * ca * plane), Vec::with_capacity(n * cb * plane));
                for chunk in dy.data().chunks_exact((ca + cb) * plane) {
                    ga.extend_from_slice(&chunk[..ca * plane]);
                    gb.extend_from_slice(&chunk[ca * plane..]);
                }
                self.accumulate(grads, *a, self.with_shape_of(*a, ga));
                self.accumulate(grads, *b, self.with_shape_of(*b, gb));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, dy.clone());
            }
            Op::Mul(a, b) => {
                let ga = dy.zip_map(self.value(*b), |d, y| d * y)?;
                let gb = dy.zip_map(self.value(*a), |d, x| d * x)?;
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::MeanAll(x) => {
                let t = self.value(*x);
                let g = Tensor::full(t.shape(), dy.item() / t.numel() as f64);
                self.accumulate(grads, *x, g);
            }
            Op::SumAll(x) => {
                let g = Tensor::full(self.value(*x).shape(), dy.item());
                self.accumulate(grads, *x, g);
            }
            Op::SelectBatch { input, indices } => {
                let t = self.value(*input);
                let stride = t.numel() / t.shape()[0];
                let mut g = Tensor::zeros(t.shape());
                for (row, &i) in indices.iter().enumerate() {
                    let src = &dy.data()[row * stride..(row + 1) * stride];
                    for (a, b) in g.data_mut()[i * stride..(i + 1) * stride].iter_mut().zip(src) {
                        *a += b;
                    }
                }
                self.accumulate(grads, *input, g);
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    self.accumulate(grads, v, dy.map(|d| d * w));
                }
            }
            Op::Bce { pred, target } => {
                let g = losses::ce_loss_grad(self.value(*pred), target, dy.item())?;
                self.accumulate(grads, *pred, g);
            }
            Op::Dice { pred, target, eps } => {
                let g = losses::dice_loss_grad(self.value(*pred), target, *eps, dy.item())?;
                self.accumulate(grads, *pred, g);
            }
            Op::SymKl(p, q) => {
                let (gp, gq) = losses::kl_consistency_loss_grad(self.value(*p), self.value(*q), dy.item())?;
                self.accumulate(grads, *p, gp);
                self.accumulate(grads, *q, gq);
            }
            Op::Mse { pred, target } => {
                let g = losses::restoration_loss_grad(self.value(*pred), target, dy.item())?;
                self.accumulate(grads, *pred, g);
            }
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + libm::exp(-z))
    } else {
        let e = libm::exp(z);
        e / (1.0 + e)
    }
}

/// Adjoints produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<Option<Var>>,
}

impl Gradients {
    /// Adjoint of `v`; `None` when no gradient reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Adjoint of a stored parameter, if it took part in the graph.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        let v = self.params.get(id.index()).copied().flatten()?;
        self.get(v)
    }

    pub fn wrt(&self, v: Var) -> Result<&Tensor> {
        self.get(v).ok_or_else(|| invalid!("no gradient reached node {}", v.0))
    }
}
