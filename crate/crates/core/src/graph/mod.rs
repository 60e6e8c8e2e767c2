//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node to the tape, so node indices are already a
//! topological order. [`Graph::backward`] walks that order in reverse, visiting
//! each node once, and accumulates into the gradient buffers of tracked leaves.

mod conv;
mod norm;
mod pool;
mod shape;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use conv::conv_output_extent;
pub use norm::BatchStats;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    Powf(Var, F),
    Log(Var),
    ClampMin(Var, F),
    Relu(Var),
    Sigmoid(Var),
    Sum(Var),
    SumPerChannel(Var),
    SoftmaxChannel(Var),
    Conv2d { input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize },
    MaxPool { input: Var, argmax: Vec<usize> },
    AvgPool { input: Var, k: usize },
    BlurPool(Var),
    Upsample2x(Var),
    GlobalAvgPool(Var),
    BatchNorm { input: Var, gamma: Var, beta: Var, xhat: Vec<F>, inv_std: Vec<F> },
    BatchNormEval { input: Var, gamma: Var, beta: Var, mean: Vec<F>, inv_std: Vec<F> },
    ConcatChannels(Vec<Var>),
    MulChannel(Var, Var),
    MulSpatial(Var, Var),
    ChannelMean(Var),
    ChannelMax { input: Var, argmax: Vec<usize> },
}

pub(crate) struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
    grad: Option<Tensor<F>>,
}

/// Upstream gradient buffers indexed by node, lazily allocated.
pub(crate) struct Grads<'a, F> {
    nodes: &'a [Node<F>],
    bufs: &'a mut [Option<Vec<F>>],
}

impl<F: Scalar> Grads<'_, F> {
    /// Buffer for `v`, or `None` when `v` does not need a gradient.
    pub(crate) fn slot(&mut self, v: Var) -> Option<&mut [F]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let len = node.value.numel();
        Some(self.bufs[v.0].get_or_insert_with(|| vec![F::zero(); len]))
    }
}

/// Recording of executed operations.
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a leaf; tracked leaves receive gradients on [`backward`](Self::backward).
    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.push_node(value, Op::Leaf, requires_grad)
    }

    /// Untracked leaf.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a tracked leaf, present after a backward pass.
    pub fn grad(&self, v: Var) -> Option<&Tensor<F>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push_node(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_node(value, op, rg)
    }

    /// Back-propagates from a scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", root.value.shape())));
        }
        if !root.requires_grad {
            return Err(Error::Contract("loss does not depend on any tracked leaf".into()));
        }
        let mut bufs: Vec<Option<Vec<F>>> = Vec::new();
        bufs.resize_with(loss.0 + 1, || None);
        bufs[loss.0] = Some(vec![F::one()]);
        let mut leaf_grads = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(gout) = bufs[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                leaf_grads.push((i, gout));
                continue;
            }
            let mut grads = Grads { nodes: &self.nodes, bufs: &mut bufs };
            self.backprop(i, &gout, &mut grads);
        }
        for (i, g) in leaf_grads {
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(&g) {
                        *a += *b;
                    }
                }
                None => node.grad = Some(Tensor::new(node.value.shape(), g)?),
            }
        }
        for node in &mut self.nodes[..=loss.0] {
            if node.requires_grad && matches!(node.op, Op::Leaf) && node.grad.is_none() {
                node.grad = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(())
    }

    fn backprop(&self, i: usize, gout: &[F], grads: &mut Grads<'_, F>) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(g) = grads.slot(v) {
                        add_into(g, gout);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(g) = grads.slot(*a) {
                    add_into(g, gout);
                }
                if let Some(g) = grads.slot(*b) {
                    g.iter_mut().zip(gout).for_each(|(g, &d)| *g -= d);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(g) = grads.slot(*a) {
                    for ((g, &d), &o) in g.iter_mut().zip(gout).zip(bv) {
                        *g += d * o;
                    }
                }
                if let Some(g) = grads.slot(*b) {
                    for ((g, &d), &o) in g.iter_mut().zip(gout).zip(av) {
                        *g += d * o;
                    }
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b).data();
                if let Some(g) = grads.slot(*a) {
                    for ((g, &d), &den) in g.iter_mut().zip(gout).zip(bv) {
                        *g += d / den;
                    }
                }
                if let Some(g) = grads.slot(*b) {
                    for (((g, &d), &den), &q) in g.iter_mut().zip(gout).zip(bv).zip(y) {
                        *g -= d * q / den;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(g) = grads.slot(*a) {
                    g.iter_mut().zip(gout).for_each(|(g, &d)| *g += d * *s);
                }
            }
            Op::AddScalar(a) => {
                if let Some(g) = grads.slot(*a) {
                    add_into(g, gout);
                }
            }
            Op::Powf(a, p) => {
                let x = self.value(*a).data();
                let pm1 = *p - F::one();
                if let Some(g) = grads.slot(*a) {
                    for ((g, &d), &x) in g.iter_mut().zip(gout).zip(x) {
                        if x > F::zero() {
                            *g += d * *p * x.powf(pm1);
                        }
                    }
                }
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                if let Some(g) = grads.slot(*a) {
                    g.iter_mut().zip(gout).zip(x).for_each(|((g, &d), &x)| *g += d / x);
                }
            }
            Op::ClampMin(a, lo) => {
                let x = self.value(*a).data();
                if let Some(g) = grads.slot(*a) {
                    for ((g, &d), &x) in g.iter_mut().zip(gout).zip(x) {
                        if x >= *lo {
                            *g += d;
                        }
                    }
                }
            }
            Op::Relu(a) => {
                if let Some(g) = grads.slot(*a) {
                    for ((g, &d), &y) in g.iter_mut().zip(gout).zip(y) {
                        if y > F::zero() {
                            *g += d;
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(g) = grads.slot(*a) {
                    for ((g, &d), &y) in g.iter_mut().zip(gout).zip(y) {
                        *g += d * y * (F::one() - y);
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(g) = grads.slot(*a) {
                    g.iter_mut().for_each(|g| *g += gout[0]);
                }
            }
            Op::SumPerChannel(a) => self.sum_per_channel_backward(*a, gout, grads),
            Op::SoftmaxChannel(a) => self.softmax_backward(*a, y, gout, grads),
            Op::Conv2d { input, weight, bias, stride, padding } => {
                self.conv2d_backward(*input, *weight, *bias, *stride, *padding, gout, grads)
            }
            Op::MaxPool { input, argmax, .. } => {
                if let Some(g) = grads.slot(*input) {
                    for (&src, &d) in argmax.iter().zip(gout) {
                        g[src] += d;
                    }
                }
            }
            Op::AvgPool { input, k } => self.avgpool_backward(*input, *k, gout, grads),
            Op::BlurPool(a) => self.blurpool_backward(*a, gout, grads),
            Op::Upsample2x(a) => self.upsample_backward(*a, gout, grads),
            Op::GlobalAvgPool(a) => self.gap_backward(*a, gout, grads),
            Op::BatchNorm { input, gamma, beta, xhat, inv_std } => {
                self.batchnorm_backward(*input, *gamma, *beta, xhat, inv_std, gout, grads)
            }
            Op::BatchNormEval { input, gamma, beta, mean, inv_std } => {
                self.batchnorm_eval_backward(*input, *gamma, *beta, mean, inv_std, gout, grads)
            }
            Op::ConcatChannels(parts) => self.concat_backward(parts, gout, grads),
            Op::MulChannel(x, gate) => self.mul_channel_backward(*x, *gate, gout, grads),
            Op::MulSpatial(x, gate) => self.mul_spatial_backward(*x, *gate, gout, grads),
            Op::ChannelMean(a) => self.channel_mean_backward(*a, gout, grads),
            Op::ChannelMax { input, argmax } => {
                if let Some(g) = grads.slot(*input) {
                    for (&src, &d) in argmax.iter().zip(gout) {
                        g[src] += d;
                    }
                }
            }
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dim(op, format!("operand shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(F, F) -> F, rec: Op<F>) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let va = self.value(a);
        let data = va.data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape(), data)?;
        Ok(self.push(out, rec, &[a, b]))
    }

    fn unary(&mut self, a: Var, f: impl Fn(F) -> F, rec: Op<F>) -> Var {
        let out = self.value(a).map(f);
        self.push(out, rec, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: F) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    /// `x^p` for non-negative `x`; the derivative is taken as zero at `x = 0`.
    pub fn powf(&mut self, a: Var, p: F) -> Var {
        self.unary(a, |x| if x > F::zero() { x.powf(p) } else { F::zero() }, Op::Powf(a, p))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.ln(), Op::Log(a))
    }

    pub fn clamp_min(&mut self, a: Var, lo: F) -> Var {
        self.unary(a, |x| x.max(lo), Op::ClampMin(a, lo))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(F::zero()), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = F::lit(self.value(a).numel() as f64);
        let s = self.sum(a);
        self.scale(s, F::one() / n)
    }
}

#[inline]
pub(crate) fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

#[inline]
pub(crate) fn add_into<F: Scalar>(dst: &mut [F], src: &[F]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}
