//! Reverse-mode automatic differentiation over a tape of tensor operations.
//!
//! A [`Graph`] borrows a [`ParamStore`], records every operation applied to
//! its nodes, and propagates gradients back to trainable parameters (and to
//! inputs created with [`Graph::input_with_grad`]). Frozen parameters and
//! constants never receive gradients, and no work is spent on branches that
//! cannot reach a node that needs one.

use crate::losses::{self, LossValue};
use crate::nn::kernels::{self, NormCache};
use crate::nn::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Conv { x: Var, w: Var, b: Option<Var> },
    ConvT { x: Var, w: Var, b: Var },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    ChannelScale { x: Var, s: Var },
    Concat { parts: Vec<Var>, widths: Vec<usize> },
    MaxPool { x: Var, arg: Vec<usize> },
    Resize(Var),
    GroupNorm { x: Var, gamma: Var, beta: Var, cache: NormCache<T> },
    GlobalAvgPool(Var),
    /// `out = scale[b,c] * xhat + shift[b,c]` with `xhat` the per-instance
    /// standardised input; `scale`/`shift` are constants of the pass.
    Restyle { x: Var, scale: Vec<T>, cache: NormCache<T> },
    WeightedSum { x: Var, weights: Tensor<T> },
    Loss { logits: Var, grad: Tensor<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
    last_loss: Option<LossValue>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    nodes: Vec<Option<Tensor<T>>>,
    param_vars: Vec<Option<Var>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.param_vars[id.0].and_then(|v| self.nodes[v.0].as_ref())
    }

    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].as_ref()
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self { params, nodes: Vec::new(), param_vars: vec![None; params.len()], last_loss: None }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Breakdown of the most recent loss node.
    pub fn last_loss(&self) -> Option<LossValue> {
        self.last_loss
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn input_with_grad(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(self.params.get(id).clone(), Op::Leaf, self.params.is_trainable(id));
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let out = kernels::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)));
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(out, Op::Conv { x, w, b }, rg)
    }

    pub fn conv_transpose2x2(&mut self, x: Var, w: Var, b: Var) -> Var {
        let out = kernels::conv_transpose2x2(self.value(x), self.value(w), self.value(b));
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(out, Op::ConvT { x, w, b }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::sigmoid);
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    /// Scale each `(b, c)` plane of `x` by `s[b, c, 0, 0]`.
    pub fn channel_scale(&mut self, x: Var, s: Var) -> Var {
        let out = kernels::channel_scale(self.value(x), self.value(s));
        let rg = self.rg(x) || self.rg(s);
        self.push(out, Op::ChannelScale { x, s }, rg)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let widths = values.iter().map(|t| t.dims4().1).collect();
        let out = kernels::concat_channels(&values);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::Concat { parts: parts.to_vec(), widths }, rg)
    }

    pub fn max_pool2(&mut self, x: Var) -> Var {
        let (out, arg) = kernels::max_pool2(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::MaxPool { x, arg }, rg)
    }

    pub fn resize(&mut self, x: Var, h: usize, w: usize) -> Var {
        let out = kernels::resize_bilinear(self.value(x), h, w);
        let rg = self.rg(x);
        self.push(out, Op::Resize(x), rg)
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let (_, _, h, w) = self.value(x).dims4();
        self.resize(x, 2 * h, 2 * w)
    }

    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var, eps: T) -> Var {
        let (out, cache) = kernels::group_norm(self.value(x), groups, self.value(gamma), self.value(beta), eps);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(out, Op::GroupNorm { x, gamma, beta, cache }, rg)
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let out = kernels::global_avg_pool(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::GlobalAvgPool(x), rg)
    }

    /// Record a per-instance re-styling whose forward value was computed by
    /// the caller. `mean`/`std` are the instance statistics of `x` and
    /// `scale` the per-`(b, c)` multiplier applied to the standardised input;
    /// the target statistics are constants of the pass.
    pub fn restyle(&mut self, x: Var, value: Tensor<T>, mean: &[T], std: &[T], scale: Vec<T>) -> Var {
        let xv = self.value(x);
        let (_, _, h, w) = xv.dims4();
        let hw = h * w;
        let mut xhat = Vec::with_capacity(xv.numel());
        for (i, plane) in xv.data().chunks(hw).enumerate() {
            xhat.extend(plane.iter().map(|&v| (v - mean[i]) / std[i]));
        }
        let inv_std = std.iter().map(|&s| T::one() / s).collect();
        let cache = NormCache { xhat, inv_std, group_len: hw };
        let rg = self.rg(x);
        self.push(value, Op::Restyle { x, scale, cache }, rg)
    }

    /// `sum_i x_i * weights_i`, a scalar probe for gradient checks.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor<T>) -> Var {
        assert_eq!(self.value(x).shape(), weights.shape(), "weighted_sum: shape mismatch");
        let s = self.value(x).data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum();
        let rg = self.rg(x);
        self.push(Tensor::full(&[1], s), Op::WeightedSum { x, weights }, rg)
    }

    /// Combined cross-entropy + Dice loss on raw logits `(B, 1, H, W)` against
    /// a binary target of the same shape.
    pub fn bce_dice_loss(&mut self, logits: Var, target: &Tensor<T>, cfg: &losses::LossConfig) -> Var {
        let probs = self.value(logits).map(kernels::sigmoid);
        let (value, dprobs) = losses::batch_combined_loss_with_grad(&probs, target, cfg);
        let grad = Tensor::from_fn(probs.shape(), |i| {
            let p = probs.data()[i];
            dprobs.data()[i] * p * (T::one() - p)
        });
        self.last_loss = Some(value);
        let rg = self.rg(logits);
        self.push(Tensor::full(&[1], T::of(value.total)), Op::Loss { logits, grad }, rg)
    }

    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(self.value(root).numel(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), T::one()));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let send = |v: Var, t: Tensor<T>, grads: &mut Vec<Option<Tensor<T>>>| {
                if !self.rg(v) {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv { x, w, b } => {
                    let cg = kernels::conv2d_backward(self.value(*x), self.value(*w), &g, self.rg(*x));
                    if let Some(dx) = cg.input {
                        send(*x, dx, &mut grads);
                    }
                    send(*w, cg.weight, &mut grads);
                    if let Some(b) = b {
                        send(*b, cg.bias, &mut grads);
                    }
                }
                Op::ConvT { x, w, b } => {
                    let cg = kernels::conv_transpose2x2_backward(self.value(*x), self.value(*w), &g, self.rg(*x));
                    if let Some(dx) = cg.input {
                        send(*x, dx, &mut grads);
                    }
                    send(*w, cg.weight, &mut grads);
                    send(*b, cg.bias, &mut grads);
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let dx = Tensor::from_fn(xv.shape(), |i| {
                        if xv.data()[i] > T::zero() {
                            g.data()[i]
                        } else {
                            T::zero()
                        }
                    });
                    send(*x, dx, &mut grads);
                }
                Op::Sigmoid(x) => {
                    let dx = Tensor::from_fn(node.value.shape(), |i| {
                        let s = node.value.data()[i];
                        g.data()[i] * s * (T::one() - s)
                    });
                    send(*x, dx, &mut grads);
                }
                Op::Add(a, b) => {
                    send(*a, g.clone(), &mut grads);
                    send(*b, g, &mut grads);
                }
                Op::ChannelScale { x, s } => {
                    let xv = self.value(*x);
                    let (_, _, h, w) = xv.dims4();
                    if self.rg(*s) {
                        let ds: Vec<T> = g
                            .data()
                            .chunks(h * w)
                            .zip(xv.data().chunks(h * w))
                            .map(|(gp, xp)| gp.iter().zip(xp).map(|(&a, &b)| a * b).sum())
                            .collect();
                        let ds = Tensor::from_vec(self.value(*s).shape(), ds).expect("scale grad shape");
                        send(*s, ds, &mut grads);
                    }
                    if self.rg(*x) {
                        send(*x, kernels::channel_scale(&g, self.value(*s)), &mut grads);
                    }
                }
                Op::Concat { parts, widths } => {
                    for (p, d) in parts.iter().zip(kernels::split_channels(&g, widths)) {
                        send(*p, d, &mut grads);
                    }
                }
                Op::MaxPool { x, arg } => {
                    send(*x, kernels::max_pool2_backward(self.value(*x).shape(), arg, &g), &mut grads);
                }
                Op::Resize(x) => {
                    send(*x, kernels::resize_bilinear_backward(self.value(*x).shape(), &g), &mut grads);
                }
                Op::GroupNorm { x, gamma, beta, cache } => {
                    let (dx, dgamma, dbeta) =
                        kernels::group_norm_backward(self.value(*x).shape(), cache, self.value(*gamma), &g);
                    send(*x, dx, &mut grads);
                    send(*gamma, dgamma, &mut grads);
                    send(*beta, dbeta, &mut grads);
                }
                Op::GlobalAvgPool(x) => {
                    let (b, c, h, w) = self.value(*x).dims4();
                    let n = T::of((h * w) as f64);
                    let dx = Tensor::from_fn(&[b, c, h, w], |i| g.data()[i / (h * w)] / n);
                    send(*x, dx, &mut grads);
                }
                Op::Restyle { x, scale, cache } => {
                    let hw = cache.group_len;
                    let dxhat: Vec<T> = g.data().iter().enumerate().map(|(i, &v)| v * scale[i / hw]).collect();
                    let dx = kernels::normalize_groups_backward(cache, &dxhat);
                    send(*x, Tensor::from_vec(self.value(*x).shape(), dx).expect("restyle grad"), &mut grads);
                }
                Op::WeightedSum { x, weights } => {
                    send(*x, weights.map(|w| w * g.data()[0]), &mut grads);
                }
                Op::Loss { logits, grad } => {
                    send(*logits, grad.map(|v| v * g.data()[0]), &mut grads);
                }
            }
        }
        // keep gradients for leaves only
        for (i, n) in self.nodes.iter().enumerate() {
            if !matches!(n.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Gradients { nodes: grads, param_vars: self.param_vars.clone() }
    }
}
