use std::collections::BTreeMap;

use super::params::{ParamGrads, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{self, s, sigmoid_scalar, Scalar, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T: Scalar> {
    Constant,
    Param(String),
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        padding: usize,
    },
    AddChannelBias {
        x: Var,
        b: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Tensor<T>),
    Scale(Var, T),
    Silu(Var),
    Sigmoid(Var),
    Abs(Var),
    Matmul(Var, Var),
    MatmulNt(Var, Var),
    Transpose(Var),
    Reshape(Var),
    L2NormalizeRows {
        x: Var,
        eps: T,
    },
    MaskedSoftmax {
        x: Var,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    GroupedAggregate {
        features: Var,
        weights: Var,
    },
    Sum(Var),
    Mean(Var),
    BceWithLogits {
        x: Var,
        targets: Tensor<T>,
    },
}

#[derive(Debug, Clone)]
struct Node<T: Scalar> {
    op: Op<T>,
    value: Tensor<T>,
    needs_grad: bool,
}

/// A tape of tensor operations, recorded in topological order.
///
/// Nodes are appended as operations execute, so a node's inputs always have
/// smaller indices. [`Graph::gradients`] walks the tape once in reverse.
#[derive(Debug, Clone)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    no_grad: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            no_grad: false,
        }
    }

    /// A graph on which every parameter is recorded as a constant.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            no_grad: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { op, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Constant, value, false)
    }

    /// Records parameter `name` from `store`. Frozen parameters (and every
    /// parameter of an inference graph) enter as constants.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        let entry = store.entry(name)?;
        if self.no_grad || entry.frozen {
            Ok(self.constant(entry.value.clone()))
        } else {
            Ok(self.push(Op::Param(name.to_string()), entry.value.clone(), true))
        }
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let value = tensor::conv2d(self.value(x), self.value(w), stride, padding)?;
        let ng = self.any_grad(&[x, w]);
        Ok(self.push(Op::Conv2d { x, w, stride, padding }, value, ng))
    }

    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let value = tensor::add_channel_bias(self.value(x), self.value(b))?;
        let ng = self.any_grad(&[x, b]);
        Ok(self.push(Op::AddChannelBias { x, b }, value, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::add(self.value(a), self.value(b))?;
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(Op::Add(a, b), value, ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::sub(self.value(a), self.value(b))?;
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(Op::Sub(a, b), value, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::mul(self.value(a), self.value(b))?;
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(Op::Mul(a, b), value, ng))
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, a: Var, c: Tensor<T>) -> Result<Var> {
        let value = tensor::mul(self.value(a), &c)?;
        let ng = self.any_grad(&[a]);
        Ok(self.push(Op::MulConst(a, c), value, ng))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        let value = tensor::scale(self.value(a), factor)?;
        let ng = self.any_grad(&[a]);
        Ok(self.push(Op::Scale(a, factor), value, ng))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = tensor::silu(self.value(a));
        let ng = self.any_grad(&[a]);
        self.push(Op::Silu(a), value, ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = tensor::sigmoid(self.value(a));
        let ng = self.any_grad(&[a]);
        self.push(Op::Sigmoid(a), value, ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(T::abs);
        let ng = self.any_grad(&[a]);
        self.push(Op::Abs(a), value, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::matmul(self.value(a), self.value(b))?;
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(Op::Matmul(a, b), value, ng))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::matmul_nt(self.value(a), self.value(b))?;
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(Op::MatmulNt(a, b), value, ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = tensor::transpose2d(self.value(a))?;
        let ng = self.any_grad(&[a]);
        Ok(self.push(Op::Transpose(a), value, ng))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let ng = self.any_grad(&[a]);
        Ok(self.push(Op::Reshape(a), value, ng))
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let eps = s(tensor::NORM_EPS);
        let value = tensor::l2_normalize_rows(self.value(x), eps)?;
        let ng = self.any_grad(&[x]);
        Ok(self.push(Op::L2NormalizeRows { x, eps }, value, ng))
    }

    /// Softmax over `region` cells per channel. The region is constant.
    pub fn masked_softmax(&mut self, x: Var, region: &Tensor<T>) -> Result<Var> {
        let value = tensor::masked_softmax(self.value(x), region)?;
        let ng = self.any_grad(&[x]);
        Ok(self.push(Op::MaskedSoftmax { x }, value, ng))
    }

    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 1 {
            return Ok(x);
        }
        let value = tensor::upsample_nearest(self.value(x), factor)?;
        let ng = self.any_grad(&[x]);
        Ok(self.push(Op::Upsample { x, factor }, value, ng))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|v| self.value(*v)).collect();
        let value = tensor::concat(&values, axis)?;
        let ng = self.any_grad(parts);
        Ok(self.push(
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            value,
            ng,
        ))
    }

    /// Grouped weighted pooling: `features` is D×H×W, `weights` is A×H×W with
    /// D divisible by A. Channel `c` is pooled with weight map `c / (D/A)`.
    /// Output is 1×D.
    pub fn grouped_aggregate(&mut self, features: Var, weights: Var) -> Result<Var> {
        let value = grouped_aggregate(self.value(features), self.value(weights))?;
        let ng = self.any_grad(&[features, weights]);
        Ok(self.push(Op::GroupedAggregate { features, weights }, value, ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum_all());
        let ng = self.any_grad(&[a]);
        self.push(Op::Sum(a), value, ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::scalar(t.sum_all() / T::from_usize(t.numel()).unwrap());
        let ng = self.any_grad(&[a]);
        self.push(Op::Mean(a), value, ng)
    }

    /// Mean binary cross-entropy of `x` (logits) against constant 0/1 targets.
    pub fn bce_with_logits(&mut self, x: Var, targets: Tensor<T>) -> Result<Var> {
        let value = Tensor::scalar(bce_mean(self.value(x), &targets)?);
        let ng = self.any_grad(&[x]);
        Ok(self.push(Op::BceWithLogits { x, targets }, value, ng))
    }

    /// Runs reverse-mode accumulation from the scalar `loss` and returns the
    /// gradient of every recorded parameter. Parameters that do not feed the
    /// loss receive zeros.
    pub fn gradients(&self, loss: Var) -> Result<ParamGrads<T>> {
        let loss_value = self.value(loss);
        if loss_value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(loss_value.shape().to_vec()));
        let mut params: ParamGrads<T> = BTreeMap::new();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if let Op::Param(name) = &node.op {
                let g = grads[idx]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape().to_vec()));
                match params.get_mut(name) {
                    Some(acc) => add_into(acc, &g),
                    None => {
                        params.insert(name.clone(), g);
                    }
                }
                continue;
            }
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            for (input, contribution) in self.backward_node(node, &g)? {
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => add_into(acc, &contribution),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        Ok(params)
    }

    /// [`Graph::gradients`] followed by accumulation into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        let grads = self.gradients(loss)?;
        store.accumulate(&grads)
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let out = match &node.op {
            Op::Constant | Op::Param(_) => Vec::new(),
            Op::Conv2d { x, w, stride, padding } => {
                let mut v = Vec::with_capacity(2);
                if self.needs_grad(*x) {
                    v.push((
                        *x,
                        tensor::conv2d_grad_input(g, val(*w), val(*x).shape(), *stride, *padding)?,
                    ));
                }
                if self.needs_grad(*w) {
                    v.push((
                        *w,
                        tensor::conv2d_grad_kernel(g, val(*x), val(*w).shape(), *stride, *padding)?,
                    ));
                }
                v
            }
            Op::AddChannelBias { x, b } => {
                let c = g.dim(0);
                let hw = g.numel() / c;
                let gb: Vec<T> = g.data().chunks_exact(hw).map(|ch| ch.iter().copied().sum()).collect();
                vec![(*x, g.clone()), (*b, Tensor::from_parts(val(*b).shape().to_vec(), gb))]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
            Op::Mul(a, b) => vec![(*a, tensor::mul(g, val(*b))?), (*b, tensor::mul(g, val(*a))?)],
            Op::MulConst(a, c) => vec![(*a, tensor::mul(g, c)?)],
            Op::Scale(a, f) => {
                let f = *f;
                vec![(*a, g.map(|v| v * f))]
            }
            Op::Silu(a) => {
                let d = val(*a).map(|x| {
                    let sg = sigmoid_scalar(x);
                    sg * (T::one() + x * (T::one() - sg))
                });
                vec![(*a, tensor::mul(g, &d)?)]
            }
            Op::Sigmoid(a) => {
                let d = node.value.map(|y| y * (T::one() - y));
                vec![(*a, tensor::mul(g, &d)?)]
            }
            Op::Abs(a) => {
                let d = val(*a).map(|x| {
                    if x > T::zero() {
                        T::one()
                    } else if x < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    }
                });
                vec![(*a, tensor::mul(g, &d)?)]
            }
            Op::Matmul(a, b) => vec![
                (*a, tensor::matmul_nt(g, val(*b))?),
                (*b, tensor::matmul_tn(val(*a), g)?),
            ],
            Op::MatmulNt(a, b) => vec![(*a, tensor::matmul(g, val(*b))?), (*b, tensor::matmul_tn(g, val(*a))?)],
            Op::Transpose(a) => vec![(*a, tensor::transpose2d(g)?)],
            Op::Reshape(a) => vec![(*a, g.reshape(val(*a).shape().to_vec())?)],
            Op::L2NormalizeRows { x, eps } => {
                vec![(*x, l2_normalize_rows_grad(val(*x), &node.value, g, *eps))]
            }
            Op::MaskedSoftmax { x } => vec![(*x, masked_softmax_grad(&node.value, g))],
            Op::Upsample { x, factor } => vec![(*x, upsample_grad(g, *factor))],
            Op::Concat { parts, axis } => {
                let sizes: Vec<usize> = parts.iter().map(|p| val(*p).dim(*axis)).collect();
                parts.iter().copied().zip(tensor::split(g, *axis, &sizes)?).collect()
            }
            Op::GroupedAggregate { features, weights } => {
                let (gf, gw) = grouped_aggregate_grad(val(*features), val(*weights), g);
                vec![(*features, gf), (*weights, gw)]
            }
            Op::Sum(a) => {
                let gv = g.data()[0];
                vec![(*a, Tensor::full(val(*a).shape().to_vec(), gv))]
            }
            Op::Mean(a) => {
                let n = T::from_usize(val(*a).numel()).unwrap();
                let gv = g.data()[0] / n;
                vec![(*a, Tensor::full(val(*a).shape().to_vec(), gv))]
            }
            Op::BceWithLogits { x, targets } => {
                let xs = val(*x);
                let scale = g.data()[0] / T::from_usize(xs.numel()).unwrap();
                let data = xs
                    .data()
                    .iter()
                    .zip(targets.data())
                    .map(|(&l, &t)| (sigmoid_scalar(l) - t) * scale)
                    .collect();
                vec![(*x, Tensor::from_parts(xs.shape().to_vec(), data))]
            }
        };
        Ok(out)
    }
}

fn add_into<T: Scalar>(acc: &mut Tensor<T>, g: &Tensor<T>) {
    debug_assert_eq!(acc.shape(), g.shape());
    for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
        *a += b;
    }
}

fn l2_normalize_rows_grad<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, g: &Tensor<T>, eps: T) -> Tensor<T> {
    let d = x.dim(1);
    let mut out = vec![T::zero(); x.numel()];
    for r in 0..x.dim(0) {
        let xr = x.row(r);
        let yr = y.row(r);
        let gr = g.row(r);
        let norm = tensor::dot(xr, xr).sqrt();
        let dst = &mut out[r * d..(r + 1) * d];
        if norm > eps {
            let proj = tensor::dot(yr, gr);
            for i in 0..d {
                dst[i] = (gr[i] - yr[i] * proj) / norm;
            }
        } else {
            for i in 0..d {
                dst[i] = gr[i] / eps;
            }
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

fn masked_softmax_grad<T: Scalar>(y: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let hw = y.dim(1) * y.dim(2);
    let mut out = vec![T::zero(); y.numel()];
    for ((yc, gc), dst) in y
        .data()
        .chunks_exact(hw)
        .zip(g.data().chunks_exact(hw))
        .zip(out.chunks_exact_mut(hw))
    {
        let inner = tensor::dot(yc, gc);
        for p in 0..hw {
            // y is exactly zero outside the region, so so is this.
            dst[p] = yc[p] * (gc[p] - inner);
        }
    }
    Tensor::from_parts(y.shape().to_vec(), out)
}

fn upsample_grad<T: Scalar>(g: &Tensor<T>, factor: usize) -> Tensor<T> {
    let (c, oh, ow) = (g.dim(0), g.dim(1), g.dim(2));
    let (h, w) = (oh / factor, ow / factor);
    let mut out = vec![T::zero(); c * h * w];
    let src = g.data();
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                out[(ch * h + oy / factor) * w + ox / factor] += src[(ch * oh + oy) * ow + ox];
            }
        }
    }
    Tensor::from_parts(vec![c, h, w], out)
}

/// Forward value of [`Graph::grouped_aggregate`].
pub fn grouped_aggregate<T: Scalar>(features: &Tensor<T>, weights: &Tensor<T>) -> Result<Tensor<T>> {
    if features.rank() != 3 || weights.rank() != 3 || features.shape()[1..] != weights.shape()[1..] {
        return Err(Error::shape(
            "grouped_aggregate",
            format!("features {:?}, weights {:?}", features.shape(), weights.shape()),
        ));
    }
    let (d, a) = (features.dim(0), weights.dim(0));
    if d % a != 0 {
        return Err(Error::InvalidArgument(format!(
            "embedding dim {d} not divisible by {a} groups"
        )));
    }
    let per_group = d / a;
    let hw = features.dim(1) * features.dim(2);
    let out: Vec<T> = (0..d)
        .map(|c| {
            let grp = c / per_group;
            tensor::dot(
                &features.data()[c * hw..(c + 1) * hw],
                &weights.data()[grp * hw..(grp + 1) * hw],
            )
        })
        .collect();
    Tensor::from_parts(vec![1, d], out).check_finite("grouped_aggregate")
}

fn grouped_aggregate_grad<T: Scalar>(
    features: &Tensor<T>,
    weights: &Tensor<T>,
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (d, a) = (features.dim(0), weights.dim(0));
    let per_group = d / a;
    let hw = features.dim(1) * features.dim(2);
    let mut gf = vec![T::zero(); d * hw];
    let mut gw = vec![T::zero(); a * hw];
    for c in 0..d {
        let grp = c / per_group;
        let gc = g.data()[c];
        let w = &weights.data()[grp * hw..(grp + 1) * hw];
        let f = &features.data()[c * hw..(c + 1) * hw];
        for p in 0..hw {
            gf[c * hw + p] = gc * w[p];
            gw[grp * hw + p] += gc * f[p];
        }
    }
    (
        Tensor::from_parts(features.shape().to_vec(), gf),
        Tensor::from_parts(weights.shape().to_vec(), gw),
    )
}

/// Mean binary cross-entropy with logits in the overflow-free form
/// `max(x,0) − x·t + ln(1 + e^{−|x|})`. Targets must be exactly 0 or 1.
pub fn bce_mean<T: Scalar>(logits: &Tensor<T>, targets: &Tensor<T>) -> Result<T> {
    if logits.shape() != targets.shape() {
        return Err(Error::shape(
            "bce_loss",
            format!("{:?} vs {:?}", logits.shape(), targets.shape()),
        ));
    }
    if targets.data().iter().any(|&t| t != T::zero() && t != T::one()) {
        return Err(Error::InvalidArgument("BCE targets must be 0 or 1".into()));
    }
    let total: T = logits
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&x, &t)| x.max(T::zero()) - x * t + (-x.abs()).exp().ln_1p())
        .sum();
    let loss = total / T::from_usize(logits.numel()).unwrap();
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::NonFinite("bce_loss"))
    }
}
