//! Reverse-mode differentiation over the closed kernel set.
//!
//! Model code is written once against the [`Graph`] trait and runs either on
//! [`Eager`] (plain evaluation, no bookkeeping) or on a [`Tape`] (records
//! every node so [`Tape::backward`] can pull gradients back to the trainable
//! leaves). Both implementations delegate to the same kernels in
//! [`crate::tensor::ops`], so their forward values agree bit for bit.
//!
//! Backbone weights enter a tape as borrowed constants; constant nodes never
//! receive a gradient buffer.

mod adjoint;
pub mod check;

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{ops, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Op kinds that can appear on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Constant,
    Matmul,
    Add,
    Mul,
    Affine,
    Concat,
    Slice,
    Reshape,
    Permute,
    LayerNorm,
    Softmax,
    LogSoftmax,
    Gelu,
    L2Normalize,
    ScaleShift,
    CosineSim,
    Sum,
    Mean,
    Log1pSumExp,
}

impl OpKind {
    pub const DIFFERENTIABLE: [OpKind; 18] = [
        OpKind::Matmul,
        OpKind::Add,
        OpKind::Mul,
        OpKind::Affine,
        OpKind::Concat,
        OpKind::Slice,
        OpKind::Reshape,
        OpKind::Permute,
        OpKind::LayerNorm,
        OpKind::Softmax,
        OpKind::LogSoftmax,
        OpKind::Gelu,
        OpKind::L2Normalize,
        OpKind::ScaleShift,
        OpKind::CosineSim,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Log1pSumExp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Constant => "constant",
            OpKind::Matmul => "matmul",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Affine => "affine",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::Reshape => "reshape",
            OpKind::Permute => "permute",
            OpKind::LayerNorm => "layernorm",
            OpKind::Softmax => "softmax",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::Gelu => "gelu",
            OpKind::L2Normalize => "l2_normalize",
            OpKind::ScaleShift => "scale_shift",
            OpKind::CosineSim => "cosine_sim",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Log1pSumExp => "log1p_sum_exp",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::DIFFERENTIABLE.into_iter().chain([OpKind::Leaf, OpKind::Constant]).find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Constant,
    Matmul { a: Var, b: Var, ta: bool, tb: bool },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Affine { x: Var, scale: f64 },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape { x: Var },
    Permute { x: Var, perm: Vec<usize> },
    LayerNorm { x: Var, gain: Var, bias: Var, eps: f64 },
    Softmax { x: Var },
    LogSoftmax { x: Var },
    Gelu { x: Var },
    L2Normalize { x: Var },
    ScaleShift { x: Var, gamma: Var, beta: Var },
    CosineSim { x: Var, a: Var, eps: f64 },
    Sum { x: Var },
    Mean { x: Var },
    Log1pSumExp { z: Var, mask: Vec<bool> },
}

impl Op {
    pub(crate) fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Constant => OpKind::Constant,
            Op::Matmul { .. } => OpKind::Matmul,
            Op::Add { .. } => OpKind::Add,
            Op::Mul { .. } => OpKind::Mul,
            Op::Affine { .. } => OpKind::Affine,
            Op::Concat { .. } => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Permute { .. } => OpKind::Permute,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LogSoftmax { .. } => OpKind::LogSoftmax,
            Op::Gelu { .. } => OpKind::Gelu,
            Op::L2Normalize { .. } => OpKind::L2Normalize,
            Op::ScaleShift { .. } => OpKind::ScaleShift,
            Op::CosineSim { .. } => OpKind::CosineSim,
            Op::Sum { .. } => OpKind::Sum,
            Op::Mean { .. } => OpKind::Mean,
            Op::Log1pSumExp { .. } => OpKind::Log1pSumExp,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Constant => vec![],
            Op::Matmul { a, b, .. } | Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::Affine { x, .. }
            | Op::Slice { x, .. }
            | Op::Reshape { x }
            | Op::Permute { x, .. }
            | Op::Softmax { x }
            | Op::LogSoftmax { x }
            | Op::Gelu { x }
            | Op::L2Normalize { x }
            | Op::Sum { x }
            | Op::Mean { x } => vec![*x],
            Op::Concat { parts, .. } => parts.clone(),
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::ScaleShift { x, gamma, beta } => vec![*x, *gamma, *beta],
            Op::CosineSim { x, a, .. } => vec![*x, *a],
            Op::Log1pSumExp { z, .. } => vec![*z],
        }
    }
}

struct Node<'w, T: Scalar> {
    op: Op,
    value: Cow<'w, Tensor<T>>,
    requires_grad: bool,
}

/// Operations available to model code, independent of whether the forward
/// pass is being recorded.
pub trait Graph<'w, T: Scalar> {
    type Value: Clone;

    fn value<'a>(&'a self, v: &'a Self::Value) -> &'a Tensor<T>;
    /// An owned constant (inputs, masks, cached activations).
    fn constant(&mut self, t: Tensor<T>) -> Self::Value;
    /// A borrowed constant, typically a backbone weight.
    fn weight(&mut self, t: &'w Tensor<T>) -> Self::Value;

    fn matmul(&mut self, a: &Self::Value, b: &Self::Value, ta: bool, tb: bool) -> Result<Self::Value>;
    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn mul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn affine(&mut self, x: &Self::Value, scale: f64, shift: f64) -> Result<Self::Value>;
    fn concat(&mut self, parts: &[&Self::Value], axis: usize) -> Result<Self::Value>;
    fn slice(&mut self, x: &Self::Value, axis: usize, start: usize, len: usize) -> Result<Self::Value>;
    fn reshape(&mut self, x: &Self::Value, shape: Vec<usize>) -> Result<Self::Value>;
    fn permute(&mut self, x: &Self::Value, perm: &[usize]) -> Result<Self::Value>;
    fn layernorm(&mut self, x: &Self::Value, gain: &Self::Value, bias: &Self::Value, eps: f64) -> Result<Self::Value>;
    fn softmax(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn log_softmax(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn gelu(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn l2_normalize(&mut self, x: &Self::Value, eps: f64) -> Result<Self::Value>;
    fn scale_shift(&mut self, x: &Self::Value, gamma: &Self::Value, beta: &Self::Value) -> Result<Self::Value>;
    fn cosine_sim(&mut self, x: &Self::Value, a: &Self::Value, eps: f64) -> Result<Self::Value>;
    fn sum(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn mean(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn log1p_sum_exp(&mut self, z: &Self::Value, mask: Vec<bool>) -> Result<Self::Value>;
}

/// Untaped evaluation.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eager;

impl<'w, T: Scalar> Graph<'w, T> for Eager {
    type Value = Cow<'w, Tensor<T>>;

    fn value<'a>(&'a self, v: &'a Self::Value) -> &'a Tensor<T> {
        v.as_ref()
    }
    fn constant(&mut self, t: Tensor<T>) -> Self::Value {
        Cow::Owned(t)
    }
    fn weight(&mut self, t: &'w Tensor<T>) -> Self::Value {
        Cow::Borrowed(t)
    }
    fn matmul(&mut self, a: &Self::Value, b: &Self::Value, ta: bool, tb: bool) -> Result<Self::Value> {
        ops::matmul_ex(a, b, ta, tb).map(Cow::Owned)
    }
    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        ops::add(a, b).map(Cow::Owned)
    }
    fn mul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        ops::mul(a, b).map(Cow::Owned)
    }
    fn affine(&mut self, x: &Self::Value, scale: f64, shift: f64) -> Result<Self::Value> {
        ops::affine(x, scale, shift).map(Cow::Owned)
    }
    fn concat(&mut self, parts: &[&Self::Value], axis: usize) -> Result<Self::Value> {
        let refs: Vec<&Tensor<T>> = parts.iter().map(|p| p.as_ref()).collect();
        ops::concat(&refs, axis).map(Cow::Owned)
    }
    fn slice(&mut self, x: &Self::Value, axis: usize, start: usize, len: usize) -> Result<Self::Value> {
        ops::slice(x, axis, start, len).map(Cow::Owned)
    }
    fn reshape(&mut self, x: &Self::Value, shape: Vec<usize>) -> Result<Self::Value> {
        x.as_ref().clone().reshape(shape).map(Cow::Owned)
    }
    fn permute(&mut self, x: &Self::Value, perm: &[usize]) -> Result<Self::Value> {
        ops::permute(x, perm).map(Cow::Owned)
    }
    fn layernorm(&mut self, x: &Self::Value, gain: &Self::Value, bias: &Self::Value, eps: f64) -> Result<Self::Value> {
        ops::layernorm(x, gain, bias, eps).map(Cow::Owned)
    }
    fn softmax(&mut self, x: &Self::Value) -> Result<Self::Value> {
        ops::softmax(x).map(Cow::Owned)
    }
    fn log_softmax(&mut self, x: &Self::Value) -> Result<Self::Value> {
        ops::log_softmax(x).map(Cow::Owned)
    }
    fn gelu(&mut self, x: &Self::Value) -> Result<Self::Value> {
        ops::gelu(x).map(Cow::Owned)
    }
    fn l2_normalize(&mut self, x: &Self::Value, eps: f64) -> Result<Self::Value> {
        ops::l2_normalize(x, eps).map(Cow::Owned)
    }
    fn scale_shift(&mut self, x: &Self::Value, gamma: &Self::Value, beta: &Self::Value) -> Result<Self::Value> {
        ops::scale_shift(x, gamma, beta).map(Cow::Owned)
    }
    fn cosine_sim(&mut self, x: &Self::Value, a: &Self::Value, eps: f64) -> Result<Self::Value> {
        ops::cosine_matrix(x, a, eps).map(Cow::Owned)
    }
    fn sum(&mut self, x: &Self::Value) -> Result<Self::Value> {
        ops::sum(x).map(Cow::Owned)
    }
    fn mean(&mut self, x: &Self::Value) -> Result<Self::Value> {
        ops::mean(x).map(Cow::Owned)
    }
    fn log1p_sum_exp(&mut self, z: &Self::Value, mask: Vec<bool>) -> Result<Self::Value> {
        ops::log1p_sum_exp(z, &mask).map(Cow::Owned)
    }
}

/// Gradients of a scalar loss with respect to every trainable leaf.
#[derive(Debug, Clone)]
pub struct GradMap<T: Scalar> {
    grads: BTreeMap<Var, Tensor<T>>,
}

impl<T: Scalar> GradMap<T> {
    pub fn get(&self, leaf: Var) -> Option<&Tensor<T>> {
        self.grads.get(&leaf)
    }

    /// Gradient for `leaf`; panics if `leaf` is not a trainable leaf of the tape.
    pub fn of(&self, leaf: Var) -> &Tensor<T> {
        self.grads.get(&leaf).unwrap_or_else(|| panic!("{leaf:?} is not a trainable leaf"))
    }

    pub fn take(&mut self, leaf: Var) -> Option<Tensor<T>> {
        self.grads.remove(&leaf)
    }

    pub fn leaves(&self) -> impl Iterator<Item = Var> + '_ {
        self.grads.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Append-only record of a forward pass.
///
/// Nodes are pushed in evaluation order, so inputs always precede the nodes
/// that consume them and a single reverse sweep visits every node once.
pub struct Tape<'w, T: Scalar> {
    nodes: Vec<Node<'w, T>>,
    leaves: Vec<Var>,
    fault: Option<OpKind>,
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'w, T: Scalar> Tape<'w, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), leaves: Vec::new(), fault: None }
    }

    /// Corrupts the adjoint of `kind` (input gradients scaled by 1.5). Only
    /// meant for exercising the gradient checker.
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    /// A trainable leaf: it will receive an entry in the [`GradMap`].
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let v = self.push(Op::Leaf, Cow::Owned(t), true);
        self.leaves.push(v);
        v
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn trainable_leaves(&self) -> &[Var] {
        &self.leaves
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Cow<'w, Tensor<T>>, requires_grad: bool) -> Var {
        debug_assert!(op.inputs().iter().all(|i| i.0 < self.nodes.len()));
        self.nodes.push(Node { op, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, op: Op, value: Tensor<T>) -> Var {
        let rg = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.push(op, Cow::Owned(value), rg)
    }

    fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Reverse sweep from a one-element `loss` node.
    pub fn backward(&self, loss: Var) -> Result<GradMap<T>> {
        let seed = Tensor::full(self.val(loss).shape().to_vec(), T::ONE);
        self.backward_with_seed(loss, seed)
    }

    /// Reverse sweep with an explicit upstream gradient for `loss`.
    pub fn backward_with_seed(&self, loss: Var, seed: Tensor<T>) -> Result<GradMap<T>> {
        if !self.val(loss).is_scalar() {
            return Err(Error::Grad(format!("loss must be a scalar, got shape {:?}", self.val(loss).shape())));
        }
        if seed.shape() != self.val(loss).shape() {
            return Err(Error::Grad("seed shape differs from loss shape".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(seed);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(upstream);
                continue;
            }
            let kind = node.op.kind();
            let contributions = adjoint::input_grads(self, &node.op, &node.value, &upstream).map_err(|e| match e {
                Error::NonFinite { .. } => Error::non_finite(format!("{kind} adjoint"), format!("node {idx}")),
                other => other,
            })?;
            for (input, mut g) in contributions {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                if self.fault == Some(kind) {
                    g = g.map(|v| v * T::from_f64(1.5));
                }
                if !g.all_finite() {
                    return Err(Error::non_finite(format!("{kind} adjoint"), format!("node {idx}")));
                }
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += *b;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
        }
        let grads = self
            .leaves
            .iter()
            .map(|&leaf| {
                let g =
                    grads.get_mut(leaf.0).and_then(Option::take).unwrap_or_else(|| Tensor::zeros_like(self.val(leaf)));
                (leaf, g)
            })
            .collect();
        Ok(GradMap { grads })
    }
}

impl<'w, T: Scalar> Graph<'w, T> for Tape<'w, T> {
    type Value = Var;

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor<T> {
        self.val(*v)
    }
    fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(Op::Constant, Cow::Owned(t), false)
    }
    fn weight(&mut self, t: &'w Tensor<T>) -> Var {
        self.push(Op::Constant, Cow::Borrowed(t), false)
    }
    fn matmul(&mut self, a: &Var, b: &Var, ta: bool, tb: bool) -> Result<Var> {
        let v = ops::matmul_ex(self.val(*a), self.val(*b), ta, tb)?;
        Ok(self.record(Op::Matmul { a: *a, b: *b, ta, tb }, v))
    }
    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let v = ops::add(self.val(*a), self.val(*b))?;
        Ok(self.record(Op::Add { a: *a, b: *b }, v))
    }
    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let v = ops::mul(self.val(*a), self.val(*b))?;
        Ok(self.record(Op::Mul { a: *a, b: *b }, v))
    }
    fn affine(&mut self, x: &Var, scale: f64, shift: f64) -> Result<Var> {
        let v = ops::affine(self.val(*x), scale, shift)?;
        Ok(self.record(Op::Affine { x: *x, scale }, v))
    }
    fn concat(&mut self, parts: &[&Var], axis: usize) -> Result<Var> {
        let refs: Vec<&Tensor<T>> = parts.iter().map(|p| self.val(**p)).collect();
        let v = ops::concat(&refs, axis)?;
        let parts = parts.iter().map(|p| **p).collect();
        Ok(self.record(Op::Concat { parts, axis }, v))
    }
    fn slice(&mut self, x: &Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = ops::slice(self.val(*x), axis, start, len)?;
        Ok(self.record(Op::Slice { x: *x, axis, start }, v))
    }
    fn reshape(&mut self, x: &Var, shape: Vec<usize>) -> Result<Var> {
        let v = self.val(*x).clone().reshape(shape)?;
        Ok(self.record(Op::Reshape { x: *x }, v))
    }
    fn permute(&mut self, x: &Var, perm: &[usize]) -> Result<Var> {
        let v = ops::permute(self.val(*x), perm)?;
        Ok(self.record(Op::Permute { x: *x, perm: perm.to_vec() }, v))
    }
    fn layernorm(&mut self, x: &Var, gain: &Var, bias: &Var, eps: f64) -> Result<Var> {
        let v = ops::layernorm(self.val(*x), self.val(*gain), self.val(*bias), eps)?;
        Ok(self.record(Op::LayerNorm { x: *x, gain: *gain, bias: *bias, eps }, v))
    }
    fn softmax(&mut self, x: &Var) -> Result<Var> {
        let v = ops::softmax(self.val(*x))?;
        Ok(self.record(Op::Softmax { x: *x }, v))
    }
    fn log_softmax(&mut self, x: &Var) -> Result<Var> {
        let v = ops::log_softmax(self.val(*x))?;
        Ok(self.record(Op::LogSoftmax { x: *x }, v))
    }
    fn gelu(&mut self, x: &Var) -> Result<Var> {
        let v = ops::gelu(self.val(*x))?;
        Ok(self.record(Op::Gelu { x: *x }, v))
    }
    fn l2_normalize(&mut self, x: &Var, eps: f64) -> Result<Var> {
        let v = ops::l2_normalize(self.val(*x), eps)?;
        Ok(self.record(Op::L2Normalize { x: *x }, v))
    }
    fn scale_shift(&mut self, x: &Var, gamma: &Var, beta: &Var) -> Result<Var> {
        let v = ops::scale_shift(self.val(*x), self.val(*gamma), self.val(*beta))?;
        Ok(self.record(Op::ScaleShift { x: *x, gamma: *gamma, beta: *beta }, v))
    }
    fn cosine_sim(&mut self, x: &Var, a: &Var, eps: f64) -> Result<Var> {
        let v = ops::cosine_matrix(self.val(*x), self.val(*a), eps)?;
        Ok(self.record(Op::CosineSim { x: *x, a: *a, eps }, v))
    }
    fn sum(&mut self, x: &Var) -> Result<Var> {
        let v = ops::sum(self.val(*x))?;
        Ok(self.record(Op::Sum { x: *x }, v))
    }
    fn mean(&mut self, x: &Var) -> Result<Var> {
        let v = ops::mean(self.val(*x))?;
        Ok(self.record(Op::Mean { x: *x }, v))
    }
    fn log1p_sum_exp(&mut self, z: &Var, mask: Vec<bool>) -> Result<Var> {
        let v = ops::log1p_sum_exp(self.val(*z), &mask)?;
        Ok(self.record(Op::Log1pSumExp { z: *z, mask }, v))
    }
}
