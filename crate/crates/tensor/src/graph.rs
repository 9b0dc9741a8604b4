//! Tape of recorded operations and the reverse sweep over it.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order: the backward pass walks it once from the loss towards
//! the leaves and every node is visited exactly once.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::param::ParamStore;
use crate::{Scalar, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<T> {
    Leaf,
    MatMul { a: usize, b: usize },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, factor: T },
    Relu { a: usize },
    Reshape { a: usize },
    Transpose { a: usize, map: Vec<usize> },
    Concat { parts: Vec<usize>, axis: usize },
    Slice { a: usize, axis: usize, start: usize },
    Mean { a: usize, axis: Option<usize> },
    Softmax { a: usize, axis: usize },
    LogSoftmax { a: usize, axis: usize },
    Embedding { table: usize, indices: Vec<usize> },
    CrossEntropy { logits: usize, targets: Vec<usize>, ignore: usize, probs: Vec<T>, denom: f64 },
    Conv1d { x: usize, w: usize, b: Option<usize>, stride: usize },
    MaxPool1d { x: usize, argmax: Vec<usize> },
    BatchNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<T>, inv_std: Vec<f64>, training: bool },
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<T>, inv_std: Vec<f64> },
    Dropout { x: usize, mask: Vec<T> },
    Attention { q: usize, k: usize, v: usize, heads: usize, batch: usize, sq: usize, sk: usize, probs: Vec<T> },
}

pub(crate) struct Node<T> {
    pub(crate) shape: Vec<usize>,
    pub(crate) value: Arc<Vec<T>>,
    pub(crate) grad: Option<Vec<T>>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Op<T>,
}

/// Recording of one forward computation.
pub struct Graph<T> {
    pub(crate) nodes: Vec<Node<T>>,
    training: bool,
    bound: HashMap<String, Var>,
}

impl<T: Scalar> Graph<T> {
    /// `training` switches dropout on and batch-norm to batch statistics.
    pub fn new(training: bool) -> Self {
        Graph { nodes: Vec::new(), training, bound: HashMap::new() }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        let shape = t.shape().to_vec();
        self.nodes.push(Node { shape, value: t.shared(), grad: None, requires_grad, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// Binds a stored parameter. Repeated binds of one name return the same
    /// node so gradients from every use accumulate together.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let p = store.get(name)?;
        let v = self.leaf(p.value.clone(), p.requires_grad());
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        Tensor::from_shared(self.nodes[v.0].shape.clone(), Arc::clone(&self.nodes[v.0].value))
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Softmax weights `[batch, heads, sq, sk]` saved by an attention node.
    pub fn attention_weights(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub(crate) fn push(&mut self, name: &'static str, shape: Vec<usize>, value: Vec<T>, op: Op<T>, parents: &[usize]) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        if value.iter().any(|x| !x.is_finite()) {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = parents.iter().any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(Node { shape, value: Arc::new(value), grad: None, requires_grad, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub(crate) fn val(&self, i: usize) -> Arc<Vec<T>> {
        Arc::clone(&self.nodes[i].value)
    }

    /// Gradient buffer of node `i`, zero-initialised on first use. `None` when
    /// the node does not require a gradient.
    pub(crate) fn grad_buf(&mut self, i: usize) -> Option<&mut Vec<T>> {
        let node = &mut self.nodes[i];
        if !node.requires_grad {
            return None;
        }
        let n = node.value.len();
        Some(node.grad.get_or_insert_with(|| vec![T::zero(); n]))
    }

    pub(crate) fn acc(&mut self, i: usize, g: &[T]) {
        if let Some(buf) = self.grad_buf(i) {
            buf.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
        }
    }

    pub(crate) fn needs(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    /// Reverse sweep from a one-element loss node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else { continue };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backward_op(i, &op, &g);
            self.nodes[i].op = op;
            if g.iter().any(|x| !x.is_finite()) {
                return Err(TensorError::NonFinite { op: "backward" });
            }
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    /// Adds the gradients of every bound trainable parameter into `store`.
    /// Parameters bound from other stores are skipped.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) -> Result<()> {
        let mut bound: Vec<(&String, &Var)> = self.bound.iter().collect();
        bound.sort_by_key(|(_, v)| v.0);
        for (name, v) in bound {
            if let (Some(g), Ok(p)) = (self.grad(*v), store.get(name)) {
                if p.requires_grad() {
                    store.accumulate_grad(name, g)?;
                }
            }
        }
        Ok(())
    }

    fn backward_op(&mut self, i: usize, op: &Op<T>, g: &[T]) {
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b } => self.back_matmul(*a, *b, i, g),
            Op::Add { a, b } => self.back_add(*a, *b, g),
            Op::Mul { a, b } => self.back_mul(*a, *b, g),
            Op::Scale { a, factor } => {
                let f = *factor;
                if let Some(buf) = self.grad_buf(*a) {
                    buf.iter_mut().zip(g).for_each(|(d, &x)| *d += x * f);
                }
            }
            Op::Relu { a } => {
                let out = self.val(i);
                if let Some(buf) = self.grad_buf(*a) {
                    for ((d, &x), &y) in buf.iter_mut().zip(g).zip(out.iter()) {
                        if y > T::zero() {
                            *d += x;
                        }
                    }
                }
            }
            Op::Reshape { a } => self.acc(*a, g),
            Op::Transpose { a, map } => {
                if let Some(buf) = self.grad_buf(*a) {
                    for (o, &src) in map.iter().enumerate() {
                        buf[src] += g[o];
                    }
                }
            }
            Op::Concat { parts, axis } => self.back_concat(parts, *axis, i, g),
            Op::Slice { a, axis, start } => self.back_slice(*a, *axis, *start, i, g),
            Op::Mean { a, axis } => self.back_mean(*a, *axis, g),
            Op::Softmax { a, axis } => self.back_softmax(*a, *axis, i, g),
            Op::LogSoftmax { a, axis } => self.back_log_softmax(*a, *axis, i, g),
            Op::Embedding { table, indices } => {
                let width = self.nodes[*table].shape[1];
                if let Some(buf) = self.grad_buf(*table) {
                    for (r, &idx) in indices.iter().enumerate() {
                        let dst = &mut buf[idx * width..(idx + 1) * width];
                        dst.iter_mut().zip(&g[r * width..(r + 1) * width]).for_each(|(d, &x)| *d += x);
                    }
                }
            }
            Op::CrossEntropy { logits, targets, ignore, probs, denom } => {
                self.back_cross_entropy(*logits, targets, *ignore, probs, *denom, g)
            }
            Op::Conv1d { x, w, b, stride } => self.back_conv1d(*x, *w, *b, *stride, i, g),
            Op::MaxPool1d { x, argmax } => {
                if let Some(buf) = self.grad_buf(*x) {
                    for (o, &src) in argmax.iter().enumerate() {
                        buf[src] += g[o];
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, training } => {
                self.back_batchnorm(*x, *gamma, *beta, xhat, inv_std, *training, g)
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => self.back_layernorm(*x, *gamma, *beta, xhat, inv_std, g),
            Op::Dropout { x, mask } => {
                if let Some(buf) = self.grad_buf(*x) {
                    for ((d, &x), &m) in buf.iter_mut().zip(g).zip(mask) {
                        *d += x * m;
                    }
                }
            }
            Op::Attention { q, k, v, heads, batch, sq, sk, probs } => {
                self.back_attention(*q, *k, *v, *heads, *batch, *sq, *sk, probs, g)
            }
        }
    }
}
