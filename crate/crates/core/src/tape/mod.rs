//! Reverse-mode automatic differentiation over 2-D matrices.
//!
//! Every value on the tape is an `Array2`. Row vectors (`1 × n`) stand in for
//! biases and per-feature scales; scalars are `1 × 1`. Models build a fresh
//! [`Graph`] per forward pass and call [`Graph::backward`] on a scalar node.

mod ops;
mod optim;
mod params;

use std::sync::Arc;

use ndarray::{s, Array2, Axis};

use crate::scalar::Scalar;

pub use optim::{AdamW, AdamWConfig};
pub use params::{Bind, Gradients, ParamId, ParamStore};

pub type Mat<T> = Array2<T>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

/// User-defined differentiable operation (ISTFT, signal losses, ...).
pub trait CustomOp<T: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input; `None` where `needs[i]` is false.
    fn backward(
        &self,
        inputs: &[&Mat<T>],
        output: &Mat<T>,
        grad: &Mat<T>,
        needs: &[bool],
    ) -> Vec<Option<Mat<T>>>;
}

pub(crate) enum Op<T: Scalar> {
    Input,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    MatMulNT(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    Scale(NodeId, T),
    Gelu(NodeId),
    Sigmoid(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Mat<T>,
        inv_std: Vec<T>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        groups: Arc<Vec<Vec<usize>>>,
        heads: usize,
        scale: T,
        probs: Vec<Mat<T>>,
    },
    GatherRows {
        x: NodeId,
        index: Arc<Vec<usize>>,
    },
    Reshape(NodeId),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SliceCols(NodeId, usize),
    MeanRows(NodeId),
    SumAll(NodeId),
    NormalizeRows {
        x: NodeId,
        norms: Vec<T>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Mat<T>,
    },
    Custom {
        inputs: Vec<NodeId>,
        op: Box<dyn CustomOp<T>>,
    },
}

struct Node<T: Scalar> {
    value: Arc<Mat<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// A single-use computation tape.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::with_capacity(512) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.push_arc(Arc::new(value), op, needs_grad)
    }

    fn push_arc(&mut self, value: Arc<Mat<T>>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn value(&self, id: NodeId) -> &Mat<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.dim()
    }

    pub fn scalar(&self, id: NodeId) -> T {
        self.nodes[id.0].value[[0, 0]]
    }

    /// Constant leaf; never receives a gradient.
    pub fn input(&mut self, value: Mat<T>) -> NodeId {
        self.push(value, Op::Input, false)
    }

    pub fn input_arc(&mut self, value: Arc<Mat<T>>) -> NodeId {
        self.push_arc(value, Op::Input, false)
    }

    /// Leaf for a parameter tracked by the backward pass.
    pub(crate) fn param_leaf(&mut self, id: ParamId, value: Arc<Mat<T>>) -> NodeId {
        self.push_arc(value, Op::Param(id), true)
    }

    pub fn row(&mut self, values: &[T]) -> NodeId {
        let m = Array2::from_shape_vec((1, values.len()), values.to_vec()).expect("row shape");
        self.input(m)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(&self.value(b).t());
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::MatMulNT(a, b), ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let v = self.value(a) + self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let v = self.value(a) - self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let v = self.value(a) * self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    /// Adds a `1 × C` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (_, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "add_row expects a 1×{c} row");
        let v = self.value(a) + self.value(row);
        let ng = self.needs(a) || self.needs(row);
        self.push(v, Op::AddRow(a, row), ng)
    }

    /// Multiplies every row of `a` elementwise by a `1 × C` row.
    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (_, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "mul_row expects a 1×{c} row");
        let v = self.value(a) * self.value(row);
        let ng = self.needs(a) || self.needs(row);
        self.push(v, Op::MulRow(a, row), ng)
    }

    pub fn scale(&mut self, a: NodeId, k: T) -> NodeId {
        let v = self.value(a).mapv(|x| x * k);
        let ng = self.needs(a);
        self.push(v, Op::Scale(a, k), ng)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(ops::gelu);
        let ng = self.needs(a);
        self.push(v, Op::Gelu(a), ng)
    }

    /// Logistic sigmoid with outputs kept strictly inside `(0, 1)`.
    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(ops::sigmoid_open);
        let ng = self.needs(a);
        self.push(v, Op::Sigmoid(a), ng)
    }

    /// Row-wise layer normalisation followed by the affine `gamma`, `beta` rows.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: T) -> NodeId {
        let (_, c) = self.shape(x);
        assert_eq!(self.shape(gamma), (1, c));
        assert_eq!(self.shape(beta), (1, c));
        let (xhat, inv_std) = ops::normalize(self.value(x), eps);
        let out = &(&xhat * self.value(gamma)) + self.value(beta);
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, ng)
    }

    /// Multi-head softmax attention restricted to token groups.
    ///
    /// `q`, `k`, `v` are `N × d` with `d = heads · d_head`. Tokens attend only to
    /// tokens of their own group; every token must belong to exactly one group.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        groups: Arc<Vec<Vec<usize>>>,
        heads: usize,
    ) -> NodeId {
        let (n, d) = self.shape(q);
        assert_eq!(self.shape(k), (n, d));
        assert_eq!(self.shape(v), (n, d));
        assert!(heads > 0 && d % heads == 0, "model dim {d} not divisible by {heads} heads");
        let scale = T::one() / T::of((d / heads) as f64).sqrt();
        let (out, probs) =
            ops::attention_forward(self.value(q), self.value(k), self.value(v), &groups, heads, scale);
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(out, Op::Attention { q, k, v, groups, heads, scale, probs }, ng)
    }

    /// Output row `i` is input row `index[i]`. Rows may repeat or be dropped.
    pub fn gather_rows(&mut self, x: NodeId, index: Arc<Vec<usize>>) -> NodeId {
        let src = self.value(x);
        let c = src.ncols();
        let mut out = Array2::zeros((index.len(), c));
        for (dst, &i) in index.iter().enumerate() {
            out.row_mut(dst).assign(&src.row(i));
        }
        let ng = self.needs(x);
        self.push(out, Op::GatherRows { x, index }, ng)
    }

    /// Row-major reshape preserving the element count.
    pub fn reshape(&mut self, x: NodeId, rows: usize, cols: usize) -> NodeId {
        let src = self.value(x);
        assert_eq!(src.len(), rows * cols, "reshape element count mismatch");
        let v = Array2::from_shape_vec((rows, cols), src.iter().copied().collect()).expect("reshape");
        let ng = self.needs(x);
        self.push(v, Op::Reshape(x), ng)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols row mismatch");
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(v, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows col mismatch");
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(v, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> NodeId {
        let v = self.value(x).slice(s![.., start..end]).to_owned();
        let ng = self.needs(x);
        self.push(v, Op::SliceCols(x, start), ng)
    }

    /// Column means: `N × C → 1 × C`.
    pub fn mean_rows(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).mean_axis(Axis(0)).expect("mean of empty matrix").insert_axis(Axis(0));
        let ng = self.needs(x);
        self.push(v, Op::MeanRows(x), ng)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).sum();
        let ng = self.needs(x);
        self.push(Array2::from_elem((1, 1), s), Op::SumAll(x), ng)
    }

    /// Divides each row by its L2 norm.
    pub fn normalize_rows(&mut self, x: NodeId) -> NodeId {
        let src = self.value(x);
        let tiny = T::of(1e-12);
        let norms: Vec<T> = src
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt().max(tiny))
            .collect();
        let mut out = src.clone();
        for (mut r, &n) in out.rows_mut().into_iter().zip(&norms) {
            r.mapv_inplace(|v| v / n);
        }
        let ng = self.needs(x);
        self.push(out, Op::NormalizeRows { x, norms }, ng)
    }

    /// Mean softmax cross-entropy of each row of `logits` against `targets`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: Vec<usize>) -> NodeId {
        let l = self.value(logits);
        assert_eq!(l.nrows(), targets.len());
        let probs = ops::softmax_rows(l);
        let n = T::of(targets.len() as f64);
        let loss = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| -(probs[[i, t]].max(T::min_positive_value())).ln())
            .fold(T::zero(), |a, b| a + b)
            / n;
        let ng = self.needs(logits);
        self.push(Array2::from_elem((1, 1), loss), Op::CrossEntropy { logits, targets, probs }, ng)
    }

    /// Appends a custom operation whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[NodeId], output: Mat<T>, op: Box<dyn CustomOp<T>>) -> NodeId {
        let ng = inputs.iter().any(|&i| self.needs(i));
        self.push(output, Op::Custom { inputs: inputs.to_vec(), op }, ng)
    }

    /// Back-propagates from a `1 × 1` node with unit seed.
    pub fn backward(&self, root: NodeId) -> Gradients<T> {
        assert_eq!(self.shape(root), (1, 1), "backward root must be a scalar");
        self.backward_with(root, Array2::from_elem((1, 1), T::one()))
    }

    /// Back-propagates an arbitrary upstream gradient for `root`.
    pub fn backward_with(&self, root: NodeId, seed: Mat<T>) -> Gradients<T> {
        assert_eq!(seed.dim(), self.shape(root));
        let mut grads: Vec<Option<Mat<T>>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(seed);
        let mut out = Gradients::default();
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Param(pid) = node.op {
                out.accumulate(pid, g);
                continue;
            }
            ops::backward_node(self, node, &g, &mut grads);
        }
        out
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Mat<T>>, g: Mat<T>) {
    match slot {
        Some(existing) => *existing += &g,
        None => *slot = Some(g),
    }
}
