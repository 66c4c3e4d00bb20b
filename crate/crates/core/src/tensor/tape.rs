//! A small reverse-mode gradient tape over [`Matrix`] values.
//!
//! Nodes are appended in evaluation order, so the node index is already a
//! topological order and the backward pass simply walks it in reverse. The
//! primitive set is the one the encoder and denoiser need: products, sums,
//! GELU, layer norm, softmax, slicing and squared norms.

use std::sync::Arc;

use super::matrix::{self, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Const,
    MatMul(NodeId, NodeId),
    /// `a · bᵀ`
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddRowBroadcast(NodeId, NodeId),
    Gelu(NodeId),
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId },
    Softmax { x: NodeId, causal: bool },
    SliceCols { x: NodeId, start: usize, len: usize },
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    Row { x: NodeId, row: usize },
    AddToRow { x: NodeId, row: usize, v: NodeId },
    SquaredNorm(NodeId),
}

#[derive(Debug, Clone)]
enum Cache {
    None,
    LayerNorm { xhat: Matrix, inv_std: Vec<f64> },
}

#[derive(Debug, Clone)]
struct Node {
    value: Arc<Matrix>,
    op: Op,
    cache: Cache,
    /// Whether any leaf feeds this node.
    requires_grad: bool,
}

/// Recorded computation. Single-owner; build one per optimization step.
#[derive(Debug, Default, Clone)]
pub struct GradTape {
    nodes: Vec<Node>,
    leaves: Vec<NodeId>,
}

/// Result of a backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
    /// Leaves the loss does not depend on. Their gradient is exactly zero.
    pub disconnected: Vec<NodeId>,
}

impl Gradients {
    /// Gradient of the loss with respect to `node` (zeros if unreached).
    pub fn get(&self, node: NodeId) -> Matrix {
        match &self.grads[node.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[node.0];
                Matrix::zeros(r, c)
            }
        }
    }
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaves(&self) -> &[NodeId] {
        &self.leaves
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn shared_value(&self, id: NodeId) -> Arc<Matrix> {
        Arc::clone(&self.nodes[id.0].value)
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert_eq!(v.shape(), (1, 1), "scalar node");
        v.get(0, 0)
    }

    fn push(&mut self, op: Op) -> NodeId {
        let (value, cache) = eval(&op, |id| &self.nodes[id.0].value);
        let requires_grad = inputs(&op).iter().any(|id| self.nodes[id.0].requires_grad);
        self.nodes.push(Node { value: Arc::new(value), op, cache, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// Differentiable parameter.
    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.leaf_shared(Arc::new(value))
    }

    pub fn leaf_shared(&mut self, value: Arc<Matrix>) -> NodeId {
        self.nodes.push(Node { value, op: Op::Leaf, cache: Cache::None, requires_grad: true });
        let id = NodeId(self.nodes.len() - 1);
        self.leaves.push(id);
        id
    }

    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.constant_shared(Arc::new(value))
    }

    pub fn constant_shared(&mut self, value: Arc<Matrix>) -> NodeId {
        self.nodes.push(Node { value, op: Op::Const, cache: Cache::None, requires_grad: false });
        NodeId(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).cols(), self.value(b).rows(), "tape matmul shape");
        self.push(Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).cols(), self.value(b).cols(), "tape matmul_t shape");
        self.push(Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "tape add shape");
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "tape sub shape");
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "tape mul shape");
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        self.push(Op::Scale(a, s))
    }

    pub fn add_row_broadcast(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        assert_eq!(self.value(bias).rows(), 1, "bias must be a row");
        assert_eq!(self.value(a).cols(), self.value(bias).cols(), "bias width");
        self.push(Op::AddRowBroadcast(a, bias))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Gelu(a))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        self.push(Op::LayerNorm { x, gain, bias })
    }

    pub fn softmax(&mut self, x: NodeId, causal: bool) -> NodeId {
        self.push(Op::Softmax { x, causal })
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        self.push(Op::SliceCols { x, start, len })
    }

    pub fn concat_cols(&mut self, parts: Vec<NodeId>) -> NodeId {
        self.push(Op::ConcatCols(parts))
    }

    /// Stacks nodes with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: Vec<NodeId>) -> NodeId {
        self.push(Op::ConcatRows(parts))
    }

    pub fn row(&mut self, x: NodeId, row: usize) -> NodeId {
        self.push(Op::Row { x, row })
    }

    /// `x` with `v` added to row `row`.
    pub fn add_to_row(&mut self, x: NodeId, row: usize, v: NodeId) -> NodeId {
        assert_eq!(self.value(v).shape(), (1, self.value(x).cols()), "row update shape");
        self.push(Op::AddToRow { x, row, v })
    }

    pub fn squared_norm(&mut self, x: NodeId) -> NodeId {
        self.push(Op::SquaredNorm(x))
    }

    /// Sum of `1 × 1` nodes, accumulated left to right.
    pub fn sum_scalars(&mut self, items: &[NodeId]) -> NodeId {
        let mut acc = items[0];
        for &it in &items[1..] {
            acc = self.add(acc, it);
        }
        acc
    }

    /// Recomputes every node from the leaf and constant values.
    pub fn replay(&self) -> Vec<Matrix> {
        let mut values: Vec<Matrix> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node.op {
                Op::Leaf | Op::Const => (*node.value).clone(),
                ref op => eval(op, |id| &values[id.0]).0,
            };
            values.push(v);
        }
        values
    }

    /// Backward pass from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar loss");
        self.backward_with_seed(loss, Matrix::from_vec(1, 1, vec![1.0]))
    }

    /// Backward pass from any node with an explicit upstream gradient.
    pub fn backward_with_seed(&self, output: NodeId, seed: Matrix) -> Gradients {
        assert_eq!(self.value(output).shape(), seed.shape(), "seed gradient shape");
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let disconnected = self.leaves.iter().copied().filter(|l| grads[l.0].is_none()).collect();
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Gradients { grads, shapes, disconnected }
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let val = |id: NodeId| &self.nodes[id.0].value;
        let needs = |id: NodeId| self.nodes[id.0].requires_grad;
        let accumulate = |grads: &mut [Option<Matrix>], id: NodeId, g: Matrix| {
            if needs(id) {
                accumulate(grads, id, g);
            }
        };
        match &node.op {
            Op::Leaf | Op::Const => {}
            Op::MatMul(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, g.matmul_t_unchecked(val(*b)));
                }
                if needs(*b) {
                    accumulate(grads, *b, val(*a).t_matmul_unchecked(g));
                }
            }
            Op::MatMulT(a, b) => {
                // y = a·bᵀ: da = g·b, db = gᵀ·a
                if needs(*a) {
                    accumulate(grads, *a, g.matmul_unchecked(val(*b)));
                }
                if needs(*b) {
                    accumulate(grads, *b, g.t_matmul_unchecked(val(*a)));
                }
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, g.zip_map(val(*b), |x, y| x * y));
                accumulate(grads, *b, g.zip_map(val(*a), |x, y| x * y));
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.scale(*s)),
            Op::AddRowBroadcast(a, bias) => {
                accumulate(grads, *a, g.clone());
                let mut db = vec![0.0; g.cols()];
                for i in 0..g.rows() {
                    for (d, v) in db.iter_mut().zip(g.row(i)) {
                        *d += v;
                    }
                }
                accumulate(grads, *bias, Matrix::from_vec(1, db.len(), db));
            }
            Op::Gelu(a) => {
                let x = val(*a);
                accumulate(grads, *a, g.zip_map(x, |gi, xi| gi * matrix::gelu_grad(xi)));
            }
            Op::LayerNorm { x, gain, bias } => {
                let Cache::LayerNorm { xhat, inv_std } = &node.cache else {
                    unreachable!("layer norm cache")
                };
                let (dx, dgain, dbias) =
                    matrix::layer_norm_rows_backward(g, xhat, inv_std, val(*gain).data());
                accumulate(grads, *x, dx);
                accumulate(grads, *gain, Matrix::from_vec(1, dgain.len(), dgain));
                accumulate(grads, *bias, Matrix::from_vec(1, dbias.len(), dbias));
            }
            Op::Softmax { x, .. } => {
                accumulate(grads, *x, matrix::softmax_rows_backward(g, &node.value));
            }
            Op::SliceCols { x, start, len } => {
                let (r, c) = val(*x).shape();
                let mut dx = Matrix::zeros(r, c);
                for i in 0..r {
                    dx.row_mut(i)[*start..start + len].copy_from_slice(g.row(i));
                }
                accumulate(grads, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = val(*p).cols();
                    accumulate(grads, *p, g.slice_cols(offset, w));
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let (r, c) = val(*p).shape();
                    let block = g.data()[offset * c..(offset + r) * c].to_vec();
                    accumulate(grads, *p, Matrix::from_vec(r, c, block));
                    offset += r;
                }
            }
            Op::Row { x, row } => {
                let (r, c) = val(*x).shape();
                let mut dx = Matrix::zeros(r, c);
                dx.row_mut(*row).copy_from_slice(g.row(0));
                accumulate(grads, *x, dx);
            }
            Op::AddToRow { x, row, v } => {
                accumulate(grads, *x, g.clone());
                accumulate(grads, *v, Matrix::row_vector(g.row(*row)));
            }
            Op::SquaredNorm(x) => {
                let s = g.get(0, 0);
                accumulate(grads, *x, val(*x).scale(2.0 * s));
            }
        }
    }
}

fn inputs(op: &Op) -> Vec<NodeId> {
    match op {
        Op::Leaf | Op::Const => vec![],
        Op::MatMul(a, b) | Op::MatMulT(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
        Op::AddRowBroadcast(a, b) => vec![*a, *b],
        Op::Scale(a, _) | Op::Gelu(a) | Op::SquaredNorm(a) => vec![*a],
        Op::LayerNorm { x, gain, bias } => vec![*x, *gain, *bias],
        Op::Softmax { x, .. } | Op::SliceCols { x, .. } | Op::Row { x, .. } => vec![*x],
        Op::ConcatCols(parts) | Op::ConcatRows(parts) => parts.clone(),
        Op::AddToRow { x, v, .. } => vec![*x, *v],
    }
}

fn accumulate(grads: &mut [Option<Matrix>], id: NodeId, g: Matrix) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn eval<'a>(op: &Op, value: impl Fn(NodeId) -> &'a Matrix) -> (Matrix, Cache) {
    let out = match op {
        Op::Leaf | Op::Const => unreachable!("leaves carry their own value"),
        Op::MatMul(a, b) => value(*a).matmul_unchecked(value(*b)),
        Op::MatMulT(a, b) => value(*a).matmul_t_unchecked(value(*b)),
        Op::Add(a, b) => value(*a).zip_map(value(*b), |x, y| x + y),
        Op::Sub(a, b) => value(*a).zip_map(value(*b), |x, y| x - y),
        Op::Mul(a, b) => value(*a).zip_map(value(*b), |x, y| x * y),
        Op::Scale(a, s) => value(*a).scale(*s),
        Op::AddRowBroadcast(a, bias) => value(*a).add_row_broadcast(value(*bias).data()),
        Op::Gelu(a) => value(*a).map(matrix::gelu),
        Op::LayerNorm { x, gain, bias } => {
            let (y, xhat, inv_std) =
                matrix::layer_norm_rows(value(*x), value(*gain).data(), value(*bias).data());
            return (y, Cache::LayerNorm { xhat, inv_std });
        }
        Op::Softmax { x, causal } => matrix::softmax_rows(value(*x), *causal),
        Op::SliceCols { x, start, len } => value(*x).slice_cols(*start, *len),
        Op::ConcatCols(parts) => {
            let refs: Vec<&Matrix> = parts.iter().map(|p| value(*p)).collect();
            Matrix::concat_cols(&refs)
        }
        Op::ConcatRows(parts) => {
            let refs: Vec<&Matrix> = parts.iter().map(|p| value(*p)).collect();
            Matrix::concat_rows(&refs)
        }
        Op::Row { x, row } => Matrix::row_vector(value(*x).row(*row)),
        Op::AddToRow { x, row, v } => {
            let mut out = value(*x).clone();
            for (o, d) in out.row_mut(*row).iter_mut().zip(value(*v).data()) {
                *o += d;
            }
            out
        }
        Op::SquaredNorm(x) => Matrix::from_vec(1, 1, vec![value(*x).squared_norm()]),
    };
    (out, Cache::None)
}
