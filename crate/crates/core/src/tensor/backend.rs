//! One forward-pass vocabulary, two executors.
//!
//! Model code is written against [`Backend`]. [`Eager`] evaluates directly on
//! shared matrices; [`GradTape`] records the same kernels for a backward
//! pass. Both call identical kernels in identical order, so their outputs are
//! bit-identical.

use std::sync::Arc;

use super::matrix::{self, Matrix};
use super::tape::{GradTape, NodeId};

pub trait Backend {
    type T: Clone;

    /// Brings an existing matrix into the computation as a constant.
    fn input(&mut self, m: &Arc<Matrix>) -> Self::T;
    fn value<'a>(&'a self, t: &'a Self::T) -> &'a Matrix;

    fn matmul(&mut self, a: &Self::T, b: &Self::T) -> Self::T;
    fn matmul_t(&mut self, a: &Self::T, b: &Self::T) -> Self::T;
    fn add(&mut self, a: &Self::T, b: &Self::T) -> Self::T;
    fn sub(&mut self, a: &Self::T, b: &Self::T) -> Self::T;
    /// Elementwise product.
    fn mul(&mut self, a: &Self::T, b: &Self::T) -> Self::T;
    fn scale(&mut self, a: &Self::T, s: f64) -> Self::T;
    fn add_row_broadcast(&mut self, a: &Self::T, bias: &Self::T) -> Self::T;
    fn gelu(&mut self, a: &Self::T) -> Self::T;
    fn layer_norm(&mut self, x: &Self::T, gain: &Self::T, bias: &Self::T) -> Self::T;
    fn softmax(&mut self, x: &Self::T, causal: bool) -> Self::T;
    fn slice_cols(&mut self, x: &Self::T, start: usize, len: usize) -> Self::T;
    fn concat_cols(&mut self, parts: &[Self::T]) -> Self::T;
    fn concat_rows(&mut self, parts: &[Self::T]) -> Self::T;
    fn row(&mut self, x: &Self::T, row: usize) -> Self::T;
    fn add_to_row(&mut self, x: &Self::T, row: usize, v: &Self::T) -> Self::T;
    fn squared_norm(&mut self, x: &Self::T) -> Self::T;
}

/// Direct evaluation.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eager;

type Shared = Arc<Matrix>;

impl Backend for Eager {
    type T = Shared;

    fn input(&mut self, m: &Shared) -> Shared {
        Arc::clone(m)
    }

    fn value<'a>(&'a self, t: &'a Shared) -> &'a Matrix {
        t
    }

    fn matmul(&mut self, a: &Shared, b: &Shared) -> Shared {
        assert_eq!(a.cols(), b.rows(), "matmul shape");
        Arc::new(a.matmul_unchecked(b))
    }

    fn matmul_t(&mut self, a: &Shared, b: &Shared) -> Shared {
        assert_eq!(a.cols(), b.cols(), "matmul_t shape");
        Arc::new(a.matmul_t_unchecked(b))
    }

    fn add(&mut self, a: &Shared, b: &Shared) -> Shared {
        assert_eq!(a.shape(), b.shape(), "add shape");
        Arc::new(a.zip_map(b, |x, y| x + y))
    }

    fn sub(&mut self, a: &Shared, b: &Shared) -> Shared {
        assert_eq!(a.shape(), b.shape(), "sub shape");
        Arc::new(a.zip_map(b, |x, y| x - y))
    }

    fn mul(&mut self, a: &Shared, b: &Shared) -> Shared {
        assert_eq!(a.shape(), b.shape(), "mul shape");
        Arc::new(a.zip_map(b, |x, y| x * y))
    }

    fn scale(&mut self, a: &Shared, s: f64) -> Shared {
        Arc::new(a.scale(s))
    }

    fn add_row_broadcast(&mut self, a: &Shared, bias: &Shared) -> Shared {
        Arc::new(a.add_row_broadcast(bias.data()))
    }

    fn gelu(&mut self, a: &Shared) -> Shared {
        Arc::new(a.map(matrix::gelu))
    }

    fn layer_norm(&mut self, x: &Shared, gain: &Shared, bias: &Shared) -> Shared {
        Arc::new(matrix::layer_norm_rows(x, gain.data(), bias.data()).0)
    }

    fn softmax(&mut self, x: &Shared, causal: bool) -> Shared {
        Arc::new(matrix::softmax_rows(x, causal))
    }

    fn slice_cols(&mut self, x: &Shared, start: usize, len: usize) -> Shared {
        Arc::new(x.slice_cols(start, len))
    }

    fn concat_cols(&mut self, parts: &[Shared]) -> Shared {
        let refs: Vec<&Matrix> = parts.iter().map(|p| p.as_ref()).collect();
        Arc::new(Matrix::concat_cols(&refs))
    }

    fn concat_rows(&mut self, parts: &[Shared]) -> Shared {
        let refs: Vec<&Matrix> = parts.iter().map(|p| p.as_ref()).collect();
        Arc::new(Matrix::concat_rows(&refs))
    }

    fn row(&mut self, x: &Shared, row: usize) -> Shared {
        Arc::new(Matrix::row_vector(x.row(row)))
    }

    fn add_to_row(&mut self, x: &Shared, row: usize, v: &Shared) -> Shared {
        let mut out = (**x).clone();
        for (o, d) in out.row_mut(row).iter_mut().zip(v.data()) {
            *o += d;
        }
        Arc::new(out)
    }

    fn squared_norm(&mut self, x: &Shared) -> Shared {
        Arc::new(Matrix::from_vec(1, 1, vec![x.squared_norm()]))
    }
}

impl Backend for GradTape {
    type T = NodeId;

    fn input(&mut self, m: &Shared) -> NodeId {
        self.constant_shared(Arc::clone(m))
    }

    fn value<'a>(&'a self, t: &'a NodeId) -> &'a Matrix {
        GradTape::value(self, *t)
    }

    fn matmul(&mut self, a: &NodeId, b: &NodeId) -> NodeId {
        GradTape::matmul(self, *a, *b)
    }

    fn matmul_t(&mut self, a: &NodeId, b: &NodeId) -> NodeId {
        GradTape::matmul_t(self, *a, *b)
    }

    fn add(&mut self, a: &NodeId, b: &NodeId) -> NodeId {
        GradTape::add(self, *a, *b)
    }

    fn sub(&mut self, a: &NodeId, b: &NodeId) -> NodeId {
        GradTape::sub(self, *a, *b)
    }

    fn mul(&mut self, a: &NodeId, b: &NodeId) -> NodeId {
        GradTape::mul(self, *a, *b)
    }

    fn scale(&mut self, a: &NodeId, s: f64) -> NodeId {
        GradTape::scale(self, *a, s)
    }

    fn add_row_broadcast(&mut self, a: &NodeId, bias: &NodeId) -> NodeId {
        GradTape::add_row_broadcast(self, *a, *bias)
    }

    fn gelu(&mut self, a: &NodeId) -> NodeId {
        GradTape::gelu(self, *a)
    }

    fn layer_norm(&mut self, x: &NodeId, gain: &NodeId, bias: &NodeId) -> NodeId {
        GradTape::layer_norm(self, *x, *gain, *bias)
    }

    fn softmax(&mut self, x: &NodeId, causal: bool) -> NodeId {
        GradTape::softmax(self, *x, causal)
    }

    fn slice_cols(&mut self, x: &NodeId, start: usize, len: usize) -> NodeId {
        GradTape::slice_cols(self, *x, start, len)
    }

    fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        GradTape::concat_cols(self, parts.to_vec())
    }

    fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        GradTape::concat_rows(self, parts.to_vec())
    }

    fn row(&mut self, x: &NodeId, row: usize) -> NodeId {
        GradTape::row(self, *x, row)
    }

    fn add_to_row(&mut self, x: &NodeId, row: usize, v: &NodeId) -> NodeId {
        GradTape::add_to_row(self, *x, row, *v)
    }

    fn squared_norm(&mut self, x: &NodeId) -> NodeId {
        GradTape::squared_norm(self, *x)
    }
}
