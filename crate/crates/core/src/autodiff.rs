//! Reverse-mode differentiation over dense matrices.
//!
//! Every value on the tape is a 2-D array; scalars are 1×1. Nodes are
//! appended in evaluation order, so the node index is a topological order and
//! backward simply walks the tape in reverse.

use std::sync::Arc;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};
use thiserror::Error;

use crate::kernels::{gather_rows, scatter_add_rows, segment_max, Csr};
use crate::scalar::Real;

#[derive(Debug, Error, PartialEq)]
pub enum AutodiffError {
    #[error("row {row} of node {node} has zero norm")]
    ZeroRow { node: usize, row: usize },
    #[error("rotation {row} of node {node} is degenerate")]
    DegenerateRotation { node: usize, row: usize },
    #[error("nonfinite adjoint at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("node {0} is not a scalar")]
    NotScalar(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    Transpose(NodeId),
    SoftmaxRows(NodeId, T),
    NormalizeRows(NodeId),
    ConcatCols(Vec<NodeId>),
    GatherRows(NodeId, Arc<Vec<usize>>),
    ScatterAddRows(NodeId, Arc<Vec<usize>>, usize),
    SegmentMax(NodeId, Arc<Vec<usize>>, usize),
    SparseMatMul(Arc<Csr<T>>, NodeId),
    ScaleRows(NodeId, Arc<Vec<T>>),
    Exp(NodeId),
    Sqrt(NodeId),
    Sum(NodeId),
    SumSquares(NodeId),
    Rot6ToMatrix(NodeId),
    RotateRows(NodeId, NodeId),
    Distortion(NodeId, Arc<Array2<T>>, Arc<Array2<T>>),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::Transpose(..) => "transpose",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::NormalizeRows(..) => "normalize_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::GatherRows(..) => "gather_rows",
            Op::ScatterAddRows(..) => "scatter_add_rows",
            Op::SegmentMax(..) => "segment_max",
            Op::SparseMatMul(..) => "sparse_matmul",
            Op::ScaleRows(..) => "scale_rows",
            Op::Exp(..) => "exp",
            Op::Sqrt(..) => "sqrt",
            Op::Sum(..) => "sum",
            Op::SumSquares(..) => "sum_squares",
            Op::Rot6ToMatrix(..) => "rot6_to_matrix",
            Op::RotateRows(..) => "rotate_rows",
            Op::Distortion(..) => "distortion",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MatMul(a, b)
            | Op::MatMulT(a, b)
            | Op::RotateRows(a, b) => vec![*a, *b],
            Op::ConcatCols(xs) => xs.clone(),
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::SoftmaxRows(a, _)
            | Op::NormalizeRows(a)
            | Op::GatherRows(a, _)
            | Op::ScatterAddRows(a, _, _)
            | Op::SegmentMax(a, _, _)
            | Op::SparseMatMul(_, a)
            | Op::ScaleRows(a, _)
            | Op::Exp(a)
            | Op::Sqrt(a)
            | Op::Sum(a)
            | Op::SumSquares(a)
            | Op::Rot6ToMatrix(a)
            | Op::Distortion(a, _, _) => vec![*a],
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    op: Op<T>,
    value: Array2<T>,
    /// Forward intermediates kept for the backward pass.
    aux: Vec<Array2<T>>,
    needs_grad: bool,
}

/// Row-wise softmax of `x * inv_temp`, max-subtracted.
pub fn softmax_rows<T: Real>(x: ArrayView2<T>, inv_temp: T) -> Array2<T> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = ((*v - max) * inv_temp).exp();
            sum += *v;
        }
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Columns of the rotation are the Gram-Schmidt frame of `(a, b)`.
/// Returns row-major entries, `None` when degenerate.
pub fn rot6_to_matrix<T: Real>(r: &[T]) -> Option<[T; 9]> {
    let tol = T::lit(1e-12);
    let a = [r[0], r[1], r[2]];
    let b = [r[3], r[4], r[5]];
    let na = crate::scalar::norm3(a);
    if !(na >= tol) {
        return None;
    }
    let r1 = crate::scalar::scale3(a, T::one() / na);
    let bp = crate::scalar::sub3(b, crate::scalar::scale3(r1, crate::scalar::dot3(b, r1)));
    let nb = crate::scalar::norm3(bp);
    if !(nb >= tol) {
        return None;
    }
    let r2 = crate::scalar::scale3(bp, T::one() / nb);
    let r3 = crate::scalar::cross3(r1, r2);
    let mut m = [T::zero(); 9];
    for i in 0..3 {
        m[3 * i] = r1[i];
        m[3 * i + 1] = r2[i];
        m[3 * i + 2] = r3[i];
    }
    Some(m)
}

const TILE: usize = 32;

/// Calls `f(i, j)` for every `j < i < n`, tile by tile to stay in cache.
fn for_lower<F: FnMut(usize, usize) -> bool>(n: usize, mut f: F) -> bool {
    for i0 in (0..n).step_by(TILE) {
        for j0 in (0..=i0).step_by(TILE) {
            for i in i0..(i0 + TILE).min(n) {
                for j in j0..(j0 + TILE).min(i) {
                    if !f(i, j) {
                        return false;
                    }
                }
            }
        }
    }
    true
}

fn is_symmetric<T: Real>(a: &Array2<T>) -> bool {
    a.is_square() && for_lower(a.nrows(), |i, j| a[[i, j]] == a[[j, i]])
}

/// `a bᵀ` for a product known to be symmetric (`a = b S` with symmetric `S`).
/// Only the block upper triangle is multiplied; the rest is mirrored.
fn symmetric_product<T: Real>(a: &Array2<T>, b: &Array2<T>) -> Array2<T> {
    const BLOCK: usize = 128;
    let n = a.nrows();
    let mut out = Array2::zeros((n, n));
    for i0 in (0..n).step_by(BLOCK) {
        let i1 = (i0 + BLOCK).min(n);
        let strip = a.slice(s![i0..i1, ..]).dot(&b.slice(s![i0.., ..]).t());
        out.slice_mut(s![i0..i1, i0..]).assign(&strip);
    }
    for_lower(n, |i, j| {
        out[[i, j]] = out[[j, i]];
        true
    });
    out
}

type Evaluated<T> = (Array2<T>, Vec<Array2<T>>);

fn eval<T: Real>(op: &Op<T>, nodes: &[Node<T>], me: usize) -> Result<Evaluated<T>, AutodiffError> {
    let v = |id: &NodeId| &nodes[id.0].value;
    if let Op::Distortion(p, other, own) = op {
        let m = v(p).dot(&**other);
        let mut e = if is_symmetric(other) {
            symmetric_product(&m, v(p))
        } else {
            m.dot(&v(p).t())
        };
        e -= &**own;
        let value = Array2::from_elem((1, 1), e.iter().map(|&x| x * x).sum());
        return Ok((value, vec![m, e]));
    }
    let value = match op {
        Op::Leaf => unreachable!("leaves are not evaluated"),
        Op::Add(a, b) => v(a) + v(b),
        Op::Sub(a, b) => v(a) - v(b),
        Op::Mul(a, b) => v(a) * v(b),
        Op::Scale(a, c) => v(a) * *c,
        Op::MatMul(a, b) => v(a).dot(v(b)),
        Op::MatMulT(a, b) => v(a).dot(&v(b).t()),
        Op::Transpose(a) => v(a).t().to_owned(),
        Op::SoftmaxRows(a, inv_temp) => softmax_rows(v(a).view(), *inv_temp),
        Op::NormalizeRows(a) => {
            let mut out = v(a).clone();
            for (row, mut r) in out.rows_mut().into_iter().enumerate() {
                let n = r.dot(&r).sqrt();
                if !(n > T::zero()) {
                    return Err(AutodiffError::ZeroRow { node: me, row });
                }
                r.mapv_inplace(|x| x / n);
            }
            out
        }
        Op::ConcatCols(xs) => {
            let views: Vec<_> = xs.iter().map(|x| v(x).view()).collect();
            ndarray::concatenate(Axis(1), &views).expect("row counts differ")
        }
        Op::GatherRows(a, idx) => gather_rows(v(a).view(), idx),
        Op::ScatterAddRows(a, idx, rows) => scatter_add_rows(v(a).view(), idx, *rows),
        Op::SegmentMax(a, seg, n) => segment_max(v(a).view(), seg, *n).0,
        Op::SparseMatMul(m, a) => m.matmul(v(a).view()),
        Op::ScaleRows(a, w) => {
            let mut out = v(a).clone();
            for (mut r, &wi) in out.rows_mut().into_iter().zip(w.iter()) {
                r.mapv_inplace(|x| x * wi);
            }
            out
        }
        Op::Exp(a) => v(a).mapv(T::exp),
        Op::Sqrt(a) => v(a).mapv(T::sqrt),
        Op::Sum(a) => Array2::from_elem((1, 1), v(a).sum()),
        Op::SumSquares(a) => Array2::from_elem((1, 1), v(a).iter().map(|&x| x * x).sum()),
        Op::Rot6ToMatrix(a) => {
            let x = v(a);
            let mut out = Array2::zeros((x.nrows(), 9));
            for (row, src) in x.rows().into_iter().enumerate() {
                let s: Vec<T> = src.to_vec();
                let m = rot6_to_matrix(&s).ok_or(AutodiffError::DegenerateRotation { node: me, row })?;
                for (k, e) in m.into_iter().enumerate() {
                    out[[row, k]] = e;
                }
            }
            out
        }
        Op::RotateRows(r, p) => {
            let (r, p) = (v(r), v(p));
            let mut out = Array2::zeros((p.nrows(), 3));
            for k in 0..p.nrows() {
                for a in 0..3 {
                    out[[k, a]] = r[[k, 3 * a]] * p[[k, 0]]
                        + r[[k, 3 * a + 1]] * p[[k, 1]]
                        + r[[k, 3 * a + 2]] * p[[k, 2]];
                }
            }
            out
        }
        Op::Distortion(..) => unreachable!(),
    };
    Ok((value, Vec::new()))
}

/// A recording of one forward evaluation.
#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Adjoints of one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    adjoints: Vec<Option<Array2<T>>>,
    shapes: Vec<(usize, usize)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to `id`; zeros if untouched.
    pub fn get(&self, id: NodeId) -> Array2<T> {
        self.adjoints[id.0]
            .clone()
            .unwrap_or_else(|| Array2::zeros(self.shapes[id.0]))
    }
}

fn rows_dot<T: Real>(a: &Array2<T>, b: &Array2<T>) -> Vec<T> {
    a.rows()
        .into_iter()
        .zip(b.rows())
        .map(|(x, y)| x.dot(&y))
        .collect()
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array2<T> {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> T {
        self.nodes[id.0].value[[0, 0]]
    }

    fn leaf(&mut self, value: Array2<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            aux: Vec::new(),
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// An optimizable input.
    pub fn variable(&mut self, value: Array2<T>) -> NodeId {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Array2<T>) -> NodeId {
        self.leaf(value, false)
    }

    fn try_push(&mut self, op: Op<T>) -> Result<NodeId, AutodiffError> {
        let me = self.nodes.len();
        let (value, aux) = eval(&op, &self.nodes, me)?;
        let needs_grad = op.inputs().iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            op,
            value,
            aux,
            needs_grad,
        });
        Ok(NodeId(me))
    }

    fn push(&mut self, op: Op<T>) -> NodeId {
        self.try_push(op).expect("infallible op")
    }

    fn same_shape(&self, a: NodeId, b: NodeId) {
        assert_eq!(
            self.value(a).dim(),
            self.value(b).dim(),
            "shape mismatch between nodes {} and {}",
            a.0,
            b.0
        );
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.same_shape(a, b);
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.same_shape(a, b);
        self.push(Op::Sub(a, b))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.same_shape(a, b);
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> NodeId {
        self.push(Op::Scale(a, c))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).ncols(), self.value(b).nrows(), "matmul shapes");
        self.push(Op::MatMul(a, b))
    }

    /// `a * bᵀ`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).ncols(), self.value(b).ncols(), "matmul_t shapes");
        self.push(Op::MatMulT(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Transpose(a))
    }

    /// Row-wise softmax of `a / temperature`.
    pub fn softmax_rows(&mut self, a: NodeId, temperature: T) -> NodeId {
        self.push(Op::SoftmaxRows(a, T::one() / temperature))
    }

    pub fn normalize_rows(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.try_push(Op::NormalizeRows(a))
    }

    pub fn concat_cols(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty());
        self.push(Op::ConcatCols(xs.to_vec()))
    }

    pub fn gather_rows(&mut self, a: NodeId, index: Arc<Vec<usize>>) -> NodeId {
        let n = self.value(a).nrows();
        assert!(index.iter().all(|&i| i < n), "gather index out of range");
        self.push(Op::GatherRows(a, index))
    }

    pub fn scatter_add_rows(&mut self, a: NodeId, index: Arc<Vec<usize>>, rows: usize) -> NodeId {
        assert_eq!(index.len(), self.value(a).nrows());
        assert!(index.iter().all(|&i| i < rows), "scatter index out of range");
        self.push(Op::ScatterAddRows(a, index, rows))
    }

    /// Column-wise max over rows sharing a segment id; every segment must
    /// be nonempty.
    pub fn segment_max(&mut self, a: NodeId, segment: Arc<Vec<usize>>, segments: usize) -> NodeId {
        assert_eq!(segment.len(), self.value(a).nrows());
        self.push(Op::SegmentMax(a, segment, segments))
    }

    /// Constant sparse matrix times `a`.
    pub fn sparse_matmul(&mut self, m: Arc<Csr<T>>, a: NodeId) -> NodeId {
        assert_eq!(m.cols, self.value(a).nrows());
        self.push(Op::SparseMatMul(m, a))
    }

    /// Multiplies row `k` by the constant `w[k]`.
    pub fn scale_rows(&mut self, a: NodeId, w: Arc<Vec<T>>) -> NodeId {
        assert_eq!(w.len(), self.value(a).nrows());
        self.push(Op::ScaleRows(a, w))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Exp(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sqrt(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }

    /// Squared Frobenius norm.
    pub fn sum_squares(&mut self, a: NodeId) -> NodeId {
        self.push(Op::SumSquares(a))
    }

    /// `n×6` rotation parameters to `n×9` row-major rotation matrices.
    pub fn rot6_to_matrix(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        assert_eq!(self.value(a).ncols(), 6);
        self.try_push(Op::Rot6ToMatrix(a))
    }

    /// Row `k` of the result is `R_k p_k` for `r: K×9`, `p: K×3`.
    pub fn rotate_rows(&mut self, r: NodeId, p: NodeId) -> NodeId {
        assert_eq!(self.value(r).ncols(), 9);
        assert_eq!(self.value(p).ncols(), 3);
        assert_eq!(self.value(r).nrows(), self.value(p).nrows());
        self.push(Op::RotateRows(r, p))
    }

    /// `‖P B Pᵀ - A‖²` for constant square `A` (`n×n`) and symmetric `B`
    /// (`m×m`), with `P: n×m`.
    pub fn distortion(&mut self, p: NodeId, b: Arc<Array2<T>>, a: Arc<Array2<T>>) -> NodeId {
        let (n, m) = self.value(p).dim();
        assert_eq!(b.dim(), (m, m), "distortion inner matrix");
        assert_eq!(a.dim(), (n, n), "distortion target matrix");
        self.push(Op::Distortion(p, b, a))
    }

    /// Recomputes every non-leaf value from the recorded ops.
    pub fn replay(&self) -> Result<Vec<Array2<T>>, AutodiffError> {
        let mut nodes: Vec<Node<T>> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let (value, aux) = match node.op {
                Op::Leaf => (node.value.clone(), Vec::new()),
                _ => eval(&node.op, &nodes, i)?,
            };
            nodes.push(Node {
                op: node.op.clone(),
                value,
                aux,
                needs_grad: node.needs_grad,
            });
        }
        Ok(nodes.into_iter().map(|n| n.value).collect())
    }

    /// Adjoints of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>, AutodiffError> {
        if self.value(loss).dim() != (1, 1) {
            return Err(AutodiffError::NotScalar(loss.0));
        }
        let n = loss.0 + 1;
        let mut adj: Vec<Option<Array2<T>>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(Array2::ones((1, 1)));
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            if g.iter().any(|x| !x.is_finite()) {
                return Err(AutodiffError::NonFinite {
                    node: i,
                    op: node.op.name(),
                });
            }
            self.propagate(i, &g, &mut adj);
            adj[i] = Some(g);
        }
        Ok(Gradients {
            adjoints: adj,
            shapes: self.nodes.iter().map(|n| n.value.dim()).collect(),
        })
    }

    fn propagate(&self, i: usize, g: &Array2<T>, adj: &mut [Option<Array2<T>>]) {
        let nodes = &self.nodes;
        let val = |id: NodeId| &nodes[id.0].value;
        let mut acc = |id: NodeId, d: Array2<T>| {
            if !nodes[id.0].needs_grad {
                return;
            }
            match &mut adj[id.0] {
                Some(a) => *a += &d,
                slot => *slot = Some(d),
            }
        };
        let wants = |id: NodeId| nodes[id.0].needs_grad;
        let y = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                if wants(*b) {
                    acc(*b, g.mapv(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    acc(*a, g * val(*b));
                }
                if wants(*b) {
                    acc(*b, g * val(*a));
                }
            }
            Op::Scale(a, c) => acc(*a, g * *c),
            Op::MatMul(a, b) => {
                if wants(*a) {
                    acc(*a, g.dot(&val(*b).t()));
                }
                if wants(*b) {
                    acc(*b, val(*a).t().dot(g));
                }
            }
            Op::MatMulT(a, b) => {
                if wants(*a) {
                    acc(*a, g.dot(val(*b)));
                }
                if wants(*b) {
                    acc(*b, g.t().dot(val(*a)));
                }
            }
            Op::Transpose(a) => acc(*a, g.t().to_owned()),
            Op::SoftmaxRows(a, inv_temp) => {
                let gy = g * y;
                let mut d = gy.clone();
                for (mut row, yr) in d.rows_mut().into_iter().zip(y.rows()) {
                    let s: T = row.sum();
                    Zip::from(&mut row).and(&yr).for_each(|r, &yy| *r -= yy * s);
                }
                acc(*a, d * *inv_temp);
            }
            Op::NormalizeRows(a) => {
                let x = val(*a);
                let yg = rows_dot(y, g);
                let mut d = g.clone();
                for (k, (mut row, (yr, xr))) in d
                    .rows_mut()
                    .into_iter()
                    .zip(y.rows().into_iter().zip(x.rows()))
                    .enumerate()
                {
                    let n = xr.dot(&xr).sqrt();
                    Zip::from(&mut row)
                        .and(&yr)
                        .for_each(|r, &yy| *r = (*r - yy * yg[k]) / n);
                }
                acc(*a, d);
            }
            Op::ConcatCols(xs) => {
                let mut start = 0;
                for x in xs {
                    let w = val(*x).ncols();
                    if wants(*x) {
                        acc(*x, g.slice(ndarray::s![.., start..start + w]).to_owned());
                    }
                    start += w;
                }
            }
            Op::GatherRows(a, idx) => {
                acc(*a, scatter_add_rows(g.view(), idx, val(*a).nrows()));
            }
            Op::ScatterAddRows(a, idx, _) => acc(*a, gather_rows(g.view(), idx)),
            Op::SegmentMax(a, seg, n) => {
                let x = val(*a);
                let (_, arg) = segment_max(x.view(), seg, *n);
                let mut d = Array2::zeros(x.dim());
                for ((s, c), &r) in arg.indexed_iter() {
                    if r != usize::MAX {
                        d[[r, c]] += g[[s, c]];
                    }
                }
                acc(*a, d);
            }
            Op::SparseMatMul(m, a) => acc(*a, m.t_matmul(g.view())),
            Op::ScaleRows(a, w) => {
                let mut d = g.clone();
                for (mut r, &wi) in d.rows_mut().into_iter().zip(w.iter()) {
                    r.mapv_inplace(|x| x * wi);
                }
                acc(*a, d);
            }
            Op::Exp(a) => acc(*a, g * y),
            Op::Sqrt(a) => acc(*a, Zip::from(g).and(y).map_collect(|&gg, &yy| gg / (yy + yy))),
            Op::Sum(a) => acc(*a, Array2::from_elem(val(*a).dim(), g[[0, 0]])),
            Op::SumSquares(a) => acc(*a, val(*a) * (g[[0, 0]] + g[[0, 0]])),
            Op::Rot6ToMatrix(a) => acc(*a, rot6_backward(val(*a), y, g)),
            Op::Distortion(p, _, _) => {
                // d/dP = 2 (E + Eᵀ) P B, with P B kept from the forward pass.
                let aux = &nodes[i].aux;
                let (m, e) = (&aux[0], &aux[1]);
                let mut sym = e + &e.t();
                sym *= g[[0, 0]] + g[[0, 0]];
                acc(*p, sym.dot(m));
            }
            Op::RotateRows(r, p) => {
                let (rv, pv) = (val(*r), val(*p));
                if wants(*r) {
                    let mut d = Array2::zeros(rv.dim());
                    for k in 0..pv.nrows() {
                        for a in 0..3 {
                            for b in 0..3 {
                                d[[k, 3 * a + b]] = g[[k, a]] * pv[[k, b]];
                            }
                        }
                    }
                    acc(*r, d);
                }
                if wants(*p) {
                    let mut d = Array2::zeros(pv.dim());
                    for k in 0..pv.nrows() {
                        for b in 0..3 {
                            d[[k, b]] = (0..3).map(|a| rv[[k, 3 * a + b]] * g[[k, a]]).sum();
                        }
                    }
                    acc(*p, d);
                }
            }
        }
    }
}

fn rot6_backward<T: Real>(x: &Array2<T>, y: &Array2<T>, g: &Array2<T>) -> Array2<T> {
    use crate::scalar::{cross3, dot3, norm3, scale3, sub3};
    let mut out = Array2::zeros(x.dim());
    for k in 0..x.nrows() {
        let a = [x[[k, 0]], x[[k, 1]], x[[k, 2]]];
        let b = [x[[k, 3]], x[[k, 4]], x[[k, 5]]];
        let col = |c: usize| [y[[k, c]], y[[k, 3 + c]], y[[k, 6 + c]]];
        let gcol = |c: usize| [g[[k, c]], g[[k, 3 + c]], g[[k, 6 + c]]];
        let (r1, r2) = (col(0), col(1));
        let (mut g1, mut g2, g3) = (gcol(0), gcol(1), gcol(2));
        // r3 = r1 × r2
        g1 = crate::scalar::add3(g1, cross3(r2, g3));
        g2 = crate::scalar::add3(g2, cross3(g3, r1));
        // r2 = b' / |b'|, b' = b - (b·r1) r1
        let bp = sub3(b, scale3(r1, dot3(b, r1)));
        let nbp = norm3(bp);
        let gbp = scale3(sub3(g2, scale3(r2, dot3(r2, g2))), T::one() / nbp);
        let gb = sub3(gbp, scale3(r1, dot3(r1, gbp)));
        g1 = sub3(
            g1,
            crate::scalar::add3(scale3(gbp, dot3(b, r1)), scale3(b, dot3(r1, gbp))),
        );
        // r1 = a / |a|
        let ga = scale3(sub3(g1, scale3(r1, dot3(r1, g1))), T::one() / norm3(a));
        for c in 0..3 {
            out[[k, c]] = ga[c];
            out[[k, 3 + c]] = gb[c];
        }
    }
    out
}
