//! Wengert-list tape for reverse-mode differentiation.
//!
//! Every operation appends one node holding its output value. Nodes are
//! only ever appended, so the list is already in topological order and the
//! backward pass is a single reverse sweep.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use super::params::{ParamId, ParamStore};
use super::{Real, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    ElementwiseMul,
    ScalarMul,
    MatMul,
    Transpose,
    Reshape,
    Concat,
    GatherRows,
    ReduceSum,
    ReduceMean,
    Sigmoid,
    Exp,
    Log,
    SoftmaxLastDim,
    LayerNormLastDim,
    Gelu,
    L2NormalizeLastDim,
    PowScalar,
    Clamp,
    SliceColumns,
    SparseMatMul,
    Backward,
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::ElementwiseMul => "elementwise_mul",
            OpKind::ScalarMul => "scalar_mul",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Reshape => "reshape",
            OpKind::Concat => "concat",
            OpKind::GatherRows => "gather_rows",
            OpKind::ReduceSum => "reduce_sum",
            OpKind::ReduceMean => "reduce_mean",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::SoftmaxLastDim => "softmax_last_dim",
            OpKind::LayerNormLastDim => "layer_norm_last_dim",
            OpKind::Gelu => "gelu",
            OpKind::L2NormalizeLastDim => "l2_normalize_last_dim",
            OpKind::PowScalar => "pow_scalar",
            OpKind::Clamp => "clamp",
            OpKind::SliceColumns => "slice_columns",
            OpKind::SparseMatMul => "sparse_matmul",
            OpKind::Backward => "backward",
        };
        f.write_str(name)
    }
}

/// An operation together with its attributes.
///
/// Shape rules:
/// - `Add`, `Sub`, `Mul`: equal shapes, or one operand with a single element
///   (scalar-against-tensor). `Add` also takes `[.., d] + [d]`, adding the
///   vector to every row. No other broadcasting.
/// - `MatMul`: `[m, k] x [k, n] -> [m, n]`; `MatMulNT`: `[m, k] x [n, k]^T
///   -> [m, n]`. `Transpose`: `[r, c] -> [c, r]`.
/// - `SliceColumns`: `[r, c] -> [r, end - start]`.
/// - `SparseMatMul`: constant `[m, n]` sparse matrix times `[n, k]`.
/// - `Reshape`: same element count.
/// - `Concat`: equal rank, extents equal except along `axis`.
/// - `GatherRows`: `[r, ...] -> [len(indices), ...]`, every index `< r`.
/// - `ReduceSum`/`ReduceMean`: `axis: None` reduces to a scalar `[]`,
///   otherwise removes that axis.
/// - `SoftmaxLastDim`, `L2NormalizeLastDim`: any rank >= 1, row-wise.
/// - `LayerNormLastDim`: inputs `(x [.., d], gain [d], bias [d])`.
/// - Unary elementwise kinds preserve shape.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Add,
    Sub,
    Mul,
    ScalarMul(f64),
    MatMul,
    /// `a b^T`, recorded as a matmul.
    MatMulNT,
    Transpose,
    Reshape(Vec<usize>),
    Concat { axis: usize },
    GatherRows(Vec<usize>),
    ReduceSum { axis: Option<usize> },
    ReduceMean { axis: Option<usize> },
    Sigmoid,
    Exp,
    Log,
    SoftmaxLastDim,
    LayerNormLastDim { eps: f64 },
    Gelu,
    L2NormalizeLastDim,
    /// `x^p` for `x >= 0`.
    PowScalar(f64),
    /// Elementwise clamp into `[lo, hi]`; zero gradient outside the interval.
    Clamp { lo: f64, hi: f64 },
    SliceColumns { start: usize, end: usize },
    SparseMatMul(Arc<SparseMatrix>),
}

impl Op {
    pub fn kind(&self) -> OpKind {
        match self {
            Op::Add => OpKind::Add,
            Op::Sub => OpKind::Sub,
            Op::Mul => OpKind::ElementwiseMul,
            Op::ScalarMul(_) => OpKind::ScalarMul,
            Op::MatMul | Op::MatMulNT => OpKind::MatMul,
            Op::Transpose => OpKind::Transpose,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Concat { .. } => OpKind::Concat,
            Op::GatherRows(_) => OpKind::GatherRows,
            Op::ReduceSum { .. } => OpKind::ReduceSum,
            Op::ReduceMean { .. } => OpKind::ReduceMean,
            Op::Sigmoid => OpKind::Sigmoid,
            Op::Exp => OpKind::Exp,
            Op::Log => OpKind::Log,
            Op::SoftmaxLastDim => OpKind::SoftmaxLastDim,
            Op::LayerNormLastDim { .. } => OpKind::LayerNormLastDim,
            Op::Gelu => OpKind::Gelu,
            Op::L2NormalizeLastDim => OpKind::L2NormalizeLastDim,
            Op::PowScalar(_) => OpKind::PowScalar,
            Op::Clamp { .. } => OpKind::Clamp,
            Op::SliceColumns { .. } => OpKind::SliceColumns,
            Op::SparseMatMul(_) => OpKind::SparseMatMul,
        }
    }

    fn arity(&self) -> usize {
        match self {
            Op::Add | Op::Sub | Op::Mul | Op::MatMul | Op::MatMulNT => 2,
            Op::LayerNormLastDim { .. } => 3,
            Op::Concat { .. } => usize::MAX,
            _ => 1,
        }
    }
}

/// Constant sparse matrix in compressed-row form.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    row_start: Vec<usize>,
    entries: Vec<(usize, f64)>,
}

impl SparseMatrix {
    /// From per-row `(column, value)` lists.
    pub fn from_rows(cols: usize, rows: Vec<Vec<(usize, f64)>>) -> Result<Self, TensorError> {
        let mut row_start = Vec::with_capacity(rows.len() + 1);
        let mut entries = Vec::new();
        row_start.push(0);
        for row in &rows {
            for &(c, v) in row {
                if c >= cols {
                    return Err(TensorError::IndexOutOfRange {
                        kind: OpKind::SparseMatMul,
                        index: c,
                        len: cols,
                    });
                }
                entries.push((c, v));
            }
            row_start.push(entries.len());
        }
        Ok(SparseMatrix {
            rows: rows.len(),
            cols,
            row_start,
            entries,
        })
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn row(&self, r: usize) -> &[(usize, f64)] {
        &self.entries[self.row_start[r]..self.row_start[r + 1]]
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.rows * self.cols];
        for r in 0..self.rows {
            for &(c, v) in self.row(r) {
                out[r * self.cols + c] += v;
            }
        }
        out
    }
}

/// Norms below this are treated as a degenerate embedding.
pub const MIN_NORM: f64 = 1e-12;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

struct Node<T> {
    value: Vec<T>,
    shape: Vec<usize>,
    op: Option<Op>,
    inputs: Vec<Var>,
    requires_grad: bool,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ParamLeaf {
    pub var: Var,
    pub store: u64,
    pub id: ParamId,
}

/// Records operations and replays them backwards.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: Vec<ParamLeaf>,
    param_cache: HashMap<(u64, ParamId), Var>,
    consumed: bool,
    macs: u64,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<ParamLeaf>,
    visited: usize,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf that the loss depends on.
    pub fn get(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Number of recorded operations replayed by the backward sweep.
    pub fn ops_visited(&self) -> usize {
        self.visited
    }

    /// Adds every parameter gradient belonging to `store` into that store.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) -> Result<(), TensorError> {
        let uid = store.uid();
        for leaf in self.params.iter().filter(|p| p.store == uid) {
            if let Some(g) = self.get(leaf.var) {
                store.get_mut(leaf.id).tensor.accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: Vec::new(),
            param_cache: HashMap::new(),
            consumed: false,
            macs: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulate count of all matmuls recorded so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    fn push_leaf(&mut self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            shape,
            op: None,
            inputs: Vec::new(),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Inserts a tensor as a leaf; gradients flow to it iff it requires grad.
    pub fn leaf(&mut self, tensor: &Tensor<T>) -> Var {
        self.push_leaf(
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            tensor.requires_grad(),
        )
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.contains(&0) {
            return Err(TensorError::LengthMismatch {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(self.push_leaf(shape.to_vec(), data, false))
    }

    pub fn scalar(&mut self, value: T) -> Var {
        self.push_leaf(Vec::new(), vec![value], false)
    }

    /// Binds a parameter of `store` on this tape. Repeated binds of the same
    /// parameter return the same node. Frozen stores bind as constants.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let key = (store.uid(), id);
        if let Some(&v) = self.param_cache.get(&key) {
            return v;
        }
        let p = store.get(id);
        let trainable = !store.is_frozen();
        let var = self.push_leaf(p.tensor.shape().to_vec(), p.tensor.data().to_vec(), trainable);
        if trainable {
            self.params.push(ParamLeaf {
                var,
                store: store.uid(),
                id,
            });
        }
        self.param_cache.insert(key, var);
        var
    }

    pub fn value(&self, var: Var) -> &[T] {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        &self.nodes[var.0].shape
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub fn tensor(&self, var: Var) -> Tensor<T> {
        let n = &self.nodes[var.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node invariant")
    }

    /// Single element of a one-element node.
    pub fn item(&self, var: Var) -> Result<T, TensorError> {
        let n = &self.nodes[var.0];
        if n.value.len() != 1 {
            return Err(TensorError::NotScalar {
                shape: n.shape.clone(),
            });
        }
        Ok(n.value[0])
    }

    /// Evaluates `op` on `inputs` and records it.
    pub fn forward(&mut self, op: Op, inputs: &[Var]) -> Result<Var, TensorError> {
        let kind = op.kind();
        let arity = op.arity();
        if (arity != usize::MAX && inputs.len() != arity) || inputs.is_empty() {
            return Err(TensorError::Arity {
                kind,
                got: inputs.len(),
            });
        }
        let (value, shape) = {
            let args: Vec<(&[T], &[usize])> = inputs
                .iter()
                .map(|v| {
                    let n = &self.nodes[v.0];
                    (n.value.as_slice(), n.shape.as_slice())
                })
                .collect();
            compute(&op, &args)?
        };
        if !value.iter().all(|x| x.is_finite()) {
            return Err(TensorError::NonFinite { kind });
        }
        match &op {
            Op::MatMul | Op::MatMulNT => {
                let a = &self.nodes[inputs[0].0].shape;
                self.macs += (a[0] * a[1] * shape[1]) as u64;
            }
            Op::SparseMatMul(m) => self.macs += (m.nnz() * shape[1]) as u64,
            _ => {}
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            shape,
            op: Some(op),
            inputs: inputs.to_vec(),
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.forward(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.forward(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.forward(Op::Mul, &[a, b])
    }

    pub fn scalar_mul(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        self.forward(Op::ScalarMul(c), &[a])
    }

    /// `a + c` for a constant `c`.
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        let s = self.scalar(T::of(c));
        self.add(a, s)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.forward(Op::MatMul, &[a, b])
    }

    /// `a b^T` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.forward(Op::MatMulNT, &[a, b])
    }

    pub fn columns(&mut self, a: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        self.forward(Op::SliceColumns { start, end }, &[a])
    }

    /// Constant sparse `m` times `a`.
    pub fn sparse_matmul(&mut self, m: &Arc<SparseMatrix>, a: Var) -> Result<Var, TensorError> {
        self.forward(Op::SparseMatMul(Arc::clone(m)), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        self.forward(Op::Transpose, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        self.forward(Op::Reshape(shape.to_vec()), &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        self.forward(Op::Concat { axis }, parts)
    }

    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var, TensorError> {
        self.forward(Op::GatherRows(indices.to_vec()), &[a])
    }

    /// Contiguous row range `[start, end)`.
    pub fn rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let idx: Vec<usize> = (start..end).collect();
        self.gather_rows(a, &idx)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        self.forward(Op::ReduceSum { axis: None }, &[a])
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        self.forward(Op::ReduceSum { axis: Some(axis) }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        self.forward(Op::ReduceMean { axis: None }, &[a])
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        self.forward(Op::ReduceMean { axis: Some(axis) }, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        self.forward(Op::Sigmoid, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, TensorError> {
        self.forward(Op::Exp, &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var, TensorError> {
        self.forward(Op::Log, &[a])
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        self.forward(Op::SoftmaxLastDim, &[a])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, TensorError> {
        self.forward(Op::LayerNormLastDim { eps }, &[x, gain, bias])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var, TensorError> {
        self.forward(Op::Gelu, &[a])
    }

    pub fn l2_normalize(&mut self, a: Var) -> Result<Var, TensorError> {
        self.forward(Op::L2NormalizeLastDim, &[a])
    }

    pub fn pow_scalar(&mut self, a: Var, p: f64) -> Result<Var, TensorError> {
        self.forward(Op::PowScalar(p), &[a])
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var, TensorError> {
        self.forward(Op::Clamp { lo, hi }, &[a])
    }

    /// Backward pass seeded with d(loss)/d(loss) = 1.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>, TensorError> {
        self.backward_scaled(loss, T::one())
    }

    /// Backward pass seeded with `seed`, i.e. gradients of `seed * loss`.
    /// The tape can be replayed only once.
    pub fn backward_scaled(&mut self, loss: Var, seed: T) -> Result<Gradients<T>, TensorError> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(TensorError::NotScalar {
                shape: root.shape.clone(),
            });
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        if root.requires_grad {
            grads[loss.0] = Some(vec![seed]);
        }
        let mut visited = 0;
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(op) = &node.op else { continue };
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            visited += 1;
            backprop(op, node, &self.nodes, &g, &mut grads);
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if node.op.is_some() {
                grads[i] = None;
            } else if let Some(g) = &grads[i] {
                if !g.iter().all(|x| x.is_finite()) {
                    return Err(TensorError::NonFinite {
                        kind: OpKind::Backward,
                    });
                }
            }
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
            visited,
        })
    }
}

fn shape_err(kind: OpKind, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        kind,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn last_dim(kind: OpKind, shape: &[usize]) -> Result<(usize, usize), TensorError> {
    match shape.last() {
        Some(&d) => Ok((shape.iter().product::<usize>() / d, d)),
        None => Err(shape_err(kind, shape, &[])),
    }
}

/// Splits `shape` around `axis` into `(outer, len, inner)`.
fn around_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

const LANES: usize = 8;

/// Sum with independent partial sums so the loop vectorizes.
fn lane_sum<T: Real>(xs: &[T]) -> T {
    let mut acc = [T::zero(); LANES];
    let mut chunks = xs.chunks_exact(LANES);
    for c in &mut chunks {
        for (a, &v) in acc.iter_mut().zip(c) {
            *a = *a + v;
        }
    }
    let tail = chunks.remainder().iter().copied().sum::<T>();
    acc.iter().copied().sum::<T>() + tail
}

fn lane_max<T: Real>(xs: &[T]) -> T {
    let mut acc = [T::neg_infinity(); LANES];
    let mut chunks = xs.chunks_exact(LANES);
    for c in &mut chunks {
        for (a, &v) in acc.iter_mut().zip(c) {
            *a = if v > *a { v } else { *a };
        }
    }
    let m = chunks.remainder().iter().copied().fold(T::neg_infinity(), T::max);
    acc.iter().copied().fold(m, T::max)
}

/// `[.., d] + [d]` with at least two axes on the left.
fn row_broadcast(lhs: &[usize], rhs: &[usize]) -> bool {
    rhs.len() == 1 && rhs[0] > 1 && lhs.len() > 1 && lhs.last() == Some(&rhs[0])
}

fn binary<T: Real>(
    kind: OpKind,
    a: (&[T], &[usize]),
    b: (&[T], &[usize]),
    f: impl Fn(T, T) -> T,
) -> Result<(Vec<T>, Vec<usize>), TensorError> {
    if a.1 == b.1 {
        Ok((a.0.iter().zip(b.0).map(|(&x, &y)| f(x, y)).collect(), a.1.to_vec()))
    } else if b.0.len() == 1 {
        let y = b.0[0];
        Ok((a.0.iter().map(|&x| f(x, y)).collect(), a.1.to_vec()))
    } else if a.0.len() == 1 {
        let x = a.0[0];
        Ok((b.0.iter().map(|&y| f(x, y)).collect(), b.1.to_vec()))
    } else {
        Err(shape_err(kind, a.1, b.1))
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Inner argument `u = c (x + a x^3)` and `tanh(u)` of the tanh-form GELU.
/// `tanh` goes through one exp per element, `(1 - e) / (1 + e)` with
/// `e = exp(-2|u|)`, far cheaper than the libm routine and accurate to a few
/// ulps.
fn gelu_parts<T: Real>(x: &[T]) -> (Vec<T>, Vec<T>) {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let u: Vec<T> = x.iter().map(|&v| c * (v + a * v * v * v)).collect();
    let mut e: Vec<T> = u.iter().map(|&v| T::of(-2.0) * v.abs()).collect();
    T::exp_in_place(&mut e);
    for (ev, &uv) in e.iter_mut().zip(&u) {
        let t = (T::one() - *ev) / (T::one() + *ev);
        *ev = if uv < T::zero() { -t } else { t };
    }
    (u, e)
}

fn layer_norm_stats<T: Real>(row: &[T], eps: T) -> (T, T) {
    let d = T::of(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / d;
    let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / d;
    (mean, T::one() / (var + eps).sqrt())
}

fn compute<T: Real>(op: &Op, args: &[(&[T], &[usize])]) -> Result<(Vec<T>, Vec<usize>), TensorError> {
    let kind = op.kind();
    let (x, xs) = args[0];
    match op {
        Op::Add => {
            let (y, ys) = args[1];
            if row_broadcast(xs, ys) {
                let mut out = x.to_vec();
                for row in out.chunks_mut(y.len()) {
                    for (a, &b) in row.iter_mut().zip(y) {
                        *a = *a + b;
                    }
                }
                Ok((out, xs.to_vec()))
            } else {
                binary(kind, args[0], args[1], |a, b| a + b)
            }
        }
        Op::Sub => binary(kind, args[0], args[1], |a, b| a - b),
        Op::Mul => binary(kind, args[0], args[1], |a, b| a * b),
        Op::ScalarMul(c) => {
            let c = T::of(*c);
            Ok((x.iter().map(|&v| v * c).collect(), xs.to_vec()))
        }
        Op::MatMul => {
            let (y, ys) = args[1];
            if xs.len() != 2 || ys.len() != 2 || xs[1] != ys[0] {
                return Err(shape_err(kind, xs, ys));
            }
            let (m, k, n) = (xs[0], xs[1], ys[1]);
            let mut out = vec![T::zero(); m * n];
            T::gemm(m, k, n, x, false, y, false, &mut out, false);
            Ok((out, vec![m, n]))
        }
        Op::MatMulNT => {
            let (y, ys) = args[1];
            if xs.len() != 2 || ys.len() != 2 || xs[1] != ys[1] {
                return Err(shape_err(kind, xs, ys));
            }
            let (m, k, n) = (xs[0], xs[1], ys[0]);
            let mut out = vec![T::zero(); m * n];
            T::gemm(m, k, n, x, false, y, true, &mut out, false);
            Ok((out, vec![m, n]))
        }
        Op::SliceColumns { start, end } => {
            if xs.len() != 2 || start >= end || *end > xs[1] {
                return Err(shape_err(kind, xs, &[*start, *end]));
            }
            let mut out = Vec::with_capacity(xs[0] * (end - start));
            for row in x.chunks(xs[1]) {
                out.extend_from_slice(&row[*start..*end]);
            }
            Ok((out, vec![xs[0], end - start]))
        }
        Op::SparseMatMul(m) => {
            if xs.len() != 2 || xs[0] != m.cols {
                return Err(shape_err(kind, &m.shape(), xs));
            }
            let k = xs[1];
            let mut out = vec![T::zero(); m.rows * k];
            for (r, dst) in out.chunks_mut(k).enumerate() {
                for &(c, v) in m.row(r) {
                    let v = T::of(v);
                    for (o, &s) in dst.iter_mut().zip(&x[c * k..(c + 1) * k]) {
                        *o = *o + v * s;
                    }
                }
            }
            Ok((out, vec![m.rows, k]))
        }
        Op::Transpose => {
            if xs.len() != 2 {
                return Err(shape_err(kind, xs, &[]));
            }
            Ok((transpose(x, xs[0], xs[1]), vec![xs[1], xs[0]]))
        }
        Op::Reshape(shape) => {
            let numel: usize = shape.iter().product();
            if numel != x.len() || shape.contains(&0) {
                return Err(shape_err(kind, xs, shape));
            }
            Ok((x.to_vec(), shape.clone()))
        }
        Op::Concat { axis } => {
            let axis = *axis;
            if axis >= xs.len() {
                return Err(shape_err(kind, xs, &[axis]));
            }
            let mut out_shape = xs.to_vec();
            out_shape[axis] = 0;
            for &(_, s) in args {
                let same_rest = s.len() == xs.len()
                    && s.iter().zip(xs).enumerate().all(|(i, (a, b))| i == axis || a == b);
                if !same_rest {
                    return Err(shape_err(kind, xs, s));
                }
                out_shape[axis] += s[axis];
            }
            let outer: usize = xs[..axis].iter().product();
            let mut out = Vec::with_capacity(out_shape.iter().product());
            for o in 0..outer {
                for &(d, s) in args {
                    let chunk: usize = s[axis..].iter().product();
                    out.extend_from_slice(&d[o * chunk..(o + 1) * chunk]);
                }
            }
            Ok((out, out_shape))
        }
        Op::GatherRows(indices) => {
            if xs.is_empty() || indices.is_empty() {
                return Err(shape_err(kind, xs, &[indices.len()]));
            }
            let rows = xs[0];
            let width = x.len() / rows;
            let mut out = Vec::with_capacity(indices.len() * width);
            for &r in indices {
                if r >= rows {
                    return Err(TensorError::IndexOutOfRange {
                        kind,
                        index: r,
                        len: rows,
                    });
                }
                out.extend_from_slice(&x[r * width..(r + 1) * width]);
            }
            let mut shape = xs.to_vec();
            shape[0] = indices.len();
            Ok((out, shape))
        }
        Op::ReduceSum { axis } | Op::ReduceMean { axis } => {
            let mean = matches!(op, Op::ReduceMean { .. });
            match axis {
                None => {
                    let mut s = x.iter().copied().sum::<T>();
                    if mean {
                        s = s / T::of(x.len() as f64);
                    }
                    Ok((vec![s], Vec::new()))
                }
                Some(axis) => {
                    let axis = *axis;
                    if axis >= xs.len() {
                        return Err(shape_err(kind, xs, &[axis]));
                    }
                    let (outer, len, inner) = around_axis(xs, axis);
                    let mut out = vec![T::zero(); outer * inner];
                    for o in 0..outer {
                        for l in 0..len {
                            let src = &x[(o * len + l) * inner..(o * len + l + 1) * inner];
                            for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                                *acc = *acc + v;
                            }
                        }
                    }
                    if mean {
                        let n = T::of(len as f64);
                        out.iter_mut().for_each(|v| *v = *v / n);
                    }
                    let mut shape = xs.to_vec();
                    shape.remove(axis);
                    Ok((out, shape))
                }
            }
        }
        Op::Sigmoid => Ok((x.iter().map(|&v| sigmoid(v)).collect(), xs.to_vec())),
        Op::Exp => Ok((x.iter().map(|&v| v.exp()).collect(), xs.to_vec())),
        Op::Log => Ok((x.iter().map(|&v| v.ln()).collect(), xs.to_vec())),
        Op::Gelu => {
            let (_, t) = gelu_parts(x);
            let half = T::of(0.5);
            Ok((x.iter().zip(&t).map(|(&v, &t)| half * v * (T::one() + t)).collect(), xs.to_vec()))
        }
        Op::PowScalar(p) => {
            let p = T::of(*p);
            Ok((x.iter().map(|&v| v.powf(p)).collect(), xs.to_vec()))
        }
        Op::Clamp { lo, hi } => {
            let (lo, hi) = (T::of(*lo), T::of(*hi));
            Ok((x.iter().map(|&v| v.max(lo).min(hi)).collect(), xs.to_vec()))
        }
        Op::SoftmaxLastDim => {
            let (_, d) = last_dim(kind, xs)?;
            let mut out = x.to_vec();
            for row in out.chunks_mut(d) {
                let max = lane_max(row);
                row.iter_mut().for_each(|v| *v = *v - max);
                T::exp_in_place(row);
                let inv = T::one() / lane_sum(row);
                row.iter_mut().for_each(|v| *v = *v * inv);
            }
            Ok((out, xs.to_vec()))
        }
        Op::L2NormalizeLastDim => {
            let (_, d) = last_dim(kind, xs)?;
            let mut out = x.to_vec();
            for row in out.chunks_mut(d) {
                let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
                if norm.f64() < MIN_NORM {
                    return Err(TensorError::DegenerateNorm { norm: norm.f64() });
                }
                row.iter_mut().for_each(|v| *v = *v / norm);
            }
            Ok((out, xs.to_vec()))
        }
        Op::LayerNormLastDim { eps } => {
            let (_, d) = last_dim(kind, xs)?;
            let (gain, gs) = args[1];
            let (bias, bs) = args[2];
            if gs != [d] {
                return Err(shape_err(kind, xs, gs));
            }
            if bs != [d] {
                return Err(shape_err(kind, xs, bs));
            }
            let eps = T::of(*eps);
            let mut out = Vec::with_capacity(x.len());
            for row in x.chunks(d) {
                let (mean, rstd) = layer_norm_stats(row, eps);
                for i in 0..d {
                    out.push((row[i] - mean) * rstd * gain[i] + bias[i]);
                }
            }
            Ok((out, xs.to_vec()))
        }
    }
}

fn transpose<T: Copy>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for c in 0..cols {
        for r in 0..rows {
            out.push(x[r * cols + c]);
        }
    }
    out
}

fn slot<T: Real>(grads: &mut [Option<Vec<T>>], var: Var, len: usize) -> &mut Vec<T> {
    grads[var.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], var: Var, delta: impl Iterator<Item = T>) {
    match &mut grads[var.0] {
        Some(g) => {
            for (a, d) in g.iter_mut().zip(delta) {
                *a = *a + d;
            }
        }
        slot @ None => *slot = Some(delta.collect()),
    }
}

/// Gradient of an elementwise binary op into one operand, summing when that
/// operand was broadcast as a scalar.
fn binary_grad<T: Real>(
    grads: &mut [Option<Vec<T>>],
    var: Var,
    operand_len: usize,
    partial: impl Iterator<Item = T>,
) {
    if operand_len == 1 {
        let s = partial.sum::<T>();
        accumulate(grads, var, std::iter::once(s));
    } else {
        accumulate(grads, var, partial);
    }
}

fn backprop<T: Real>(op: &Op, node: &Node<T>, nodes: &[Node<T>], g: &[T], grads: &mut [Option<Vec<T>>]) {
    let inp = |i: usize| &nodes[node.inputs[i].0];
    let wants = |i: usize| nodes[node.inputs[i].0].requires_grad;
    let y = &node.value;
    match op {
        Op::Add if row_broadcast(&inp(0).shape, &inp(1).shape) => {
            if wants(0) {
                accumulate(grads, node.inputs[0], g.iter().copied());
            }
            if wants(1) {
                let d = inp(1).value.len();
                let gb = slot(grads, node.inputs[1], d);
                for row in g.chunks(d) {
                    for (a, &b) in gb.iter_mut().zip(row) {
                        *a = *a + b;
                    }
                }
            }
        }
        Op::Add | Op::Sub => {
            let sign = if matches!(op, Op::Sub) { -T::one() } else { T::one() };
            if wants(0) {
                binary_grad(grads, node.inputs[0], inp(0).value.len(), g.iter().copied());
            }
            if wants(1) {
                binary_grad(grads, node.inputs[1], inp(1).value.len(), g.iter().map(|&v| sign * v));
            }
        }
        Op::Mul => {
            let a = &inp(0).value;
            let b = &inp(1).value;
            let at = |v: &Vec<T>, i: usize| if v.len() == 1 { v[0] } else { v[i] };
            if wants(0) {
                binary_grad(
                    grads,
                    node.inputs[0],
                    a.len(),
                    g.iter().enumerate().map(|(i, &gv)| gv * at(b, i)),
                );
            }
            if wants(1) {
                binary_grad(
                    grads,
                    node.inputs[1],
                    b.len(),
                    g.iter().enumerate().map(|(i, &gv)| gv * at(a, i)),
                );
            }
        }
        Op::ScalarMul(c) => {
            let c = T::of(*c);
            accumulate(grads, node.inputs[0], g.iter().map(|&v| v * c));
        }
        Op::MatMul => {
            let a = inp(0);
            let b = inp(1);
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            if wants(0) {
                let ga = slot(grads, node.inputs[0], m * k);
                T::gemm(m, n, k, g, false, &b.value, true, ga, true);
            }
            if wants(1) {
                let gb = slot(grads, node.inputs[1], k * n);
                T::gemm(k, m, n, &a.value, true, g, false, gb, true);
            }
        }
        Op::MatMulNT => {
            let a = inp(0);
            let b = inp(1);
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[0]);
            if wants(0) {
                let ga = slot(grads, node.inputs[0], m * k);
                T::gemm(m, n, k, g, false, &b.value, false, ga, true);
            }
            if wants(1) {
                let gb = slot(grads, node.inputs[1], n * k);
                T::gemm(n, m, k, g, true, &a.value, false, gb, true);
            }
        }
        Op::SliceColumns { start, end } => {
            let cols = inp(0).shape[1];
            let w = end - start;
            let gi = slot(grads, node.inputs[0], inp(0).value.len());
            for (dst, src) in gi.chunks_mut(cols).zip(g.chunks(w)) {
                for (a, &b) in dst[*start..*end].iter_mut().zip(src) {
                    *a = *a + b;
                }
            }
        }
        Op::SparseMatMul(m) => {
            let k = inp(0).shape[1];
            let gi = slot(grads, node.inputs[0], inp(0).value.len());
            for (r, src) in g.chunks(k).enumerate() {
                for &(c, v) in m.row(r) {
                    let v = T::of(v);
                    for (a, &b) in gi[c * k..(c + 1) * k].iter_mut().zip(src) {
                        *a = *a + v * b;
                    }
                }
            }
        }
        Op::Transpose => {
            let (r, c) = (inp(0).shape[0], inp(0).shape[1]);
            let gt = transpose(g, c, r);
            accumulate(grads, node.inputs[0], gt.into_iter());
        }
        Op::Reshape(_) => accumulate(grads, node.inputs[0], g.iter().copied()),
        Op::Concat { axis } => {
            let axis = *axis;
            let outer: usize = node.shape[..axis].iter().product();
            let total_chunk: usize = node.shape[axis..].iter().product();
            let mut offset = 0;
            for (idx, &v) in node.inputs.iter().enumerate() {
                let s = &inp(idx).shape;
                let chunk: usize = s[axis..].iter().product();
                if nodes[v.0].requires_grad {
                    let gi = slot(grads, v, outer * chunk);
                    for o in 0..outer {
                        let src = &g[o * total_chunk + offset..o * total_chunk + offset + chunk];
                        for (a, &b) in gi[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                            *a = *a + b;
                        }
                    }
                }
                offset += chunk;
            }
        }
        Op::GatherRows(indices) => {
            let x = inp(0);
            let width = x.value.len() / x.shape[0];
            let gi = slot(grads, node.inputs[0], x.value.len());
            for (k, &r) in indices.iter().enumerate() {
                for (a, &b) in gi[r * width..(r + 1) * width]
                    .iter_mut()
                    .zip(&g[k * width..(k + 1) * width])
                {
                    *a = *a + b;
                }
            }
        }
        Op::ReduceSum { axis } | Op::ReduceMean { axis } => {
            let x = inp(0);
            let mean = matches!(op, Op::ReduceMean { .. });
            match axis {
                None => {
                    let mut v = g[0];
                    if mean {
                        v = v / T::of(x.value.len() as f64);
                    }
                    accumulate(grads, node.inputs[0], std::iter::repeat_n(v, x.value.len()));
                }
                Some(axis) => {
                    let (outer, len, inner) = around_axis(&x.shape, *axis);
                    let scale = if mean { T::one() / T::of(len as f64) } else { T::one() };
                    let gi = slot(grads, node.inputs[0], x.value.len());
                    for o in 0..outer {
                        for l in 0..len {
                            let dst = &mut gi[(o * len + l) * inner..(o * len + l + 1) * inner];
                            for (a, &b) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                                *a = *a + b * scale;
                            }
                        }
                    }
                }
            }
        }
        Op::Sigmoid => accumulate(
            grads,
            node.inputs[0],
            g.iter().zip(y).map(|(&gv, &s)| gv * s * (T::one() - s)),
        ),
        Op::Exp => accumulate(grads, node.inputs[0], g.iter().zip(y).map(|(&gv, &e)| gv * e)),
        Op::Log => {
            let x = &inp(0).value;
            accumulate(grads, node.inputs[0], g.iter().zip(x).map(|(&gv, &xv)| gv / xv));
        }
        Op::Gelu => {
            let x = &inp(0).value;
            let (_, t) = gelu_parts(x);
            let (c, a, half) = (T::of(GELU_C), T::of(GELU_A), T::of(0.5));
            let three_a = T::of(3.0) * a;
            let d = x.iter().zip(&t).zip(g).map(|((&xv, &tv), &gv)| {
                let du = c * (T::one() + three_a * xv * xv);
                gv * (half * (T::one() + tv) + half * xv * (T::one() - tv * tv) * du)
            });
            accumulate(grads, node.inputs[0], d);
        }
        Op::PowScalar(p) => {
            let x = &inp(0).value;
            let pt = T::of(*p);
            let pm1 = T::of(*p - 1.0);
            accumulate(
                grads,
                node.inputs[0],
                g.iter().zip(x).map(|(&gv, &xv)| {
                    if xv == T::zero() {
                        // one-sided derivative at the origin; 0 for p != 1
                        if *p == 1.0 {
                            gv
                        } else {
                            T::zero()
                        }
                    } else {
                        gv * pt * xv.powf(pm1)
                    }
                }),
            );
        }
        Op::Clamp { lo, hi } => {
            let x = &inp(0).value;
            let (lo, hi) = (T::of(*lo), T::of(*hi));
            accumulate(
                grads,
                node.inputs[0],
                g.iter()
                    .zip(x)
                    .map(|(&gv, &xv)| if xv > lo && xv < hi { gv } else { T::zero() }),
            );
        }
        Op::SoftmaxLastDim => {
            let d = *node.shape.last().expect("rank >= 1");
            let gi = slot(grads, node.inputs[0], y.len());
            for ((gr, yr), out) in g.chunks(d).zip(y.chunks(d)).zip(gi.chunks_mut(d)) {
                let dot = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>();
                for i in 0..d {
                    out[i] = out[i] + yr[i] * (gr[i] - dot);
                }
            }
        }
        Op::L2NormalizeLastDim => {
            let x = &inp(0).value;
            let d = *node.shape.last().expect("rank >= 1");
            let gi = slot(grads, node.inputs[0], y.len());
            for (((gr, yr), xr), out) in g.chunks(d).zip(y.chunks(d)).zip(x.chunks(d)).zip(gi.chunks_mut(d)) {
                let norm = xr.iter().map(|&v| v * v).sum::<T>().sqrt();
                let dot = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>();
                for i in 0..d {
                    out[i] = out[i] + (gr[i] - yr[i] * dot) / norm;
                }
            }
        }
        Op::LayerNormLastDim { eps } => {
            let x = &inp(0).value;
            let gain = &inp(1).value;
            let d = gain.len();
            let eps = T::of(*eps);
            let dn = T::of(d as f64);
            let mut g_gain = vec![T::zero(); d];
            let mut g_bias = vec![T::zero(); d];
            let mut g_x = if wants(0) { Some(vec![T::zero(); x.len()]) } else { None };
            let mut xhat = vec![T::zero(); d];
            let mut dxhat = vec![T::zero(); d];
            for (r, (xr, gr)) in x.chunks(d).zip(g.chunks(d)).enumerate() {
                let (mean, rstd) = layer_norm_stats(xr, eps);
                for i in 0..d {
                    xhat[i] = (xr[i] - mean) * rstd;
                    dxhat[i] = gr[i] * gain[i];
                    g_gain[i] = g_gain[i] + gr[i] * xhat[i];
                    g_bias[i] = g_bias[i] + gr[i];
                }
                if let Some(gx) = &mut g_x {
                    let mean_d = dxhat.iter().copied().sum::<T>() / dn;
                    let mean_dx = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() / dn;
                    for i in 0..d {
                        gx[r * d + i] = rstd * (dxhat[i] - mean_d - xhat[i] * mean_dx);
                    }
                }
            }
            if let Some(gx) = g_x {
                accumulate(grads, node.inputs[0], gx.into_iter());
            }
            if wants(1) {
                accumulate(grads, node.inputs[1], g_gain.into_iter());
            }
            if wants(2) {
                accumulate(grads, node.inputs[2], g_bias.into_iter());
            }
        }
    }
}
