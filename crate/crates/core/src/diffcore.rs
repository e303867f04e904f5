//! Define-by-run reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every operation in evaluation order. Each recorded node
//! keeps its value; [`Tape::backward`] sweeps the nodes once in reverse and
//! returns the gradient of a scalar root with respect to every trainable leaf.
//! Constants and nodes without a trainable ancestor are skipped.
//!
//! Batched quantities are stored one trial per row, so an RNN state for a
//! batch of `B` trials is a `B x D` matrix and weight products are expressed
//! with [`Tape::matmul_nt`] (`x * W^T`).

use crate::matrix::{gemm, Matrix};
use std::sync::atomic::{AtomicU64, Ordering};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: (usize, usize), rhs: (usize, usize) },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward root must be 1x1, got {0:?}")]
    RootNotScalar((usize, usize)),
    #[error("variable does not belong to this tape")]
    ForeignVar,
}

pub type Result<T> = std::result::Result<T, DiffError>;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Debug, Clone)]
enum Op {
    Param,
    Const,
    MatMul(usize, usize),
    MatMulNT(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Sub(usize, usize),
    Hadamard(usize, usize),
    Scale(usize, f64),
    Affine(usize, f64),
    Tanh(usize),
    Sigmoid(usize),
    SumSquares(usize),
    Sum(usize),
    ConcatRows(Vec<usize>),
    SliceRows(usize, usize),
    Diag(usize),
    Transpose(usize),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Operation record. Single owner; build a fresh tape per forward pass.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient with respect to the trainable leaf `v`; `None` when `v` does not
    /// influence the root. Intermediate nodes are not retained.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(Option::as_ref)
    }

    /// Gradient with respect to `v`, zero-filled when `v` has no path to the root.
    pub fn wrt(&self, v: Var) -> Matrix {
        match self.get(v) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes.get(v.index).copied().unwrap_or((0, 0));
                Matrix::zeros(r, c)
            }
        }
    }
}

fn check_finite(op: &'static str, m: &Matrix) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(DiffError::NonFinite { op })
    }
}

fn same_shape(op: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(DiffError::ShapeMismatch { op, lhs: a.shape(), rhs: b.shape() })
    }
}

fn accumulate(slot: &mut Option<Matrix>, g: Matrix) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

/// `slot += op(a) * op(b)`, writing straight into an existing gradient.
fn accumulate_product(slot: &mut Option<Matrix>, a: &Matrix, ta: bool, b: &Matrix, tb: bool) {
    match slot {
        Some(acc) => gemm(1.0, a, ta, b, tb, 1.0, acc),
        None => *slot = Some(Matrix::product(a, ta, b, tb)),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape == self.id && v.index < self.nodes.len() {
            Ok(v.index)
        } else {
            Err(DiffError::ForeignVar)
        }
    }

    fn push(&mut self, op_name: &'static str, value: Matrix, op: Op, parents: &[usize]) -> Result<Var> {
        check_finite(op_name, &value)?;
        let needs_grad = match op {
            Op::Param => true,
            Op::Const => false,
            _ => parents.iter().any(|&p| self.nodes[p].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var { tape: self.id, index: self.nodes.len() - 1 })
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Matrix) -> Result<Var> {
        self.push("param", value, Op::Param, &[])
    }

    /// Non-trainable leaf; no gradient is propagated into it.
    pub fn constant(&mut self, value: Matrix) -> Result<Var> {
        self.push("constant", value, Op::Const, &[])
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[self.idx(v).expect("variable from another tape")].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.as_slice()[0]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if va.cols() != vb.rows() {
            return Err(DiffError::ShapeMismatch { op: "matmul", lhs: va.shape(), rhs: vb.shape() });
        }
        let out = Matrix::product(va, false, vb, false);
        self.push("matmul", out, Op::MatMul(ia, ib), &[ia, ib])
    }

    /// `a * b^T`; with `a` a batch of row states and `b` a weight matrix this
    /// applies the weights to every row.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if va.cols() != vb.cols() {
            return Err(DiffError::ShapeMismatch { op: "matmul_nt", lhs: va.shape(), rhs: vb.shape() });
        }
        let out = Matrix::product(va, false, vb, true);
        self.push("matmul_nt", out, Op::MatMulNT(ia, ib), &[ia, ib])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        same_shape("add", va, vb)?;
        let out = va.zip_map(vb, |x, y| x + y);
        self.push("add", out, Op::Add(ia, ib), &[ia, ib])
    }

    /// Adds the `1 x n` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(bias)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if vb.rows() != 1 || vb.cols() != va.cols() {
            return Err(DiffError::ShapeMismatch { op: "add_row", lhs: va.shape(), rhs: vb.shape() });
        }
        let mut out = va.clone();
        let b = vb.as_slice();
        for r in 0..out.rows() {
            for (x, y) in out.row_mut(r).iter_mut().zip(b) {
                *x += y;
            }
        }
        self.push("add_row", out, Op::AddRow(ia, ib), &[ia, ib])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        same_shape("sub", va, vb)?;
        let out = va.zip_map(vb, |x, y| x - y);
        self.push("sub", out, Op::Sub(ia, ib), &[ia, ib])
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        same_shape("hadamard", va, vb)?;
        let out = va.zip_map(vb, |x, y| x * y);
        self.push("hadamard", out, Op::Hadamard(ia, ib), &[ia, ib])
    }

    pub fn scale(&mut self, a: Var, alpha: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.map(|x| alpha * x);
        self.push("scale", out, Op::Scale(ia, alpha), &[ia])
    }

    /// `alpha * a + beta`, elementwise.
    pub fn affine(&mut self, a: Var, alpha: f64, beta: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.map(|x| alpha * x + beta);
        self.push("affine", out, Op::Affine(ia, alpha), &[ia])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = &self.nodes[ia].value;
        let out = Matrix::from_vec(v.rows(), v.cols(), crate::fastmath::tanh_slice(v.as_slice()));
        self.push("tanh", out, Op::Tanh(ia), &[ia])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = &self.nodes[ia].value;
        let out = Matrix::from_vec(v.rows(), v.cols(), crate::fastmath::sigmoid_slice(v.as_slice()));
        self.push("sigmoid", out, Op::Sigmoid(ia), &[ia])
    }

    /// Sum of squared entries, as a `1 x 1` node.
    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let s = self.nodes[ia].value.sum_squares();
        self.push("sum_squares", Matrix::filled(1, 1, s), Op::SumSquares(ia), &[ia])
    }

    /// Sum of entries, as a `1 x 1` node.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let s = self.nodes[ia].value.sum();
        self.push("sum", Matrix::filled(1, 1, s), Op::Sum(ia), &[ia])
    }

    /// Sums a list of same-shaped nodes; `None` for an empty list.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Option<Var>> {
        let mut iter = terms.iter();
        let Some(&first) = iter.next() else { return Ok(None) };
        let mut acc = first;
        for &t in iter {
            acc = self.add(acc, t)?;
        }
        Ok(Some(acc))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let idx: Vec<usize> = parts.iter().map(|&p| self.idx(p)).collect::<Result<_>>()?;
        let Some(&first) = idx.first() else {
            return Err(DiffError::ShapeMismatch { op: "concat_rows", lhs: (0, 0), rhs: (0, 0) });
        };
        let cols = self.nodes[first].value.cols();
        for &i in &idx {
            let v = &self.nodes[i].value;
            if v.cols() != cols {
                return Err(DiffError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.nodes[first].value.shape(),
                    rhs: v.shape(),
                });
            }
        }
        let refs: Vec<&Matrix> = idx.iter().map(|&i| &self.nodes[i].value).collect();
        let out = Matrix::vstack(&refs);
        let parents = idx.clone();
        self.push("concat_rows", out, Op::ConcatRows(idx), &parents)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let va = &self.nodes[ia].value;
        if start + len > va.rows() {
            return Err(DiffError::ShapeMismatch { op: "slice_rows", lhs: va.shape(), rhs: (start, len) });
        }
        let out = va.slice_rows(start, len);
        self.push("slice_rows", out, Op::SliceRows(ia, start), &[ia])
    }

    /// Square diagonal matrix from a `1 x n` or `n x 1` vector.
    pub fn diag(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let va = &self.nodes[ia].value;
        if va.rows() != 1 && va.cols() != 1 {
            return Err(DiffError::ShapeMismatch { op: "diag", lhs: va.shape(), rhs: (1, va.len()) });
        }
        let n = va.len();
        let mut out = Matrix::zeros(n, n);
        for (i, &x) in va.as_slice().iter().enumerate() {
            out.set(i, i, x);
        }
        self.push("diag", out, Op::Diag(ia), &[ia])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.transpose();
        self.push("transpose", out, Op::Transpose(ia), &[ia])
    }

    /// Reverse sweep from the scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let ir = self.idx(root)?;
        let shape = self.nodes[ir].value.shape();
        if shape != (1, 1) {
            return Err(DiffError::RootNotScalar(shape));
        }
        let n = ir + 1;
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        if self.nodes[ir].needs_grad {
            grads[ir] = Some(Matrix::filled(1, 1, 1.0));
        }
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let wants = |p: usize| self.nodes[p].needs_grad;
            match &node.op {
                Op::Param | Op::Const => {}
                &Op::MatMul(a, b) => {
                    let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
                    if wants(a) {
                        accumulate_product(&mut grads[a], &g, false, vb, true);
                    }
                    if wants(b) {
                        accumulate_product(&mut grads[b], va, true, &g, false);
                    }
                }
                &Op::MatMulNT(a, b) => {
                    let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
                    if wants(a) {
                        accumulate_product(&mut grads[a], &g, false, vb, false);
                    }
                    if wants(b) {
                        accumulate_product(&mut grads[b], &g, true, va, false);
                    }
                }
                &Op::Add(a, b) => {
                    match (wants(a), wants(b)) {
                        (true, true) => {
                            accumulate(&mut grads[a], g.clone());
                            accumulate(&mut grads[b], g);
                        }
                        (true, false) => accumulate(&mut grads[a], g),
                        (false, true) => accumulate(&mut grads[b], g),
                        (false, false) => {}
                    }
                    continue;
                }
                &Op::AddRow(a, b) => {
                    if wants(b) {
                        let mut gb = Matrix::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            for (acc, x) in gb.as_mut_slice().iter_mut().zip(g.row(r)) {
                                *acc += x;
                            }
                        }
                        accumulate(&mut grads[b], gb);
                    }
                    if wants(a) {
                        accumulate(&mut grads[a], g);
                    }
                    continue;
                }
                &Op::Sub(a, b) => {
                    if wants(b) {
                        accumulate(&mut grads[b], g.map(|x| -x));
                    }
                    if wants(a) {
                        accumulate(&mut grads[a], g);
                    }
                    continue;
                }
                &Op::Hadamard(a, b) => {
                    if wants(a) {
                        accumulate(&mut grads[a], g.zip_map(&self.nodes[b].value, |x, y| x * y));
                    }
                    if wants(b) {
                        accumulate(&mut grads[b], g.zip_map(&self.nodes[a].value, |x, y| x * y));
                    }
                }
                &Op::Scale(a, alpha) | &Op::Affine(a, alpha) => {
                    if wants(a) {
                        accumulate(&mut grads[a], g.map(|x| alpha * x));
                    }
                }
                &Op::Tanh(a) => {
                    if wants(a) {
                        accumulate(&mut grads[a], g.zip_map(&node.value, |x, y| x * (1.0 - y * y)));
                    }
                }
                &Op::Sigmoid(a) => {
                    if wants(a) {
                        accumulate(&mut grads[a], g.zip_map(&node.value, |x, y| x * y * (1.0 - y)));
                    }
                }
                &Op::SumSquares(a) => {
                    if wants(a) {
                        let s = 2.0 * g.as_slice()[0];
                        accumulate(&mut grads[a], self.nodes[a].value.map(|x| s * x));
                    }
                }
                &Op::Sum(a) => {
                    if wants(a) {
                        let (r, c) = self.nodes[a].value.shape();
                        accumulate(&mut grads[a], Matrix::filled(r, c, g.as_slice()[0]));
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let rows = self.nodes[p].value.rows();
                        if wants(p) {
                            accumulate(&mut grads[p], g.slice_rows(offset, rows));
                        }
                        offset += rows;
                    }
                }
                &Op::SliceRows(a, start) => {
                    if wants(a) {
                        let (r, c) = self.nodes[a].value.shape();
                        let mut ga = Matrix::zeros(r, c);
                        ga.as_mut_slice()[start * c..start * c + g.len()].copy_from_slice(g.as_slice());
                        accumulate(&mut grads[a], ga);
                    }
                }
                &Op::Diag(a) => {
                    if wants(a) {
                        let (r, c) = self.nodes[a].value.shape();
                        let d: Vec<f64> = (0..g.rows()).map(|k| g.get(k, k)).collect();
                        accumulate(&mut grads[a], Matrix::from_vec(r, c, d));
                    }
                }
                &Op::Transpose(a) => {
                    if wants(a) {
                        accumulate(&mut grads[a], g.transpose());
                    }
                }
            }
            if matches!(node.op, Op::Param) {
                grads[i] = Some(g);
            }
        }
        for (i, slot) in grads.iter().enumerate() {
            if let Some(g) = slot {
                check_finite("backward", g)?;
                debug_assert_eq!(g.shape(), self.nodes[i].value.shape());
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }
}
