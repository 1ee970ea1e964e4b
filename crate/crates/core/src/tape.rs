//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding
//! the operation kind, its input node ids and the cached output value.
//! Nodes only ever reference earlier nodes, so a single reverse sweep over
//! the node list propagates adjoints exactly once per node. Gradients
//! accumulate by summation over all uses of a node.
//!
//! The tape is rebuilt per minibatch: models are functions
//! `(&mut Tape, &ParamStore, inputs) -> Var` and keep no graph state of
//! their own.
//!
//! [`Tape::stop_gradient`] is the gradient-stop primitive: identity in the
//! forward direction, contributes a zero adjoint backward. It is what keeps
//! child experts independent of their parents during training.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use core::fmt;

use crate::param::{Gradients, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, PartialEq)]
pub enum TapeError {
    /// Operand shapes are incompatible for the named operation.
    DimMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// `backward` requires a scalar (1×1) loss.
    NonScalarLoss { shape: Vec<usize> },
    /// Slice or gather indices fall outside the operand.
    IndexOutOfRange { op: &'static str, detail: String },
}

impl fmt::Display for TapeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TapeError::DimMismatch { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs:?} and {rhs:?}")
            }
            TapeError::NonScalarLoss { shape } => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
            TapeError::IndexOutOfRange { op, detail } => write!(f, "{op}: {detail}"),
        }
    }
}

impl core::error::Error for TapeError {}

/// Probability clamp bounds used by losses; mirrored here so the clamp
/// adjoint and the forward kernel stay in one place.
pub const PROB_CLAMP_LO: f64 = 1e-7;
pub const PROB_CLAMP_HI: f64 = 1.0 - 1e-7;

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MatMul(Var, Var),
    /// a · bᵀ
    MatMulTransB(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Relu(Var),
    Abs(Var),
    Square(Var),
    Ln(Var),
    /// |x|^p for x ≥ 0, p constant.
    Pow(Var, f64),
    Clamp(Var, f64, f64),
    StopGradient(Var),
    /// Row-broadcast Hadamard product: [m×n] ⊙ [1×n].
    MulRowBroadcast(Var, Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    /// Rectangle [r0..r1) × [c0..c1) of the input.
    Slice(Var, usize, usize, usize, usize),
    GatherRows(Var, Vec<usize>),
    /// Row-wise softmax.
    Softmax(Var),
    /// [m×n] -> [m×1], sum over each row.
    RowSum(Var),
    SumAll(Var),
    MeanAll(Var),
}

impl Op {
    /// Input node ids of this operation.
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Constant | Op::Param(_) => Vec::new(),
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::MatMul(a, b)
            | Op::MatMulTransB(a, b)
            | Op::MulRowBroadcast(a, b) => [a.0, b.0].to_vec(),
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Abs(a)
            | Op::Square(a)
            | Op::Ln(a)
            | Op::Pow(a, _)
            | Op::Clamp(a, _, _)
            | Op::StopGradient(a)
            | Op::Slice(a, _, _, _, _)
            | Op::GatherRows(a, _)
            | Op::Softmax(a)
            | Op::RowSum(a)
            | Op::SumAll(a)
            | Op::MeanAll(a) => [a.0].to_vec(),
            Op::ConcatCols(parts) | Op::ConcatRows(parts) => {
                parts.iter().map(|v| v.0).collect()
            }
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Append-only operation recorder; see the module docs.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Cached forward value of a node.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Asserts the tape invariant that every node only references
    /// strictly earlier nodes. The recording API cannot produce anything
    /// else, so this holds by construction; it exists so tests can state
    /// the invariant directly.
    pub fn is_topologically_sound(&self) -> bool {
        self.nodes
            .iter()
            .enumerate()
            .all(|(idx, node)| node.op.inputs().iter().all(|&i| i < idx))
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    fn shape_of(&self, v: Var) -> Vec<usize> {
        self.nodes[v.0].value.shape().to_vec()
    }

    fn require_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TapeError> {
        if self.shape_of(a) != self.shape_of(b) {
            return Err(TapeError::DimMismatch {
                op,
                lhs: self.shape_of(a),
                rhs: self.shape_of(b),
            });
        }
        Ok(())
    }

    // ── Leaves ──────────────────────────────────────────────────────────

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Constant, value)
    }

    /// Registers a parameter leaf; its adjoint lands in [`Gradients`]
    /// under the parameter id. The current value is snapshotted.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let value = store.get(id).tensor.clone();
        self.push(Op::Param(id), value)
    }

    // ── Elementwise / structural ops ────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.require_same_shape("add", a, b)?;
        let value = self.nodes[a.0].value.zip(&self.nodes[b.0].value, |x, y| x + y);
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.require_same_shape("sub", a, b)?;
        let value = self.nodes[a.0].value.zip(&self.nodes[b.0].value, |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), value))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.require_same_shape("mul", a, b)?;
        let value = self.nodes[a.0].value.zip(&self.nodes[b.0].value, |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), value))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.require_same_shape("div", a, b)?;
        let value = self.nodes[a.0].value.zip(&self.nodes[b.0].value, |x, y| x / y);
        Ok(self.push(Op::Div(a, b), value))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.nodes[a.0].value.map(|x| c * x);
        self.push(Op::Scale(a, c), value)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.nodes[a.0].value.map(|x| x + c);
        self.push(Op::AddScalar(a), value)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(libm::tanh);
        self.push(Op::Tanh(a), value)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(Op::Relu(a), value)
    }

    /// Absolute value; the adjoint at 0 is defined as exactly 0.
    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(libm::fabs);
        self.push(Op::Abs(a), value)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(|x| x * x);
        self.push(Op::Square(a), value)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(libm::log);
        self.push(Op::Ln(a), value)
    }

    /// x^p for non-negative x; used by the smooth selection variant.
    pub fn pow(&mut self, a: Var, p: f64) -> Var {
        let value = self.nodes[a.0].value.map(|x| libm::pow(x, p));
        self.push(Op::Pow(a, p), value)
    }

    /// Clamps into [lo, hi]; adjoint passes through strictly inside the
    /// interval and is 0 at and beyond the bounds.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.nodes[a.0].value.map(|x| x.max(lo).min(hi));
        self.push(Op::Clamp(a, lo, hi), value)
    }

    /// Forward identity whose backward contributes a zero adjoint.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.clone();
        self.push(Op::StopGradient(a), value)
    }

    /// `[m×n] ⊙ [1×n]` with the row vector broadcast over all rows.
    pub fn mul_row_broadcast(&mut self, a: Var, row: Var) -> Result<Var, TapeError> {
        let (sa, sr) = (self.shape_of(a), self.shape_of(row));
        if sr[0] != 1 || sr[1] != sa[1] {
            return Err(TapeError::DimMismatch {
                op: "mul_row_broadcast",
                lhs: sa,
                rhs: sr,
            });
        }
        let av = &self.nodes[a.0].value;
        let rv = &self.nodes[row.0].value;
        let mut out = av.clone();
        let cols = out.cols();
        for r in 0..out.rows() {
            for c in 0..cols {
                let v = out.at(r, c) * rv.at(0, c);
                out.set(r, c, v);
            }
        }
        Ok(self.push(Op::MulRowBroadcast(a, row), out))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        let (sa, sb) = (self.shape_of(a), self.shape_of(b));
        if sa[1] != sb[0] {
            return Err(TapeError::DimMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let value = self.nodes[a.0].value.matmul(&self.nodes[b.0].value);
        Ok(self.push(Op::MatMul(a, b), value))
    }

    /// `a · bᵀ`; the natural orientation for `[batch×in] · [out×in]ᵀ`.
    pub fn matmul_transb(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        let (sa, sb) = (self.shape_of(a), self.shape_of(b));
        if sa[1] != sb[1] {
            return Err(TapeError::DimMismatch {
                op: "matmul_transb",
                lhs: sa,
                rhs: sb,
            });
        }
        let value = self.nodes[a.0].value.matmul_transb(&self.nodes[b.0].value);
        Ok(self.push(Op::MatMulTransB(a, b), value))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TapeError> {
        let rows = self.shape_of(parts[0])[0];
        for &p in parts {
            if self.shape_of(p)[0] != rows {
                return Err(TapeError::DimMismatch {
                    op: "concat_cols",
                    lhs: self.shape_of(parts[0]),
                    rhs: self.shape_of(p),
                });
            }
        }
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| &self.nodes[p.0].value).collect();
        let value = Tensor::concat_cols(&tensors);
        Ok(self.push(Op::ConcatCols(parts.to_vec()), value))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TapeError> {
        let cols = self.shape_of(parts[0])[1];
        for &p in parts {
            if self.shape_of(p)[1] != cols {
                return Err(TapeError::DimMismatch {
                    op: "concat_rows",
                    lhs: self.shape_of(parts[0]),
                    rhs: self.shape_of(p),
                });
            }
        }
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| &self.nodes[p.0].value).collect();
        let value = Tensor::concat_rows(&tensors);
        Ok(self.push(Op::ConcatRows(parts.to_vec()), value))
    }

    pub fn slice(
        &mut self,
        a: Var,
        r0: usize,
        r1: usize,
        c0: usize,
        c1: usize,
    ) -> Result<Var, TapeError> {
        let s = self.shape_of(a);
        if r1 > s[0] || c1 > s[1] || r0 > r1 || c0 > c1 {
            return Err(TapeError::IndexOutOfRange {
                op: "slice",
                detail: format!("[{r0}..{r1})×[{c0}..{c1}) of shape {s:?}"),
            });
        }
        let value = self.nodes[a.0].value.slice2(r0, r1, c0, c1);
        Ok(self.push(Op::Slice(a, r0, r1, c0, c1), value))
    }

    pub fn slice_cols(&mut self, a: Var, c0: usize, c1: usize) -> Result<Var, TapeError> {
        let rows = self.shape_of(a)[0];
        self.slice(a, 0, rows, c0, c1)
    }

    pub fn slice_rows(&mut self, a: Var, r0: usize, r1: usize) -> Result<Var, TapeError> {
        let cols = self.shape_of(a)[1];
        self.slice(a, r0, r1, 0, cols)
    }

    /// Row lookup (embedding gather); backward scatter-adds per row.
    pub fn gather_rows(&mut self, a: Var, ids: &[usize]) -> Result<Var, TapeError> {
        let s = self.shape_of(a);
        if let Some(&bad) = ids.iter().find(|&&i| i >= s[0]) {
            return Err(TapeError::IndexOutOfRange {
                op: "gather_rows",
                detail: format!("row {bad} of {} rows", s[0]),
            });
        }
        let value = self.nodes[a.0].value.gather_rows(ids);
        Ok(self.push(Op::GatherRows(a, ids.to_vec()), value))
    }

    /// Numerically stabilised row-wise softmax.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let mut out = av.clone();
        let (rows, cols) = (out.rows(), out.cols());
        for r in 0..rows {
            let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = libm::exp(*v - max);
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        self.push(Op::Softmax(a), out)
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let data: Vec<f64> = (0..av.rows()).map(|r| av.row(r).iter().sum()).collect();
        let value = Tensor::column(data);
        self.push(Op::RowSum(a), value)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.nodes[a.0].value.sum());
        self.push(Op::SumAll(a), value)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.nodes[a.0].value.mean());
        self.push(Op::MeanAll(a), value)
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Every trainable parameter of
    /// `store` receives a gradient entry; parameters the loss does not
    /// reach get zeros.
    pub fn backward(&self, loss: Var, store: &ParamStore) -> Result<Gradients, TapeError> {
        let loss_value = &self.nodes[loss.0].value;
        if !loss_value.is_scalar() {
            return Err(TapeError::NonScalarLoss {
                shape: loss_value.shape().to_vec(),
            });
        }

        let mut adjoints: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adjoints[loss.0] = Some(Tensor::scalar(1.0));
        let mut grads = Gradients::zeros(store);

        for idx in (0..=loss.0).rev() {
            let Some(adj) = adjoints[idx].take() else {
                continue;
            };
            match &self.nodes[idx].op {
                Op::Constant => {}
                Op::Param(id) => grads.accumulate(*id, &adj),
                Op::Add(a, b) => {
                    accumulate(&mut adjoints, *a, &adj);
                    accumulate(&mut adjoints, *b, &adj);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adjoints, *a, &adj);
                    let neg = adj.map(|v| -v);
                    accumulate(&mut adjoints, *b, &neg);
                }
                Op::Mul(a, b) => {
                    let da = adj.zip(&self.nodes[b.0].value, |g, bv| g * bv);
                    let db = adj.zip(&self.nodes[a.0].value, |g, av| g * av);
                    accumulate(&mut adjoints, *a, &da);
                    accumulate(&mut adjoints, *b, &db);
                }
                Op::Div(a, b) => {
                    let bv = &self.nodes[b.0].value;
                    let av = &self.nodes[a.0].value;
                    let da = adj.zip(bv, |g, y| g / y);
                    let db_data: Vec<f64> = adj
                        .data()
                        .iter()
                        .zip(av.data().iter().zip(bv.data().iter()))
                        .map(|(&g, (&x, &y))| -g * x / (y * y))
                        .collect();
                    let db = Tensor::from_vec(bv.shape().to_vec(), db_data).expect("shape");
                    accumulate(&mut adjoints, *a, &da);
                    accumulate(&mut adjoints, *b, &db);
                }
                Op::MatMul(a, b) => {
                    // c = a·b: da = g·bᵀ, db = aᵀ·g
                    let da = adj.matmul_transb(&self.nodes[b.0].value);
                    let db = self.nodes[a.0].value.matmul_transa(&adj);
                    accumulate(&mut adjoints, *a, &da);
                    accumulate(&mut adjoints, *b, &db);
                }
                Op::MatMulTransB(a, b) => {
                    // c = a·bᵀ: da = g·b, db = gᵀ·a
                    let da = adj.matmul(&self.nodes[b.0].value);
                    let db = adj.matmul_transa(&self.nodes[a.0].value);
                    accumulate(&mut adjoints, *a, &da);
                    accumulate(&mut adjoints, *b, &db);
                }
                Op::Scale(a, c) => {
                    let da = adj.map(|g| g * c);
                    accumulate(&mut adjoints, *a, &da);
                }
                Op::AddScalar(a) => accumulate(&mut adjoints, *a, &adj),
                Op::Tanh(a) => {
                    let y = &self.nodes[idx].value;
                    let da = adj.zip(y, |g, yv| g * (1.0 - yv * yv));
                    accumulate(&mut adjoints, *a, &da);
                }
                Op::Relu(a) => {
                    let x = &self.nodes[a.0].value;
                    let da = adj.zip(x, |g, xv| if xv > 0.0 { g } else { 0.0 });
                    accumulate(&mut adjoints, *a, &da);
                }
                Op::Abs(a) => {
                    // sign(x) with sign(0) := 0
                    let x = &self.nodes[a.0].value;
                    let da = adj.zip(x, |g, xv| {
                        if xv > 0.0 {
                            g
                        } else if xv < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut adjoints, *a, &da);
                }
                Op::Square(a) => {
                    let x = &self.nodes[a.0].value;
                    let da = adj.zip(x, |g, xv| 2.0 * xv * g);
                    accumulate(&mut adjoints, *a, &da);
                }
                Op::Ln(a) => {
                    let x = &self.nodes[a.0].value;
                    let da = adj.zip(x, |g, xv| g / xv);
                    accumulate(&mut adjoints, *a, &da);
                }
                Op::Pow(a, p) => {
                    let x = &self.nodes[a.0].value;
                    let da = adj.zip(x, |g, xv| g * p * libm::pow(xv, p - 1.0));
                    accumulate(&mut adjoints, *a, &da);
                }
                Op::Clamp(a, lo, hi) => {
                    let x = &self.nodes[a.0].value;
                    let da = adj.zip(x, |g, xv| if xv > *lo && xv < *hi { g } else { 0.0 });
                    accumulate(&mut adjoints, *a, &da);
                }
                Op::StopGradient(_) => {}
                Op::MulRowBroadcast(a, row) => {
                    let rv = &self.nodes[row.0].value;
                    let av = &self.nodes[a.0].value;
                    let cols = av.cols();
                    let mut da = adj.clone();
                    let mut drow = Tensor::zeros(1, cols);
                    for r in 0..av.rows() {
                        for c in 0..cols {
                            let g = adj.at(r, c);
                            da.set(r, c, g * rv.at(0, c));
                            let acc = drow.at(0, c) + g * av.at(r, c);
                            drow.set(0, c, acc);
                        }
                    }
                    accumulate(&mut adjoints, *a, &da);
                    accumulate(&mut adjoints, *row, &drow);
                }
                Op::ConcatCols(parts) => {
                    let mut c0 = 0;
                    for &p in parts {
                        let w = self.nodes[p.0].value.cols();
                        let da = adj.slice2(0, adj.rows(), c0, c0 + w);
                        accumulate(&mut adjoints, p, &da);
                        c0 += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut r0 = 0;
                    for &p in parts {
                        let h = self.nodes[p.0].value.rows();
                        let da = adj.slice2(r0, r0 + h, 0, adj.cols());
                        accumulate(&mut adjoints, p, &da);
                        r0 += h;
                    }
                }
                Op::Slice(a, r0, _r1, c0, _c1) => {
                    let src = &self.nodes[a.0].value;
                    let mut da = Tensor::zeros(src.rows(), src.cols());
                    for r in 0..adj.rows() {
                        for c in 0..adj.cols() {
                            da.set(r0 + r, c0 + c, adj.at(r, c));
                        }
                    }
                    accumulate(&mut adjoints, *a, &da);
                }
                Op::GatherRows(a, ids) => {
                    let src = &self.nodes[a.0].value;
                    let mut da = Tensor::zeros(src.rows(), src.cols());
                    for (out_r, &src_r) in ids.iter().enumerate() {
                        for c in 0..adj.cols() {
                            let acc = da.at(src_r, c) + adj.at(out_r, c);
                            da.set(src_r, c, acc);
                        }
                    }
                    accumulate(&mut adjoints, *a, &da);
                }
                Op::Softmax(a) => {
                    // dx_i = y_i (g_i − Σ_j g_j y_j) per row
                    let y = &self.nodes[idx].value;
                    let mut da = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let dot: f64 = y
                            .row(r)
                            .iter()
                            .zip(adj.row(r).iter())
                            .map(|(&yv, &g)| yv * g)
                            .sum();
                        for c in 0..y.cols() {
                            da.set(r, c, y.at(r, c) * (adj.at(r, c) - dot));
                        }
                    }
                    accumulate(&mut adjoints, *a, &da);
                }
                Op::RowSum(a) => {
                    let src = &self.nodes[a.0].value;
                    let mut da = Tensor::zeros(src.rows(), src.cols());
                    for r in 0..src.rows() {
                        let g = adj.at(r, 0);
                        for c in 0..src.cols() {
                            da.set(r, c, g);
                        }
                    }
                    accumulate(&mut adjoints, *a, &da);
                }
                Op::SumAll(a) => {
                    let src = &self.nodes[a.0].value;
                    let da = Tensor::filled(src.rows(), src.cols(), adj.at(0, 0));
                    accumulate(&mut adjoints, *a, &da);
                }
                Op::MeanAll(a) => {
                    let src = &self.nodes[a.0].value;
                    let g = adj.at(0, 0) / src.numel() as f64;
                    let da = Tensor::filled(src.rows(), src.cols(), g);
                    accumulate(&mut adjoints, *a, &da);
                }
            }
        }
        Ok(grads)
    }
}

fn accumulate(adjoints: &mut [Option<Tensor>], target: Var, contribution: &Tensor) {
    match &mut adjoints[target.0] {
        Some(existing) => {
            for (e, c) in existing.data_mut().iter_mut().zip(contribution.data()) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contribution.clone()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::ParamStore;

    fn scalar_store(values: &[f64]) -> (ParamStore, Vec<ParamId>) {
        let mut store = ParamStore::new();
        let ids = values
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                store
                    .register(alloc::format!("p{i}"), Tensor::scalar(v), true)
                    .unwrap()
            })
            .collect();
        (store, ids)
    }

    #[test]
    fn square_gradient() {
        let (store, ids) = scalar_store(&[3.0]);
        let mut tape = Tape::new();
        let x = tape.param(&store, ids[0]);
        let loss = tape.square(x);
        let grads = tape.backward(loss, &store).unwrap();
        assert_eq!(grads.get(ids[0]).unwrap().at(0, 0), 6.0);
    }

    #[test]
    fn stop_gradient_halves_product_rule() {
        // y = stop(x)·x at x=3 → dy/dx = 3, not 6
        let (store, ids) = scalar_store(&[3.0]);
        let mut tape = Tape::new();
        let x = tape.param(&store, ids[0]);
        let frozen = tape.stop_gradient(x);
        let y = tape.mul(frozen, x).unwrap();
        assert_eq!(tape.value(y).at(0, 0), 9.0);
        let grads = tape.backward(y, &store).unwrap();
        assert_eq!(grads.get(ids[0]).unwrap().at(0, 0), 3.0);
    }

    #[test]
    fn stop_gradient_alone_gives_zero() {
        let (store, ids) = scalar_store(&[3.0]);
        let mut tape = Tape::new();
        let x = tape.param(&store, ids[0]);
        let s = tape.stop_gradient(x);
        let loss = tape.sum_all(s);
        let grads = tape.backward(loss, &store).unwrap();
        assert_eq!(grads.get(ids[0]).unwrap().at(0, 0), 0.0);
    }

    #[test]
    fn stop_gradient_is_forward_identity() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 3, vec![-1.5, 0.0, 2.25]).unwrap());
        let s = tape.stop_gradient(x);
        assert_eq!(tape.value(s), tape.value(x));
    }

    #[test]
    fn tanh_and_abs_adjoints() {
        let (store, ids) = scalar_store(&[0.0, -2.5]);
        let mut tape = Tape::new();
        let x = tape.param(&store, ids[0]);
        let t = tape.tanh(x);
        assert_eq!(tape.value(t).at(0, 0), 0.0);
        let grads = tape.backward(t, &store).unwrap();
        assert_eq!(grads.get(ids[0]).unwrap().at(0, 0), 1.0);

        let mut tape = Tape::new();
        let x = tape.param(&store, ids[1]);
        let a = tape.abs(x);
        assert_eq!(tape.value(a).at(0, 0), 2.5);
        let grads = tape.backward(a, &store).unwrap();
        assert_eq!(grads.get(ids[1]).unwrap().at(0, 0), -1.0);
    }

    #[test]
    fn abs_subgradient_at_zero_is_zero() {
        let (store, ids) = scalar_store(&[0.0]);
        let mut tape = Tape::new();
        let x = tape.param(&store, ids[0]);
        let a = tape.abs(x);
        let grads = tape.backward(a, &store).unwrap();
        assert_eq!(grads.get(ids[0]).unwrap().at(0, 0), 0.0);
    }

    #[test]
    fn unreachable_parameter_gets_zero_gradient() {
        let (store, ids) = scalar_store(&[3.0, 5.0]);
        let mut tape = Tape::new();
        let x = tape.param(&store, ids[0]);
        let loss = tape.square(x);
        let grads = tape.backward(loss, &store).unwrap();
        assert_eq!(grads.get(ids[1]).unwrap().at(0, 0), 0.0);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let (store, ids) = scalar_store(&[1.0]);
        let mut tape = Tape::new();
        let x = tape.param(&store, ids[0]);
        let wide = tape.concat_cols(&[x, x]).unwrap();
        let err = tape.backward(wide, &store).unwrap_err();
        assert!(matches!(err, TapeError::NonScalarLoss { .. }));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(2, 3));
        let b = tape.constant(Tensor::zeros(2, 3));
        let err = tape.matmul(a, b).unwrap_err();
        match err {
            TapeError::DimMismatch { lhs, rhs, .. } => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn concat_then_slice_roundtrips() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let b = tape.constant(Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap());
        let cat = tape.concat_rows(&[a, b]).unwrap();
        let ra = tape.slice_rows(cat, 0, 1).unwrap();
        let rb = tape.slice_rows(cat, 1, 2).unwrap();
        assert_eq!(tape.value(ra), tape.value(a));
        assert_eq!(tape.value(rb), tape.value(b));
    }

    #[test]
    fn recorded_graphs_are_acyclic() {
        let (store, ids) = scalar_store(&[1.0, 2.0]);
        let mut tape = Tape::new();
        let x = tape.param(&store, ids[0]);
        let y = tape.param(&store, ids[1]);
        let s = tape.add(x, y).unwrap();
        let t = tape.tanh(s);
        let frozen = tape.stop_gradient(t);
        let _ = tape.mul(frozen, s).unwrap();
        assert!(tape.is_topologically_sound());
    }

    #[test]
    fn gradient_accumulates_over_multiple_uses() {
        // loss = x·x + x → grad = 2x + 1 = 7 at x=3
        let (store, ids) = scalar_store(&[3.0]);
        let mut tape = Tape::new();
        let x = tape.param(&store, ids[0]);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.add(sq, x).unwrap();
        let grads = tape.backward(loss, &store).unwrap();
        assert_eq!(grads.get(ids[0]).unwrap().at(0, 0), 7.0);
    }
}
