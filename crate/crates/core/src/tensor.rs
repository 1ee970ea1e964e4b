//! Dense row-major tensors of 64-bit floats.
//!
//! Everything the experiments need is rank-2 (a scalar is `[1, 1]`), so the
//! kernels below are written for matrices. Shapes are carried as a vector to
//! keep the door open for higher ranks, but all ops validate rank 2.

use alloc::vec;
use alloc::vec::Vec;

use core::fmt;

/// Dense row-major tensor. Invariant: `shape.iter().product() == data.len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    /// Element count does not match the requested shape.
    ShapeDataMismatch { shape: Vec<usize>, len: usize },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeDataMismatch { shape, len } => write!(
                f,
                "shape {:?} implies {} elements but {} were provided",
                shape,
                shape.iter().product::<usize>(),
                len
            ),
        }
    }
}

impl core::error::Error for TensorError {}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            shape: vec![rows, cols],
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            shape: vec![rows, cols],
            data: vec![value; rows * cols],
        }
    }

    /// 1×1 tensor.
    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1, 1],
            data: vec![value],
        }
    }

    /// Matrix from rows×cols data, row-major.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        Self::from_vec(vec![rows, cols], data)
    }

    /// Column vector [n×1].
    pub fn column(data: Vec<f64>) -> Self {
        let n = data.len();
        Self {
            shape: vec![n, 1],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        debug_assert_eq!(self.shape, other.shape);
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// `self @ b` for 2-D tensors, `[m×k] · [k×p] -> [m×p]`.
    pub fn matmul(&self, b: &Tensor) -> Tensor {
        let (m, k) = (self.rows(), self.cols());
        let (k2, p) = (b.rows(), b.cols());
        debug_assert_eq!(k, k2);
        let mut out = vec![0.0; m * p];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * p..(i + 1) * p];
            for (kk, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &b.data[kk * p..(kk + 1) * p];
                for (o, &bv) in o_row.iter_mut().zip(b_row.iter()) {
                    *o += a * bv;
                }
            }
        }
        Tensor {
            shape: vec![m, p],
            data: out,
        }
    }

    /// `self @ bᵀ`, `[m×k] · [p×k]ᵀ -> [m×p]`. Row-by-row dot products.
    pub fn matmul_transb(&self, b: &Tensor) -> Tensor {
        let (m, k) = (self.rows(), self.cols());
        let (p, k2) = (b.rows(), b.cols());
        debug_assert_eq!(k, k2);
        let mut out = vec![0.0; m * p];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..p {
                let b_row = &b.data[j * k..(j + 1) * k];
                let mut acc = 0.0;
                for (&av, &bv) in a_row.iter().zip(b_row.iter()) {
                    acc += av * bv;
                }
                out[i * p + j] = acc;
            }
        }
        Tensor {
            shape: vec![m, p],
            data: out,
        }
    }

    /// `selfᵀ @ b`, `[k×m]ᵀ · [k×n] -> [m×n]`. Streams rows of both operands.
    pub fn matmul_transa(&self, b: &Tensor) -> Tensor {
        let (k, m) = (self.rows(), self.cols());
        let (k2, n) = (b.rows(), b.cols());
        debug_assert_eq!(k, k2);
        let mut out = vec![0.0; m * n];
        for kk in 0..k {
            let a_row = &self.data[kk * m..(kk + 1) * m];
            let b_row = &b.data[kk * n..(kk + 1) * n];
            for (i, &av) in a_row.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let o_row = &mut out[i * n..(i + 1) * n];
                for (o, &bv) in o_row.iter_mut().zip(b_row.iter()) {
                    *o += av * bv;
                }
            }
        }
        Tensor {
            shape: vec![m, n],
            data: out,
        }
    }

    /// Extracts the rectangle `[r0..r1) × [c0..c1)`.
    pub fn slice2(&self, r0: usize, r1: usize, c0: usize, c1: usize) -> Tensor {
        debug_assert!(r1 <= self.rows() && c1 <= self.cols() && r0 <= r1 && c0 <= c1);
        let cols = self.cols();
        let mut data = Vec::with_capacity((r1 - r0) * (c1 - c0));
        for r in r0..r1 {
            data.extend_from_slice(&self.data[r * cols + c0..r * cols + c1]);
        }
        Tensor {
            shape: vec![r1 - r0, c1 - c0],
            data,
        }
    }

    /// Horizontal concatenation; all parts must share a row count.
    pub fn concat_cols(parts: &[&Tensor]) -> Tensor {
        debug_assert!(!parts.is_empty());
        let rows = parts[0].rows();
        let cols: usize = parts.iter().map(|t| t.cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for t in parts {
                data.extend_from_slice(t.row(r));
            }
        }
        Tensor {
            shape: vec![rows, cols],
            data,
        }
    }

    /// Vertical concatenation; all parts must share a column count.
    pub fn concat_rows(parts: &[&Tensor]) -> Tensor {
        debug_assert!(!parts.is_empty());
        let cols = parts[0].cols();
        let rows: usize = parts.iter().map(|t| t.rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for t in parts {
            data.extend_from_slice(&t.data);
        }
        Tensor {
            shape: vec![rows, cols],
            data,
        }
    }

    /// Gathers the given rows into a new `[ids.len() × cols]` tensor.
    pub fn gather_rows(&self, ids: &[usize]) -> Tensor {
        let cols = self.cols();
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &r in ids {
            data.extend_from_slice(self.row(r));
        }
        Tensor {
            shape: vec![ids.len(), cols],
            data,
        }
    }

    pub fn transpose(&self) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor {
            shape: vec![n, m],
            data,
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.numel() as f64
    }
}
