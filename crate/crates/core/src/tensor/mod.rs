//! Minimal dense f64 tensor with reverse-mode autodiff.
//!
//! Shapes are row-major `Vec<usize>`; scalars use shape `[1]`. A tensor may
//! carry a handle into a [`Tape`], in which case operations performed through
//! that tape record themselves for the backward pass. The same operations are
//! also available as plain value methods for gradient-free paths (snapshots,
//! evaluation, oracles in tests).

mod gradcheck;
mod tape;

pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::Tape;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected a 2-d tensor, got shape {shape:?}")]
    NotMatrix { op: &'static str, shape: Vec<usize> },
    #[error("{op}: shape {shape:?} does not hold {len} values")]
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
        len: usize,
    },
    #[error("{op}: empty tensors are not supported")]
    Empty { op: &'static str },
    #[error("rowwise_l2_normalize: row {row} has norm {norm:e} below 1e-12")]
    DegenerateRow { row: usize, norm: f64 },
    #[error("backward: root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("tensor is not tracked on this tape")]
    Untracked,
    #[error("gradients not available: backward has not been run on this tape")]
    NoBackward,
    #[error("{op}: produced a non-finite value at flat index {index}")]
    NonFinite { op: &'static str, index: usize },
}

/// Dense row-major f64 tensor. Cloning copies the data but keeps the tape
/// handle, so a clone of a tracked tensor still reads the same gradient.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    /// `(tape token, node id)` when this value was produced by / registered
    /// on a tape; `None` for plain values.
    node: Option<(u64, usize)>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || numel == 0 {
            return Err(TensorError::Empty { op: "from_vec" });
        }
        if numel != data.len() {
            return Err(TensorError::BadShape {
                op: "from_vec",
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data,
            node: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || numel == 0 {
            return Err(TensorError::Empty { op: "zeros" });
        }
        Ok(Tensor {
            data: vec![0.0; numel],
            shape,
            node: None,
        })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            node: None,
        }
    }

    /// Build a `rows × cols` matrix from a function of (row, col).
    pub fn from_fn(
        rows: usize,
        cols: usize,
        f: impl Fn(usize, usize) -> f64,
    ) -> Result<Self, TensorError> {
        if rows == 0 || cols == 0 {
            return Err(TensorError::Empty { op: "from_fn" });
        }
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Ok(Tensor {
            shape: vec![rows, cols],
            data,
            node: None,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, TensorError> {
        if rows.is_empty() || rows[0].is_empty() {
            return Err(TensorError::Empty { op: "from_rows" });
        }
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "from_rows",
                    lhs: vec![rows.len(), cols],
                    rhs: vec![i, r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Tensor {
            shape: vec![rows.len(), cols],
            data,
            node: None,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Rows of a 2-d tensor.
    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[0]
    }

    /// Columns of a 2-d tensor.
    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[1]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        debug_assert_eq!(self.shape.len(), 2);
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    pub(crate) fn node(&self) -> Option<(u64, usize)> {
        self.node
    }

    pub(crate) fn with_node(mut self, token: u64, id: usize) -> Self {
        self.node = Some((token, id));
        self
    }

    /// Drop any tape association, keeping the value.
    pub fn detached(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            node: None,
        }
    }

    fn require_2d(&self, op: &'static str) -> Result<(usize, usize), TensorError> {
        if self.shape.len() != 2 {
            return Err(TensorError::NotMatrix {
                op,
                shape: self.shape.clone(),
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }

    // ─── value-mode operations (no gradient recording) ─────────────────────

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor, TensorError> {
        let (m, k) = self.require_2d("matmul")?;
        let (k2, n) = rhs.require_2d("matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&self.data, &rhs.data, m, k, n, &mut out);
        Tensor::from_vec(vec![m, n], out)
    }

    pub fn transpose(&self) -> Result<Tensor, TensorError> {
        let (m, n) = self.require_2d("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::from_vec(vec![n, m], out)
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor, TensorError> {
        broadcast_zip("add", self, rhs, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor, TensorError> {
        broadcast_zip("sub", self, rhs, |a, b| a - b)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor, TensorError> {
        broadcast_zip("mul", self, rhs, |a, b| a * b)
    }

    /// Add a `[1 × n]` bias row to every row of a `[m × n]` matrix.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor, TensorError> {
        let (m, n) = self.require_2d("add_bias")?;
        let (bm, bn) = bias.require_2d("add_bias")?;
        if bm != 1 || bn != n {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: self.shape.clone(),
                rhs: bias.shape.clone(),
            });
        }
        let mut out = self.data.clone();
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] += bias.data[j];
            }
        }
        Tensor::from_vec(vec![m, n], out)
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|v| v * k)
    }

    pub fn tanh(&self) -> Tensor {
        self.map(f64::tanh)
    }

    pub fn relu(&self) -> Tensor {
        self.map(|v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn exp(&self) -> Tensor {
        self.map(f64::exp)
    }

    pub fn log(&self) -> Tensor {
        self.map(f64::ln)
    }

    pub fn square(&self) -> Tensor {
        self.map(|v| v * v)
    }

    pub fn sum(&self) -> Tensor {
        Tensor::scalar(self.data.iter().sum())
    }

    pub fn mean(&self) -> Tensor {
        Tensor::scalar(self.data.iter().sum::<f64>() / self.data.len() as f64)
    }

    /// Sum each row of a `[m × n]` matrix into a `[m × 1]` column.
    pub fn row_sum(&self) -> Result<Tensor, TensorError> {
        let (m, n) = self.require_2d("row_sum")?;
        let out = (0..m)
            .map(|i| self.data[i * n..(i + 1) * n].iter().sum())
            .collect();
        Tensor::from_vec(vec![m, 1], out)
    }

    /// Scale every row of a `[m × d]` matrix to unit L2 norm.
    ///
    /// A row whose norm falls below 1e-12 is an error (with the row index);
    /// no silent epsilon-padding happens.
    pub fn rowwise_l2_normalize(&self) -> Result<Tensor, TensorError> {
        let (m, n) = self.require_2d("rowwise_l2_normalize")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &self.data[i * n..(i + 1) * n];
            let norm = row_norm(row);
            if norm < 1e-12 {
                return Err(TensorError::DegenerateRow { row: i, norm });
            }
            for j in 0..n {
                out[i * n + j] = row[j] / norm;
            }
        }
        Tensor::from_vec(vec![m, n], out)
    }

    /// Row-wise log-softmax with max subtraction for overflow safety.
    pub fn log_softmax_rows(&self) -> Result<Tensor, TensorError> {
        let (m, n) = self.require_2d("log_softmax_rows")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &self.data[i * n..(i + 1) * n];
            log_softmax_row(row, &mut out[i * n..(i + 1) * n]);
        }
        Tensor::from_vec(vec![m, n], out)
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            node: None,
        }
    }
}

pub(crate) fn row_norm(row: &[f64]) -> f64 {
    row.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub(crate) fn log_softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
    let log_sum = sum.ln();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v - max - log_sum;
    }
}

pub(crate) fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    // out[i,j] += sum_t a[i,t] * b[t,j]; iteration order keeps b access sequential.
    for i in 0..m {
        for t in 0..k {
            let av = a[i * k + t];
            if av == 0.0 {
                continue;
            }
            let brow = &b[t * n..(t + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// Elementwise combine with scalar broadcast: shapes must match exactly, or
/// one side must be a single element.
fn broadcast_zip(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor, TensorError> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(a.shape.clone(), data)
    } else if b.is_scalar() {
        let s = b.data[0];
        Tensor::from_vec(a.shape.clone(), a.data.iter().map(|&x| f(x, s)).collect())
    } else if a.is_scalar() {
        let s = a.data[0];
        Tensor::from_vec(b.shape.clone(), b.data.iter().map(|&y| f(s, y)).collect())
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        })
    }
}
