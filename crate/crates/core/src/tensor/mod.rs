//! Dense 2-D tensors with reverse-mode automatic differentiation.
//!
//! Everything in the network is a row-major matrix of `f64`: a point group is
//! `k x c`, a hyperpoint is `1 x d_H`, a scalar loss is `1 x 1`. The [`Graph`]
//! records forward operations and replays them in reverse creation order to
//! accumulate gradients for the parameter leaves.

mod adam;
mod checkpoint;
mod gradcheck;
mod graph;
mod params;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use gradcheck::{grad_check, GradCheckReport, FD_STEP};
pub use graph::{Graph, NodeId, OpKind};
pub use params::{accumulate_grads, GradMap, ParamSnapshot, ParameterStore};

use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: [usize; 2],
        rhs: [usize; 2],
    },
    #[error("{op}: expected a scalar node, got shape {shape:?}")]
    NonScalar { op: &'static str, shape: [usize; 2] },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

/// Row-major `rows x cols` matrix of `f64`.
///
/// The payload is behind an [`Arc`], so cloning a tensor (and therefore
/// snapshotting a whole parameter store for inference workers) is cheap.
/// Mutation goes through [`Tensor::data_mut`], which copies only when the
/// payload is shared.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: Arc::new(vec![0.0; rows * cols]),
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        if data.len() != rows * cols {
            return Err(TensorError::Invalid {
                op: "from_vec",
                msg: format!("{} values do not fill a {rows}x{cols} tensor", data.len()),
            });
        }
        Ok(Tensor {
            rows,
            cols,
            data: Arc::new(data),
        })
    }

    /// Single row vector `1 x n`.
    pub fn row(values: &[f64]) -> Self {
        Tensor {
            rows: 1,
            cols: values.len(),
            data: Arc::new(values.to_vec()),
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, TensorError> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TensorError::Invalid {
                op: "from_rows",
                msg: "ragged rows".into(),
            });
        }
        Ok(Tensor {
            rows: rows.len(),
            cols,
            data: Arc::new(rows.iter().flatten().copied().collect()),
        })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::row(&[value])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Round every value through `f32`, the storage precision of the
    /// checkpoint and sequence file formats.
    pub fn quantize_f32(&self) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: Arc::new(self.data.iter().map(|&v| v as f32 as f64).collect()),
        }
    }

    /// `self += other`, used for gradient accumulation across consumers.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<(), TensorError> {
        if self.shape() != other.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "add_assign",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let dst = self.data_mut();
        for (d, s) in dst.iter_mut().zip(other.data.iter()) {
            *d += s;
        }
        Ok(())
    }

    pub fn scale_by(&mut self, factor: f64) {
        for v in self.data_mut() {
            *v *= factor;
        }
    }
}

/// `a x b` for row-major operands; the inner loop runs along the rows of `b`
/// so the compiler can vectorize the column accumulation.
pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert_eq!(a.cols, b.rows);
    let (m, n) = (a.rows, b.cols);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = a.row_slice(i);
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = b.row_slice(p);
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
    Tensor {
        rows: m,
        cols: n,
        data: Arc::new(out),
    }
}

/// `a^T x b` without materializing the transpose.
pub(crate) fn matmul_at_b(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert_eq!(a.rows, b.rows);
    let (m, k, n) = (a.cols, a.rows, b.cols);
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = a.row_slice(p);
        let brow = b.row_slice(p);
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
    Tensor {
        rows: m,
        cols: n,
        data: Arc::new(out),
    }
}

/// `a x b^T` without materializing the transpose.
pub(crate) fn matmul_a_bt(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert_eq!(a.cols, b.cols);
    let (m, n) = (a.rows, b.rows);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = a.row_slice(i);
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = b.row_slice(j);
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow.iter()) {
                acc += av * bv;
            }
            *o = acc;
        }
    }
    Tensor {
        rows: m,
        cols: n,
        data: Arc::new(out),
    }
}
