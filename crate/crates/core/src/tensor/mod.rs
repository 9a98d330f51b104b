//! Dense 2-D tensors with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is a plain row-major matrix of 64-bit reals. Differentiable
//! computation goes through [`Graph`], a define-by-run tape rebuilt per
//! minibatch; [`adam::AdamState`] applies bias-corrected Adam updates to
//! the resulting gradients.

mod graph;

pub mod adam;

pub use graph::{Graph, NodeId};

use thiserror::Error;

use crate::rng::Prng;

/// Log-variance values are clamped to this range before exponentiation.
pub const LOGVAR_MIN: f64 = -10.0;
/// See [`LOGVAR_MIN`].
pub const LOGVAR_MAX: f64 = 10.0;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("{op}: expected scalar, got shape {shape:?}")]
    NotAScalar {
        op: &'static str,
        shape: (usize, usize),
    },
    #[error("{op}: empty input")]
    EmptyInput { op: &'static str },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("non-finite value in {context}")]
    NonFinite { context: String },
    #[error("backward already ran on this graph")]
    BackwardTwice,
    #[error("data length {len} does not match shape {shape:?}")]
    BadLength { len: usize, shape: (usize, usize) },
}

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        if data.len() != rows * cols {
            return Err(TensorError::BadLength {
                len: data.len(),
                shape: (rows, cols),
            });
        }
        Ok(Tensor { rows, cols, data })
    }

    /// Build from row slices; panics on ragged input (test convenience).
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        assert!(!rows.is_empty(), "from_rows: no rows");
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "from_rows: ragged rows");
            data.extend_from_slice(r);
        }
        Tensor {
            rows: rows.len(),
            cols,
            data,
        }
    }

    /// Standard-normal entries drawn from `rng` in row-major order.
    pub fn randn(rows: usize, cols: usize, rng: &mut Prng) -> Self {
        let data = (0..rows * cols).map(|_| rng.normal()).collect();
        Tensor { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Value of a 1x1 tensor. Panics otherwise.
    pub fn item(&self) -> f64 {
        assert_eq!(
            (self.rows, self.cols),
            (1, 1),
            "item() on non-scalar tensor"
        );
        self.data[0]
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor, TensorError> {
        if self.cols != rhs.rows {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(),
                rhs: rhs.shape(),
            });
        }
        let (n, k, m) = (self.rows, self.cols, rhs.cols);
        let mut out = Tensor::zeros(n, m);
        for i in 0..n {
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let lhs_row = &rhs.data[p * m..(p + 1) * m];
                let out_row = &mut out.data[i * m..(i + 1) * m];
                for j in 0..m {
                    out_row[j] += a * lhs_row[j];
                }
            }
        }
        Ok(out)
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor, TensorError> {
        if self.shape() != rhs.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: self.shape(),
                rhs: rhs.shape(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor, TensorError> {
        if self.shape() != rhs.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "sub",
                lhs: self.shape(),
                rhs: rhs.shape(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Tensor {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    /// `self += factor * rhs`, in place. Shapes must already agree.
    pub fn add_scaled(&mut self, rhs: &Tensor, factor: f64) {
        debug_assert_eq!(self.shape(), rhs.shape());
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += factor * b;
        }
    }

    /// Horizontal concatenation `[self | rhs]`.
    pub fn concat_cols(&self, rhs: &Tensor) -> Result<Tensor, TensorError> {
        if self.rows != rhs.rows {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                lhs: self.shape(),
                rhs: rhs.shape(),
            });
        }
        let cols = self.cols + rhs.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for r in 0..self.rows {
            data.extend_from_slice(self.row(r));
            data.extend_from_slice(rhs.row(r));
        }
        Ok(Tensor {
            rows: self.rows,
            cols,
            data,
        })
    }

    /// New tensor keeping the given rows, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// Stack by repeating one row vector `n` times.
    pub fn tile_row(row: &[f64], n: usize) -> Tensor {
        let mut data = Vec::with_capacity(n * row.len());
        for _ in 0..n {
            data.extend_from_slice(row);
        }
        Tensor {
            rows: n,
            cols: row.len(),
            data,
        }
    }

    /// Row-wise softmax with max-subtraction.
    pub fn softmax_rows(&self) -> Tensor {
        let mut out = self.clone();
        for r in 0..self.rows {
            let row = &mut out.data[r * self.cols..(r + 1) * self.cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        out
    }

    /// Largest absolute entry difference; test helper.
    pub fn max_abs_diff(&self, rhs: &Tensor) -> f64 {
        assert_eq!(self.shape(), rhs.shape());
        self.data
            .iter()
            .zip(&rhs.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// FNV-1a over the raw bit patterns of every entry, in declaration order.
/// Used to assert that a training stage left another stage's parameters
/// untouched.
pub fn params_hash<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for t in params {
        for v in t.data() {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_hand_example() {
        let a = Tensor::from_rows(&[&[1.0, 1.0]]);
        let b = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[4.0, 6.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(2, 3);
        let b = Tensor::zeros(2, 3);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)"), "{msg}");
    }

    #[test]
    fn transpose_round_trip() {
        let mut rng = Prng::seed(5);
        let a = Tensor::randn(3, 4, &mut rng);
        assert_eq!(a.transpose().transpose(), a);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = Prng::seed(9);
        for _ in 0..20 {
            let a = Tensor::randn(4, 6, &mut rng).scale(10.0);
            let s = a.softmax_rows();
            for r in 0..s.rows() {
                let sum: f64 = s.row(r).iter().sum();
                assert!((sum - 1.0).abs() < 1e-12, "row sum {sum}");
            }
        }
    }

    #[test]
    fn concat_and_select() {
        let a = Tensor::from_rows(&[&[1.0], &[2.0]]);
        let b = Tensor::from_rows(&[&[3.0, 4.0], &[5.0, 6.0]]);
        let c = a.concat_cols(&b).unwrap();
        assert_eq!(c.row(1), &[2.0, 5.0, 6.0]);
        let s = c.select_rows(&[1, 0]);
        assert_eq!(s.row(0), &[2.0, 5.0, 6.0]);
        assert_eq!(s.row(1), &[1.0, 3.0, 4.0]);
    }

    #[test]
    fn params_hash_sensitive_to_any_bit() {
        let a = Tensor::from_rows(&[&[1.0, 2.0]]);
        let mut b = a.clone();
        let h0 = params_hash([&a]);
        assert_eq!(h0, params_hash([&b]));
        b.set(0, 1, 2.0 + 1e-15);
        assert_ne!(h0, params_hash([&b]));
    }
}
