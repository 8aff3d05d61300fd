//! Dense row-major `f64` matrices.
//!
//! Every tensor in the engine is a 2-D matrix; scalars are `1x1`, row
//! vectors `1xn`. Higher-rank data (per-head neighbor blocks and the like)
//! is carried as flattened row blocks with the grouping tracked by the
//! operation that produced it.

use std::fmt;

/// Errors produced by matrix construction and the differentiation graph.
#[derive(Clone, Debug, PartialEq)]
pub enum NumericsError {
    /// Two operands have shapes the operation cannot combine.
    DimMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    /// A single operand has a shape the operation cannot accept.
    BadShape {
        op: &'static str,
        shape: (usize, usize),
        detail: &'static str,
    },
    /// Construction data does not fill the requested shape.
    DataLength { expected: usize, got: usize },
    /// `backward` was invoked on a non-scalar tensor.
    NotScalar { shape: (usize, usize) },
    /// The single-use tape was asked to run backward a second time.
    TapeConsumed,
    /// A row index is out of range for a gather or label lookup.
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    /// A class label is not smaller than the logit column count.
    LabelOutOfRange { label: usize, classes: usize },
    /// A parameter path was registered twice or not found.
    UnknownParam { path: String },
    DuplicateParam { path: String },
    /// A parameter marked `requires_grad` has no populated gradient.
    MissingGrad { path: String },
    /// A value that must be finite is NaN or infinite.
    NonFinite { what: String },
    /// A hyperparameter is outside its valid range.
    InvalidConfig { what: String },
    /// The function under finite-difference test returned different values
    /// for two identical evaluations.
    NondeterministicFunction { first: f64, second: f64 },
}

impl fmt::Display for NumericsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NumericsError::DimMismatch { op, left, right } => write!(
                f,
                "{op}: incompatible shapes {}x{} and {}x{}",
                left.0, left.1, right.0, right.1
            ),
            NumericsError::BadShape { op, shape, detail } => {
                write!(f, "{op}: bad shape {}x{} ({detail})", shape.0, shape.1)
            }
            NumericsError::DataLength { expected, got } => {
                write!(f, "data length {got} does not match shape ({expected} expected)")
            }
            NumericsError::NotScalar { shape } => {
                write!(f, "backward needs a 1x1 loss, got {}x{}", shape.0, shape.1)
            }
            NumericsError::TapeConsumed => write!(f, "tape already consumed by backward"),
            NumericsError::IndexOutOfRange { op, index, len } => {
                write!(f, "{op}: index {index} out of range for length {len}")
            }
            NumericsError::LabelOutOfRange { label, classes } => {
                write!(f, "label {label} out of range for {classes} classes")
            }
            NumericsError::UnknownParam { path } => write!(f, "unknown parameter '{path}'"),
            NumericsError::DuplicateParam { path } => {
                write!(f, "parameter '{path}' registered twice")
            }
            NumericsError::MissingGrad { path } => {
                write!(f, "parameter '{path}' has no gradient")
            }
            NumericsError::NonFinite { what } => write!(f, "non-finite value in {what}"),
            NumericsError::InvalidConfig { what } => write!(f, "invalid configuration: {what}"),
            NumericsError::NondeterministicFunction { first, second } => write!(
                f,
                "function under test is not deterministic: {first} vs {second}"
            ),
        }
    }
}

impl std::error::Error for NumericsError {}

/// Dense row-major matrix of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Mat {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumericsError> {
        if data.len() != rows * cols {
            return Err(NumericsError::DataLength {
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NumericsError> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(NumericsError::DataLength {
                    expected: c,
                    got: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Mat { rows: r, cols: c, data })
    }

    pub fn scalar(value: f64) -> Self {
        Mat {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The scalar held by a `1x1` matrix.
    pub fn item(&self) -> Result<f64, NumericsError> {
        if self.rows == 1 && self.cols == 1 {
            Ok(self.data[0])
        } else {
            Err(NumericsError::NotScalar {
                shape: self.shape(),
            })
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterpret the same row-major buffer under a new shape.
    pub fn reshaped(&self, rows: usize, cols: usize) -> Result<Self, NumericsError> {
        if rows * cols != self.data.len() {
            return Err(NumericsError::DataLength {
                expected: self.data.len(),
                got: rows * cols,
            });
        }
        Ok(Mat {
            rows,
            cols,
            data: self.data.clone(),
        })
    }

    pub fn max_abs_diff(&self, other: &Mat) -> f64 {
        debug_assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Mat::from_vec(2, 2, vec![1.0, 2.0, 3.0]).is_err());
        let m = Mat::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(m.get(1, 0), 3.0);
    }

    #[test]
    fn reshape_preserves_row_major_order() {
        let m = Mat::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let r = m.reshaped(3, 2).unwrap();
        assert_eq!(r.row(1), &[3.0, 4.0]);
        assert!(m.reshaped(4, 2).is_err());
    }

    #[test]
    fn item_requires_scalar() {
        assert_eq!(Mat::scalar(7.5).item().unwrap(), 7.5);
        assert!(Mat::zeros(2, 1).item().is_err());
    }
}
