//! Nonnegative vectors and sparse matrices, element-wise algebra and the
//! normalized KL divergence.
//!
//! Vectors are dense. Matrices are stored in compressed sparse row form and
//! only ever hold strictly positive entries, so the stored pattern *is* the
//! support and support checks reduce to pattern comparisons.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("negative or non-finite entry {value} at {index}")]
    InvalidEntry { index: String, value: f64 },
    #[error("shape mismatch: {left} vs {right}")]
    ShapeMismatch { left: String, right: String },
    #[error("support violation at {index}: p > 0 where q = 0")]
    SupportViolation { index: String },
    #[error("division by zero at {index}")]
    DivideByZero { index: String },
    #[error("logarithm of non-positive entry at {index}")]
    LogOfNonPositive { index: String },
    #[error("index ({row}, {col}) out of bounds for {rows}x{cols} matrix")]
    OutOfBounds {
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },
}

/// Dense vector with nonnegative, finite entries.
#[derive(Clone, PartialEq, Default)]
pub struct NonNegVector(Vec<f64>);

impl fmt::Debug for NonNegVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.0.iter()).finish()
    }
}

impl NonNegVector {
    pub fn new(entries: Vec<f64>) -> Result<Self, TensorError> {
        if let Some((i, &v)) = entries
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && **v >= 0.0))
        {
            return Err(TensorError::InvalidEntry {
                index: i.to_string(),
                value: v,
            });
        }
        Ok(Self(entries))
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn ones(n: usize) -> Self {
        Self(vec![1.0; n])
    }

    pub fn filled(n: usize, value: f64) -> Result<Self, TensorError> {
        Self::new(vec![value; n])
    }

    pub fn unit(n: usize, i: usize) -> Self {
        let mut v = vec![0.0; n];
        v[i] = 1.0;
        Self(v)
    }

    /// Element-wise `exp` of an arbitrary real vector.
    pub fn exp_of(x: &[f64]) -> Result<Self, TensorError> {
        Self::new(x.iter().map(|v| v.exp()).collect())
    }

    /// Wraps a vector the caller guarantees to be nonnegative and finite.
    pub(crate) fn from_vec_unchecked(entries: Vec<f64>) -> Self {
        debug_assert!(entries.iter().all(|v| v.is_finite() && *v >= 0.0));
        Self(entries)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().fold(0.0, |a, b| a + b)
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(0.0, f64::max)
    }

    pub fn support(&self) -> Vec<usize> {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, v)| **v > 0.0)
            .map(|(i, _)| i)
            .collect()
    }

    fn check_len(&self, other: &Self) -> Result<(), TensorError> {
        if self.len() != other.len() {
            return Err(TensorError::ShapeMismatch {
                left: format!("[{}]", self.len()),
                right: format!("[{}]", other.len()),
            });
        }
        Ok(())
    }

    pub fn mul(&self, other: &Self) -> Result<Self, TensorError> {
        self.check_len(other)?;
        Ok(Self(
            self.0.iter().zip(&other.0).map(|(a, b)| a * b).collect(),
        ))
    }

    /// Element-wise division on the support of `self`; `0 / 0` is `0`.
    pub fn div(&self, other: &Self) -> Result<Self, TensorError> {
        self.check_len(other)?;
        let mut out = Vec::with_capacity(self.len());
        for (i, (a, b)) in self.0.iter().zip(&other.0).enumerate() {
            if *a == 0.0 {
                out.push(0.0);
            } else if *b == 0.0 {
                return Err(TensorError::DivideByZero {
                    index: i.to_string(),
                });
            } else {
                out.push(a / b);
            }
        }
        Self::new(out)
    }

    pub fn exp(&self) -> Result<Self, TensorError> {
        Self::exp_of(&self.0)
    }

    /// Element-wise natural logarithm. Dense vectors store every entry, so
    /// every entry must be strictly positive.
    pub fn ln(&self) -> Result<Vec<f64>, TensorError> {
        self.0
            .iter()
            .enumerate()
            .map(|(i, v)| {
                if *v > 0.0 {
                    Ok(v.ln())
                } else {
                    Err(TensorError::LogOfNonPositive {
                        index: i.to_string(),
                    })
                }
            })
            .collect()
    }
}

impl std::ops::Index<usize> for NonNegVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl TryFrom<Vec<f64>> for NonNegVector {
    type Error = TensorError;
    fn try_from(v: Vec<f64>) -> Result<Self, TensorError> {
        Self::new(v)
    }
}

/// Sparse nonnegative matrix in CSR layout. Every stored value is strictly
/// positive; absent positions are exactly zero.
#[derive(Clone, PartialEq)]
pub struct NonNegMatrix {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl fmt::Debug for NonNegMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "NonNegMatrix {}x{} ", self.rows, self.cols)?;
        f.debug_list().entries(self.triplets()).finish()
    }
}

impl NonNegMatrix {
    /// Builds from `(row, col, value)` triplets. Duplicates are summed and
    /// zeros are dropped.
    pub fn from_triplets(
        rows: usize,
        cols: usize,
        triplets: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self, TensorError> {
        let mut entries: Vec<(usize, usize, f64)> = Vec::new();
        for (i, j, v) in triplets {
            if i >= rows || j >= cols {
                return Err(TensorError::OutOfBounds {
                    row: i,
                    col: j,
                    rows,
                    cols,
                });
            }
            if !(v.is_finite() && v >= 0.0) {
                return Err(TensorError::InvalidEntry {
                    index: format!("({i}, {j})"),
                    value: v,
                });
            }
            entries.push((i, j, v));
        }
        entries.sort_by_key(|e| (e.0, e.1));

        let mut row_ptr = vec![0usize; rows + 1];
        let mut col_idx = Vec::with_capacity(entries.len());
        let mut values: Vec<f64> = Vec::with_capacity(entries.len());
        let mut last: Option<(usize, usize)> = None;
        for (i, j, v) in entries {
            if last == Some((i, j)) {
                *values.last_mut().expect("duplicate follows an entry") += v;
                continue;
            }
            last = Some((i, j));
            row_ptr[i + 1] += 1;
            col_idx.push(j);
            values.push(v);
        }
        for i in 0..rows {
            row_ptr[i + 1] += row_ptr[i];
        }
        let m = Self {
            rows,
            cols,
            row_ptr,
            col_idx,
            values,
        };
        Ok(m.retain(|_, _, v| v > 0.0))
    }

    pub fn from_dense(dense: &[Vec<f64>]) -> Result<Self, TensorError> {
        let rows = dense.len();
        let cols = dense.first().map_or(0, |r| r.len());
        if let Some(r) = dense.iter().find(|r| r.len() != cols) {
            return Err(TensorError::ShapeMismatch {
                left: format!("row of length {cols}"),
                right: format!("row of length {}", r.len()),
            });
        }
        Self::from_triplets(
            rows,
            cols,
            dense
                .iter()
                .enumerate()
                .flat_map(|(i, r)| r.iter().enumerate().map(move |(j, v)| (i, j, *v))),
        )
    }

    pub fn identity(n: usize) -> Self {
        Self {
            rows: n,
            cols: n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            row_ptr: vec![0; rows + 1],
            col_idx: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[r.clone()]
            .iter()
            .copied()
            .zip(self.values[r].iter().copied())
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.rows).flat_map(move |i| self.row(i).map(move |(j, v)| (i, j, v)))
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.col_idx[r.clone()].binary_search(&j) {
            Ok(k) => self.values[r.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[r].binary_search(&j).is_ok()
    }

    /// True when every stored position of `self` is also stored in `other`.
    pub fn support_subset_of(&self, other: &Self) -> bool {
        self.rows == other.rows
            && self.cols == other.cols
            && self.triplets().all(|(i, j, _)| other.contains(i, j))
    }

    pub fn same_shape(&self, other: &Self) -> Result<(), TensorError> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(TensorError::ShapeMismatch {
                left: format!("{}x{}", self.rows, self.cols),
                right: format!("{}x{}", other.rows, other.cols),
            });
        }
        Ok(())
    }

    /// `y = A x`
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.rows];
        self.mul_vec_into(x, &mut y);
        y
    }

    pub fn mul_vec_into(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        for (i, yi) in y.iter_mut().enumerate() {
            let r = self.row_ptr[i]..self.row_ptr[i + 1];
            *yi = self.col_idx[r.clone()]
                .iter()
                .zip(&self.values[r])
                .map(|(j, a)| a * x[*j])
                .fold(0.0, |acc, v| acc + v);
        }
    }

    /// `y = Aᵀ x`
    pub fn tr_mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.cols];
        self.tr_mul_vec_into(x, &mut y);
        y
    }

    pub fn tr_mul_vec_into(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.rows);
        y.iter_mut().for_each(|v| *v = 0.0);
        for (i, xi) in x.iter().enumerate() {
            if *xi == 0.0 {
                continue;
            }
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                y[self.col_idx[k]] += self.values[k] * xi;
            }
        }
    }

    pub fn transpose(&self) -> Self {
        let mut t: Vec<(usize, usize, f64)> = self.triplets().map(|(i, j, v)| (j, i, v)).collect();
        t.sort_by_key(|e| (e.0, e.1));
        let mut row_ptr = vec![0usize; self.cols + 1];
        for (i, _, _) in &t {
            row_ptr[i + 1] += 1;
        }
        for i in 0..self.cols {
            row_ptr[i + 1] += row_ptr[i];
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            row_ptr,
            col_idx: t.iter().map(|e| e.1).collect(),
            values: t.iter().map(|e| e.2).collect(),
        }
    }

    pub fn row_sums(&self) -> NonNegVector {
        NonNegVector::from_vec_unchecked(
            (0..self.rows)
                .map(|i| self.values[self.row_ptr[i]..self.row_ptr[i + 1]].iter().fold(0.0, |a, b| a + b))
                .collect(),
        )
    }

    pub fn col_sums(&self) -> NonNegVector {
        NonNegVector::from_vec_unchecked(self.tr_mul_vec(&vec![1.0; self.rows]))
    }

    /// `diag(left) · A · diag(right)` on the support of `A`; entries that
    /// become zero are dropped.
    pub fn scale(&self, left: &[f64], right: &[f64]) -> Result<Self, TensorError> {
        if left.len() != self.rows || right.len() != self.cols {
            return Err(TensorError::ShapeMismatch {
                left: format!("{}x{}", self.rows, self.cols),
                right: format!("diag({}) . diag({})", left.len(), right.len()),
            });
        }
        if let Some((i, v)) = left
            .iter()
            .chain(right)
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && **v >= 0.0))
        {
            return Err(TensorError::InvalidEntry {
                index: format!("scaling {i}"),
                value: *v,
            });
        }
        let mut out = self.clone();
        for i in 0..self.rows {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                out.values[k] = left[i] * self.values[k] * right[self.col_idx[k]];
            }
        }
        Ok(out.retain(|_, _, v| v > 0.0))
    }

    /// Keeps only the stored entries for which `keep` holds.
    pub fn retain(&self, mut keep: impl FnMut(usize, usize, f64) -> bool) -> Self {
        let mut row_ptr = Vec::with_capacity(self.rows + 1);
        let mut col_idx = Vec::with_capacity(self.nnz());
        let mut values = Vec::with_capacity(self.nnz());
        row_ptr.push(0);
        for i in 0..self.rows {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                let (j, v) = (self.col_idx[k], self.values[k]);
                if keep(i, j, v) {
                    col_idx.push(j);
                    values.push(v);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Self {
            rows: self.rows,
            cols: self.cols,
            row_ptr,
            col_idx,
            values,
        }
    }

    /// Element-wise product; the result lives on the intersection of supports.
    pub fn mul(&self, other: &Self) -> Result<Self, TensorError> {
        self.same_shape(other)?;
        Self::from_triplets(
            self.rows,
            self.cols,
            self.triplets().map(|(i, j, v)| (i, j, v * other.get(i, j))),
        )
    }

    /// Element-wise quotient on the support of `self`.
    pub fn div(&self, other: &Self) -> Result<Self, TensorError> {
        self.same_shape(other)?;
        let mut out = Vec::with_capacity(self.nnz());
        for (i, j, v) in self.triplets() {
            let d = other.get(i, j);
            if d == 0.0 {
                return Err(TensorError::DivideByZero {
                    index: format!("({i}, {j})"),
                });
            }
            out.push((i, j, v / d));
        }
        Self::from_triplets(self.rows, self.cols, out)
    }

    /// Element-wise `exp` on the stored support.
    pub fn exp(&self) -> Result<Self, TensorError> {
        Self::from_triplets(
            self.rows,
            self.cols,
            self.triplets().map(|(i, j, v)| (i, j, v.exp())),
        )
    }

    /// Element-wise logarithm on the stored support, as `(i, j, ln v)`.
    pub fn ln(&self) -> Vec<(usize, usize, f64)> {
        self.triplets().map(|(i, j, v)| (i, j, v.ln())).collect()
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.cols]; self.rows];
        for (i, j, v) in self.triplets() {
            d[i][j] = v;
        }
        d
    }

    /// Raw CSR arrays `(row_ptr, col_idx, values)`.
    pub(crate) fn csr(&self) -> (&[usize], &[usize], &[f64]) {
        (&self.row_ptr, &self.col_idx, &self.values)
    }
}

/// Row sums `M𝟙`.
pub fn row_sums(m: &NonNegMatrix) -> NonNegVector {
    m.row_sums()
}

fn kl_term(p: f64, q: f64) -> f64 {
    if p == 0.0 {
        q
    } else {
        p * (p / q).ln() - p + q
    }
}

/// The normalized KL divergence `Σ p log(p/q) − p + q` with `0 log 0 = 0`.
pub trait KlDivergence {
    fn kl_divergence(&self, q: &Self) -> Result<f64, TensorError>;
}

impl KlDivergence for NonNegVector {
    fn kl_divergence(&self, q: &Self) -> Result<f64, TensorError> {
        self.check_len(q)?;
        let mut total = 0.0;
        for (i, (p, q)) in self.0.iter().zip(&q.0).enumerate() {
            if *p > 0.0 && *q == 0.0 {
                return Err(TensorError::SupportViolation {
                    index: i.to_string(),
                });
            }
            total += kl_term(*p, *q);
        }
        Ok(total)
    }
}

impl KlDivergence for NonNegMatrix {
    fn kl_divergence(&self, q: &Self) -> Result<f64, TensorError> {
        self.same_shape(q)?;
        let mut total = 0.0;
        for i in 0..self.rows {
            let mut pk = self.row_ptr[i];
            let pend = self.row_ptr[i + 1];
            for (j, qv) in q.row(i) {
                if pk < pend && self.col_idx[pk] < j {
                    return Err(TensorError::SupportViolation {
                        index: format!("({i}, {})", self.col_idx[pk]),
                    });
                }
                if pk < pend && self.col_idx[pk] == j {
                    total += kl_term(self.values[pk], qv);
                    pk += 1;
                } else {
                    total += qv;
                }
            }
            if pk < pend {
                return Err(TensorError::SupportViolation {
                    index: format!("({i}, {})", self.col_idx[pk]),
                });
            }
        }
        Ok(total)
    }
}

/// Free-function form of [`KlDivergence::kl_divergence`].
pub fn kl_divergence<T: KlDivergence>(p: &T, q: &T) -> Result<f64, TensorError> {
    p.kl_divergence(q)
}
