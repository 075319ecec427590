//! Dense row-major `f64` tensors.
//!
//! Every numeric value in the crate travels as a [`Tensor`]. Rank-1 tensors
//! act as row vectors wherever a matrix is expected, so a `[n]` tensor and a
//! `[1, n]` tensor are interchangeable in matrix products.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Shape(format!("zero-sized dimension in {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} entries, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(vec![r, c], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut t = Self::zeros(&[n, n]);
        for (i, v) in values.iter().enumerate() {
            t.data[i * n + i] = *v;
        }
        t
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(rows, cols)` of the matrix view; rank-1 tensors are single rows.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            other => {
                let c = *other.last().unwrap_or(&1);
                (self.data.len() / c.max(1), c)
            }
        }
    }

    pub fn rows(&self) -> usize {
        self.dims2().0
    }

    pub fn cols(&self) -> usize {
        self.dims2().1
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let c = self.cols();
        self.data[i * c + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn as_matrix(&self) -> Self {
        let (r, c) = self.dims2();
        Self {
            shape: vec![r, c],
            data: self.data.clone(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = self.dims2();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self {
            shape: vec![c, r],
            data: out,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "elementwise op on {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| v * c)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `self · other` for `[m, k] · [k, n]`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.dims2();
        let (k2, n) = other.dims2();
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Self::matrix(m, n, out)
    }

    /// `self · otherᵀ` for `[m, k] · [n, k]ᵀ`. Each output entry is a
    /// left-to-right dot product over `k`.
    pub fn matmul_t(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.dims2();
        let (n, k2) = other.dims2();
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul_t {:?} x {:?}ᵀ",
                self.shape, other.shape
            )));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let b_row = &other.data[j * k..(j + 1) * k];
                let mut acc = 0.0;
                for (a, b) in a_row.iter().zip(b_row) {
                    acc += a * b;
                }
                out[i * n + j] = acc;
            }
        }
        Self::matrix(m, n, out)
    }

    /// `selfᵀ · other` for `[k, m]ᵀ · [k, n]`.
    pub fn t_matmul(&self, other: &Self) -> Result<Self> {
        let (k, m) = self.dims2();
        let (k2, n) = other.dims2();
        if k != k2 {
            return Err(Error::Shape(format!(
                "t_matmul {:?}ᵀ x {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![0.0; m * n];
        for p in 0..k {
            let a_row = &self.data[p * m..(p + 1) * m];
            let b_row = &other.data[p * n..(p + 1) * n];
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let o_row = &mut out[i * n..(i + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Self::matrix(m, n, out)
    }

    /// Adds `bias` (length `cols`) to every row.
    pub fn add_row(&self, bias: &Self) -> Result<Self> {
        let (r, c) = self.dims2();
        if bias.len() != c {
            return Err(Error::Shape(format!(
                "row bias of length {} on {:?}",
                bias.len(),
                self.shape
            )));
        }
        let mut out = self.as_matrix();
        for i in 0..r {
            for (o, b) in out.row_mut(i).iter_mut().zip(&bias.data) {
                *o += b;
            }
        }
        Ok(out)
    }

    pub fn concat_cols(&self, other: &Self) -> Result<Self> {
        let (r, c1) = self.dims2();
        let (r2, c2) = other.dims2();
        if r != r2 {
            return Err(Error::Shape(format!(
                "concat {:?} with {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = Vec::with_capacity(r * (c1 + c2));
        for i in 0..r {
            out.extend_from_slice(self.row(i));
            out.extend_from_slice(other.row(i));
        }
        Self::matrix(r, c1 + c2, out)
    }

    /// Column slice `[start, end)` of the matrix view.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Self> {
        let (r, c) = self.dims2();
        if start >= end || end > c {
            return Err(Error::Shape(format!(
                "column slice {start}..{end} of {:?}",
                self.shape
            )));
        }
        let mut out = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            out.extend_from_slice(&self.row(i)[start..end]);
        }
        Self::matrix(r, end - start, out)
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let c = self.cols();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(self.row(i));
        }
        Self {
            shape: vec![idx.len(), c],
            data: out,
        }
    }

    pub fn stack_rows(rows: &[Self]) -> Result<Self> {
        let c = rows
            .first()
            .ok_or_else(|| Error::Shape("stacking zero rows".into()))?
            .len();
        let mut out = Vec::with_capacity(rows.len() * c);
        for r in rows {
            if r.len() != c {
                return Err(Error::Shape("stacking rows of unequal length".into()));
            }
            out.extend_from_slice(&r.data);
        }
        Self::matrix(rows.len(), c, out)
    }

    /// Stacks `[r_i, c]` blocks vertically.
    pub fn concat_rows(blocks: &[Self]) -> Result<Self> {
        let c = blocks
            .first()
            .ok_or_else(|| Error::Shape("concatenating zero blocks".into()))?
            .cols();
        let mut rows = 0;
        let mut out = Vec::new();
        for b in blocks {
            let b = b.as_matrix();
            if b.cols() != c {
                return Err(Error::Shape(format!("concatenating blocks with {} and {c} columns", b.cols())));
            }
            rows += b.rows();
            out.extend_from_slice(&b.data);
        }
        Self::matrix(rows, c, out)
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let (r, c) = self.dims2();
        let mut m = vec![0.0; c];
        for i in 0..r {
            for (acc, v) in m.iter_mut().zip(self.row(i)) {
                *acc += v;
            }
        }
        m
    }

    pub fn column_means(&self) -> Vec<f64> {
        let (r, c) = self.dims2();
        let mut m = vec![0.0; c];
        for i in 0..r {
            for (acc, v) in m.iter_mut().zip(self.row(i)) {
                *acc += v;
            }
        }
        m.iter_mut().for_each(|v| *v /= r as f64);
        m
    }

    /// Unbiased sample covariance of the rows.
    pub fn row_covariance(&self) -> Self {
        let (r, c) = self.dims2();
        let mean = self.column_means();
        let mut cov = vec![0.0; c * c];
        for i in 0..r {
            let row = self.row(i);
            for a in 0..c {
                let da = row[a] - mean[a];
                for b in 0..c {
                    cov[a * c + b] += da * (row[b] - mean[b]);
                }
            }
        }
        let denom = (r.max(2) - 1) as f64;
        cov.iter_mut().for_each(|v| *v /= denom);
        Self {
            shape: vec![c, c],
            data: cov,
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.norm()
    }

    pub fn trace(&self) -> f64 {
        let (r, c) = self.dims2();
        (0..r.min(c)).map(|i| self.get(i, i)).sum()
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(
                f,
                "Tensor{:?}[{}, {}, .. {} more]",
                self.shape,
                self.data[0],
                self.data[1],
                self.data.len() - 2
            )
        }
    }
}
