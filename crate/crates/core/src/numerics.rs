//! Dense double-precision vectors and matrices plus the element-wise
//! activations the recurrent cells are built from.
//!
//! Shape mismatches are programming errors at this level and panic with a
//! message naming both operand shapes. [`Matrix::try_matvec`] is the checked
//! variant for callers that validate untrusted input.

use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("shape mismatch in {op}: {left} vs {right}")]
pub struct ShapeError {
    pub op: &'static str,
    pub left: String,
    pub right: String,
}

/// Column vector of `f64`.
#[derive(Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn zeros(len: usize) -> Self {
        Vector(vec![0.0; len])
    }

    pub fn filled(len: usize, value: f64) -> Self {
        Vector(vec![value; len])
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Vector(data)
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

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Vector {
        Vector(self.0.iter().map(|&x| f(x)).collect())
    }

    pub fn zip_map(&self, other: &Vector, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Vector {
        assert_same_len(op, self, other);
        Vector(self.0.iter().zip(&other.0).map(|(&a, &b)| f(a, b)).collect())
    }

    pub fn add(&self, other: &Vector) -> Vector {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Vector) -> Vector {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Vector {
        self.map(|x| x * s)
    }

    pub fn add_assign(&mut self, other: &Vector) {
        assert_same_len("add_assign", self, other);
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        assert_same_len("dot", self, other);
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    /// Concatenates vectors end to end.
    pub fn concat(parts: &[&Vector]) -> Vector {
        let mut out = Vec::with_capacity(parts.iter().map(|v| v.len()).sum());
        for p in parts {
            out.extend_from_slice(&p.0);
        }
        Vector(out)
    }
}

impl Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl IndexMut<usize> for Vector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

impl fmt::Debug for Vector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.0.iter()).finish()
    }
}

impl From<Vec<f64>> for Vector {
    fn from(v: Vec<f64>) -> Self {
        Vector(v)
    }
}

fn assert_same_len(op: &'static str, a: &Vector, b: &Vector) {
    if a.len() != b.len() {
        panic!(
            "{}",
            ShapeError { op, left: format!("vector[{}]", a.len()), right: format!("vector[{}]", b.len()) }
        );
    }
}

/// Row-major dense matrix.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from row-major data. Panics if `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length {} does not match {rows}x{cols}", data.len());
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Matrix { rows: rows.len(), cols, data }
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn try_matvec(&self, v: &Vector) -> Result<Vector, ShapeError> {
        if self.cols != v.len() {
            return Err(ShapeError {
                op: "matvec",
                left: format!("matrix {}x{}", self.rows, self.cols),
                right: format!("vector[{}]", v.len()),
            });
        }
        let x = v.as_slice();
        Ok(Vector(
            self.data
                .chunks_exact(self.cols.max(1))
                .take(self.rows)
                .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
                .collect(),
        ))
    }

    /// `self · v`.
    pub fn matvec(&self, v: &Vector) -> Vector {
        self.try_matvec(v).unwrap_or_else(|e| panic!("{e}"))
    }

    /// `selfᵀ · v`.
    pub fn matvec_t(&self, v: &Vector) -> Vector {
        if self.rows != v.len() {
            panic!(
                "{}",
                ShapeError {
                    op: "matvec_t",
                    left: format!("matrix {}x{} (transposed)", self.rows, self.cols),
                    right: format!("vector[{}]", v.len()),
                }
            );
        }
        let mut out = vec![0.0; self.cols];
        for (row, &s) in self.data.chunks_exact(self.cols.max(1)).zip(v.iter()) {
            if s == 0.0 {
                continue;
            }
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * s;
            }
        }
        Vector(out)
    }

    /// Accumulates `out += self · v` without allocating.
    pub fn matvec_acc(&self, v: &Vector, out: &mut Vector) {
        assert!(
            self.cols == v.len() && self.rows == out.len(),
            "{}",
            ShapeError {
                op: "matvec_acc",
                left: format!("matrix {}x{}", self.rows, self.cols),
                right: format!("vector[{}] -> vector[{}]", v.len(), out.len()),
            }
        );
        let x = v.as_slice();
        for (o, row) in out.0.iter_mut().zip(self.data.chunks_exact(self.cols.max(1))) {
            *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    /// Accumulates `out += selfᵀ · v` without allocating.
    pub fn matvec_t_acc(&self, v: &Vector, out: &mut Vector) {
        assert!(
            self.rows == v.len() && self.cols == out.len(),
            "{}",
            ShapeError {
                op: "matvec_t_acc",
                left: format!("matrix {}x{} (transposed)", self.rows, self.cols),
                right: format!("vector[{}] -> vector[{}]", v.len(), out.len()),
            }
        );
        for (row, &s) in self.data.chunks_exact(self.cols.max(1)).zip(v.iter()) {
            if s == 0.0 {
                continue;
            }
            for (o, a) in out.0.iter_mut().zip(row) {
                *o += a * s;
            }
        }
    }

    /// Rank-one update `self += a · bᵀ`.
    pub fn add_outer(&mut self, a: &Vector, b: &Vector) {
        assert!(
            self.rows == a.len() && self.cols == b.len(),
            "{}",
            ShapeError {
                op: "add_outer",
                left: format!("matrix {}x{}", self.rows, self.cols),
                right: format!("vector[{}] x vector[{}]", a.len(), b.len()),
            }
        );
        for (row, &s) in self.data.chunks_exact_mut(self.cols.max(1)).zip(a.iter()) {
            if s == 0.0 {
                continue;
            }
            for (r, x) in row.iter_mut().zip(b.iter()) {
                *r += s * x;
            }
        }
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix {}x{} ", self.rows, self.cols)?;
        f.debug_list().entries(self.data.chunks(self.cols.max(1))).finish()
    }
}

/// Free-function form of [`Matrix::matvec`].
pub fn matvec(m: &Matrix, v: &Vector) -> Vector {
    m.matvec(v)
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(v: &Vector) -> Vector {
    v.map(sigmoid_scalar)
}

pub fn tanh_act(v: &Vector) -> Vector {
    v.map(f64::tanh)
}

pub fn hadamard(a: &Vector, b: &Vector) -> Vector {
    a.zip_map(b, "hadamard", |x, y| x * y)
}

/// Softmax with max-subtraction. Panics on an empty vector.
pub fn softmax(v: &Vector) -> Vector {
    assert!(!v.is_empty(), "softmax of an empty vector");
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Vector(exps.into_iter().map(|e| e / total).collect())
}

/// Index of the largest element; ties go to the lowest index.
pub fn argmax(v: &Vector) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
