//! Dense double-precision vectors and matrices, stable elementwise
//! nonlinearities and the seeded random source used everywhere else.
//!
//! Matrices are stored row-major. Nothing here tries to be fast beyond
//! keeping the inner loops contiguous; the models this crate trains are
//! small enough that a straightforward matvec is the bottleneck anyway.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FaeError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector {
    data: Vec<f64>,
}

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{})", self.rows, self.cols)?;
        if self.data.len() <= 64 {
            f.debug_list()
                .entries(self.data.chunks(self.cols.max(1)))
                .finish()?;
        }
        Ok(())
    }
}

impl Vector {
    pub fn zeros(dim: usize) -> Self {
        Vector {
            data: vec![0.0; dim],
        }
    }

    pub fn filled(dim: usize, value: f64) -> Self {
        Vector {
            data: vec![value; dim],
        }
    }

    pub fn one_hot(dim: usize, index: usize) -> Result<Self> {
        if index >= dim {
            return Err(FaeError::Input(format!(
                "one-hot index {index} out of range for dim {dim}"
            )));
        }
        let mut v = Vector::zeros(dim);
        v.data[index] = 1.0;
        Ok(v)
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn dot(&self, other: &Vector) -> Result<f64> {
        check_same("dot", self, other)?;
        Ok(dot(&self.data, &other.data))
    }

    pub fn scale(&self, s: f64) -> Vector {
        self.data.iter().map(|x| x * s).collect()
    }

    /// `self += s * other`
    pub fn axpy(&mut self, s: f64, other: &Vector) -> Result<()> {
        check_same("axpy", self, other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    /// Splits into `[..at]` and `[at..]`.
    pub fn split(&self, at: usize) -> Result<(Vector, Vector)> {
        if at > self.dim() {
            return Err(FaeError::shape("split", self.dim(), at));
        }
        Ok((
            Vector::from(self.data[..at].to_vec()),
            Vector::from(self.data[at..].to_vec()),
        ))
    }

    pub fn argmax(&self) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, &x) in self.data.iter().enumerate() {
            match best {
                Some((_, b)) if x <= b => {}
                _ => best = Some((i, x)),
            }
        }
        best.map(|(i, _)| i)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

impl From<Vec<f64>> for Vector {
    fn from(data: Vec<f64>) -> Self {
        Vector { data }
    }
}

impl FromIterator<f64> for Vector {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        Vector {
            data: iter.into_iter().collect(),
        }
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

impl std::ops::IndexMut<usize> for Vector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.data[i]
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(FaeError::shape(
                "Matrix::from_vec",
                format!("{rows}x{cols}"),
                format!("{} values", data.len()),
            ));
        }
        if let Some(bad) = data.iter().find(|x| !x.is_finite()) {
            return Err(FaeError::Input(format!("non-finite matrix entry {bad}")));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(FaeError::Input("ragged rows".into()));
        }
        Matrix::from_vec(rows.len(), cols, rows.concat())
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

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vector {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    /// `self · x`
    pub fn matvec(&self, x: &Vector) -> Result<Vector> {
        if self.cols != x.dim() {
            return Err(FaeError::shape(
                "matvec",
                format!("{}x{}", self.rows, self.cols),
                format!("vector({})", x.dim()),
            ));
        }
        Ok(self
            .data
            .chunks_exact(self.cols.max(1))
            .take(self.rows)
            .map(|row| dot(row, &x.data))
            .collect())
    }

    /// `selfᵀ · x`
    pub fn matvec_t(&self, x: &Vector) -> Result<Vector> {
        if self.rows != x.dim() {
            return Err(FaeError::shape(
                "matvec_t",
                format!("{}x{}ᵀ", self.rows, self.cols),
                format!("vector({})", x.dim()),
            ));
        }
        let mut out = vec![0.0; self.cols];
        for (row, &s) in self.data.chunks_exact(self.cols.max(1)).zip(&x.data) {
            if s == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(row) {
                *o += s * w;
            }
        }
        Ok(Vector::from(out))
    }

    /// `self += a · bᵀ`
    pub fn add_outer(&mut self, a: &Vector, b: &Vector) -> Result<()> {
        if self.rows != a.dim() || self.cols != b.dim() {
            return Err(FaeError::shape(
                "add_outer",
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", a.dim(), b.dim()),
            ));
        }
        for (row, &s) in self.data.chunks_exact_mut(self.cols.max(1)).zip(&a.data) {
            if s == 0.0 {
                continue;
            }
            for (o, w) in row.iter_mut().zip(&b.data) {
                *o += s * w;
            }
        }
        Ok(())
    }

    pub fn scale_in_place(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|x| *x = value);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four partial sums let the compiler keep several FMAs in flight.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let k = 4 * i;
        acc[0] += a[k] * b[k];
        acc[1] += a[k + 1] * b[k + 1];
        acc[2] += a[k + 2] * b[k + 2];
        acc[3] += a[k + 3] * b[k + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for k in 4 * chunks..a.len() {
        s += a[k] * b[k];
    }
    s
}

fn check_same(op: &'static str, a: &Vector, b: &Vector) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(FaeError::shape(op, a.dim(), b.dim()));
    }
    Ok(())
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(FaeError::shape(
            "matmul",
            format!("{}x{}", a.rows, a.cols),
            format!("{}x{}", b.rows, b.cols),
        ));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for k in 0..a.cols {
            let s = a.data[i * a.cols + k];
            if s == 0.0 {
                continue;
            }
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, w) in orow.iter_mut().zip(brow) {
                *o += s * w;
            }
        }
    }
    Ok(out)
}

/// Max-shifted softmax.
pub fn softmax(v: &Vector) -> Result<Vector> {
    if v.dim() == 0 {
        return Err(FaeError::shape("softmax", "empty vector", "dim >= 1"));
    }
    let max = v.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.data.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// `log(softmax(v))`, computed without forming the probabilities.
pub fn log_softmax(v: &Vector) -> Result<Vector> {
    if v.dim() == 0 {
        return Err(FaeError::shape("log_softmax", "empty vector", "dim >= 1"));
    }
    let top = v.argmax().unwrap_or(0);
    let max = v.data[top];
    // The max term contributes exactly 1; summing the rest separately keeps
    // ln_1p accurate when one logit dominates.
    let rest: f64 = v
        .data
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != top)
        .map(|(_, x)| (x - max).exp())
        .sum();
    let lse = max + rest.ln_1p();
    Ok(v.data.iter().map(|x| x - lse).collect())
}

pub fn diag(v: &Vector) -> Matrix {
    let n = v.dim();
    let mut m = Matrix::zeros(n, n);
    for (i, &x) in v.data.iter().enumerate() {
        m.data[i * n + i] = x;
    }
    m
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn tanh_ew(v: &Vector) -> Vector {
    v.data.iter().map(|x| x.tanh()).collect()
}

pub fn sigmoid_ew(v: &Vector) -> Vector {
    v.data.iter().map(|&x| sigmoid(x)).collect()
}

pub fn hadamard(a: &Vector, b: &Vector) -> Result<Vector> {
    check_same("hadamard", a, b)?;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect())
}

pub fn add(a: &Vector, b: &Vector) -> Result<Vector> {
    check_same("add", a, b)?;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect())
}

pub fn concat(a: &Vector, b: &Vector) -> Vector {
    a.data.iter().chain(&b.data).copied().collect()
}

/// Seeded random source.
///
/// Backed by ChaCha8 (`rand_chacha`). Uniform doubles take the top 53 bits
/// of one `u64` draw; Gaussian draws use the cosine branch of Box–Muller on
/// two consecutive uniforms. The stream for a given seed is stable for a
/// given build; nothing promises equality with other languages.
#[derive(Clone, Debug)]
pub struct SeededRng {
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub const ALGORITHM: &'static str = "chacha8/u53-uniform/box-muller-cos";

    pub fn new(seed: u64) -> Self {
        SeededRng {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn gaussian(&mut self, mean: f64, std: f64) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        mean + std * z
    }

    pub fn draw_uniform(&mut self, lo: f64, hi: f64, n: usize) -> Vector {
        debug_assert!(lo < hi);
        (0..n).map(|_| self.uniform_range(lo, hi)).collect()
    }

    pub fn draw_gaussian(&mut self, mean: f64, std: f64, n: usize) -> Vector {
        debug_assert!(std >= 0.0);
        (0..n).map(|_| self.gaussian(mean, std)).collect()
    }

    /// Uniform integer in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }
}
