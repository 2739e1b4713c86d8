//! Dense linear algebra, activations, positional tables, a small transformer
//! block with a hand-written reverse pass, and finite-difference gradient
//! verification.
//!
//! Everything is double precision and allocation-light. The slice kernels
//! (`dot`, `axpy`) use a fixed accumulation order so results are bit-identical
//! between runs.

mod attention;
mod gradcheck;

use std::ops::Deref;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub(crate) use attention::{block_backward, block_forward};
pub use attention::{
    self_attention, transformer_block, BlockCache, BlockGrads, TransformerBlockParams,
    LAYER_NORM_EPS,
};
pub use gradcheck::{gradient_check, GradCheckReport};

/// A finite, non-empty vector of reals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct DenseVector(Vec<f64>);

impl DenseVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Argument("vector must be non-empty".into()));
        }
        check_finite("vector", &values)?;
        Ok(Self(values))
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub(crate) fn from_vec_unchecked(values: Vec<f64>) -> Self {
        debug_assert!(values.iter().all(|v| v.is_finite()));
        Self(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &DenseVector) -> Result<f64> {
        if self.len() != other.len() {
            return Err(Error::dim("dot", self.len(), other.len()));
        }
        Ok(dot(self, other))
    }

    pub fn norm(&self) -> f64 {
        dot(self, self).sqrt()
    }
}

impl Deref for DenseVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for DenseVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        DenseVector::new(values)
    }
}

impl From<DenseVector> for Vec<f64> {
    fn from(v: DenseVector) -> Self {
        v.0
    }
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Argument(format!(
                "matrix shape {rows}x{cols} must be positive"
            )));
        }
        if rows * cols != data.len() {
            return Err(Error::dim(
                "matrix construction",
                format!("{rows}x{cols}"),
                format!("{} values", data.len()),
            ));
        }
        check_finite("matrix", &data)?;
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Argument("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    /// Glorot-uniform initialization in ±sqrt(6 / (fan_in + fan_out)).
    pub fn glorot<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        Self { rows, cols, data }
    }

    pub(crate) fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(rows * cols, data.len());
        Self { rows, cols, data }
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

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// `W x` without shape checks; panics on mismatch in debug builds.
    pub(crate) fn matvec_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.cols)) {
            *o = dot(row, x);
        }
    }

    pub(crate) fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        self.matvec_into(x, &mut out);
        out
    }

    /// `out += W^T y`.
    pub(crate) fn matvec_t_acc(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (&yi, row) in y.iter().zip(self.data.chunks_exact(self.cols)) {
            if yi != 0.0 {
                axpy(yi, row, out);
            }
        }
    }

    /// `self += scale * y x^T`.
    pub(crate) fn add_outer(&mut self, scale: f64, y: &[f64], x: &[f64]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(x.len(), self.cols);
        let cols = self.cols;
        for (&yi, row) in y.iter().zip(self.data.chunks_exact_mut(cols)) {
            if yi != 0.0 {
                axpy(scale * yi, x, row);
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn check_finite(what: &str, values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::Numerical(format!(
            "{what} entry {i} is {}",
            values[i]
        ))),
        None => Ok(()),
    }
}

/// Dot product with four independent accumulators (fixed summation order).
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += alpha * x`.
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Affine map `W x (+ b)`.
pub fn linear_map(
    w: &DenseMatrix,
    x: &DenseVector,
    b: Option<&DenseVector>,
) -> Result<DenseVector> {
    if w.cols() != x.len() {
        return Err(Error::dim(
            "linear_map",
            format!("W {}x{}", w.rows(), w.cols()),
            format!("x of length {}", x.len()),
        ));
    }
    let mut y = w.matvec(x);
    if let Some(b) = b {
        if b.len() != w.rows() {
            return Err(Error::dim(
                "linear_map bias",
                format!("W {}x{}", w.rows(), w.cols()),
                format!("b of length {}", b.len()),
            ));
        }
        axpy(1.0, b, &mut y);
    }
    Ok(DenseVector::from_vec_unchecked(y))
}

/// Numerically stable softmax (max subtraction).
pub fn softmax(z: &DenseVector) -> Result<DenseVector> {
    let mut out = z.as_slice().to_vec();
    softmax_in_place(&mut out)?;
    Ok(DenseVector::from_vec_unchecked(out))
}

/// In-place softmax. Entries equal to `-inf` are treated as excluded and
/// receive probability exactly zero; at least one entry must be finite.
pub(crate) fn softmax_in_place(z: &mut [f64]) -> Result<()> {
    if z.is_empty() {
        return Err(Error::Argument("softmax of an empty vector".into()));
    }
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::Argument(
            "softmax needs at least one finite logit".into(),
        ));
    }
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = if *v == f64::NEG_INFINITY {
            0.0
        } else {
            (*v - max).exp()
        };
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
    Ok(())
}

/// Backward pass of softmax: given probabilities `p` and upstream `dp`,
/// returns `dz_i = p_i (dp_i - sum_k p_k dp_k)`.
pub(crate) fn softmax_backward(p: &[f64], dp: &[f64], dz: &mut [f64]) {
    let inner = dot(p, dp);
    for ((g, &pi), &dpi) in dz.iter_mut().zip(p).zip(dp) {
        *g = pi * (dpi - inner);
    }
}

pub fn relu(x: &DenseVector) -> DenseVector {
    DenseVector::from_vec_unchecked(x.iter().map(|&v| v.max(0.0)).collect())
}

/// Logistic sigmoid, evaluated without overflow for large |x|.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Standard sine/cosine positional table: row `p` holds
/// `sin(p / 10000^(2k/d))` at column `2k` and the matching cosine at `2k+1`.
pub fn sinusoidal_positions(n: usize, d: usize) -> Result<DenseMatrix> {
    if n == 0 {
        return Err(Error::Argument("positional table needs n >= 1".into()));
    }
    if d == 0 || d % 2 != 0 {
        return Err(Error::Argument(format!(
            "positional table width must be even and positive, got {d}"
        )));
    }
    let mut m = DenseMatrix::zeros(n, d);
    for pos in 0..n {
        let row = m.row_mut(pos);
        for k in 0..d / 2 {
            let freq = 10000f64.powf(-((2 * k) as f64) / d as f64);
            let angle = pos as f64 * freq;
            row[2 * k] = angle.sin();
            row[2 * k + 1] = angle.cos();
        }
    }
    Ok(m)
}
