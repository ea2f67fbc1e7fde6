//! Dense `f32` kernels.
//!
//! Every reduction runs sequentially in index order, so identical inputs give
//! bit-identical outputs regardless of how many threads call into the crate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major `f32` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::EmptyInput);
        }
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
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

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub fn dot(a: &[f32], b: &[f32]) -> Result<f32> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(dot_unchecked(a, b))
}

#[inline]
pub(crate) fn dot_unchecked(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub fn l2_norm(a: &[f32]) -> f32 {
    dot_unchecked(a, a).sqrt()
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f32> {
    let ab = dot(a, b)?;
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNormVector);
    }
    let c = ab / (na * nb);
    if !c.is_finite() {
        return Err(Error::NonFinite("cosine_similarity"));
    }
    Ok(c.clamp(-1.0, 1.0))
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f32]) -> Result<Vec<f32>> {
    if logits.is_empty() {
        return Err(Error::EmptyInput);
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax input"));
    }
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

pub(crate) fn softmax_in_place(xs: &mut [f32]) {
    let max = xs.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::DimensionMismatch {
            expected: a.cols,
            got: b.rows,
        });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        vec_mat_into(a.row(i), b, out.row_mut(i));
    }
    if !out.is_finite() {
        return Err(Error::NonFinite("matmul"));
    }
    Ok(out)
}

/// `out = x · w` for a row vector `x`. The accumulation order over the inner
/// dimension is fixed (ascending), which is what makes whole passes
/// reproducible bit for bit.
pub(crate) fn vec_mat_into(x: &[f32], w: &Matrix, out: &mut [f32]) {
    debug_assert_eq!(x.len(), w.rows);
    debug_assert_eq!(out.len(), w.cols);
    out.fill(0.0);
    for (k, &xk) in x.iter().enumerate() {
        if xk == 0.0 {
            continue;
        }
        let row = w.row(k);
        for (o, &wk) in out.iter_mut().zip(row) {
            *o += xk * wk;
        }
    }
}

pub fn vec_mat(x: &[f32], w: &Matrix) -> Result<Vec<f32>> {
    if x.len() != w.rows {
        return Err(Error::DimensionMismatch {
            expected: w.rows,
            got: x.len(),
        });
    }
    let mut out = vec![0.0; w.cols];
    vec_mat_into(x, w, &mut out);
    Ok(out)
}

/// `x_i * gain_i / sqrt(mean(x^2) + eps)`.
pub fn rms_norm(x: &[f32], gain: &[f32], eps: f32) -> Result<Vec<f32>> {
    if x.len() != gain.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: gain.len(),
        });
    }
    if x.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut out = vec![0.0; x.len()];
    rms_norm_into(x, gain, eps, &mut out);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("rms_norm"));
    }
    Ok(out)
}

pub(crate) fn rms_norm_into(x: &[f32], gain: &[f32], eps: f32, out: &mut [f32]) {
    let mean_sq = dot_unchecked(x, x) / x.len() as f32;
    let denom = (mean_sq + eps).sqrt();
    for ((o, &xi), &g) in out.iter_mut().zip(x).zip(gain) {
        // x = 0 with eps = 0 would give 0/0; the zero vector maps to itself.
        *o = if xi == 0.0 { 0.0 } else { xi * g / denom };
    }
}
