//! Numeric kernels shared by every other module.
//!
//! Everything is generic over [`Real`] so the main path can run in `f32`
//! while verification oracles re-run the same graph in `f64`.
//!
//! Sampling convention used throughout the crate: on a grid of `h × w`
//! cells, cell `(i, j)` has its center at continuous coordinate
//! `(y, x) = (i, j)`. Coordinates outside `[0, h-1] × [0, w-1]` clamp to
//! the border.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub trait Real:
    Float
    + FromPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
}

impl<T> Real for T where
    T: Float
        + FromPrimitive
        + Sum
        + AddAssign
        + SubAssign
        + MulAssign
        + DivAssign
        + Debug
        + Display
        + Default
        + Send
        + Sync
        + 'static
{
}

/// Converts an `f64` literal into `T`.
#[inline]
pub fn real<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("f64 is representable in every Real type")
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat<T = f32> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "Mat data length must equal rows*cols");
        Mat { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Mat::from_vec(rows.len(), cols, data)
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut T {
        &mut self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Rows `start..end` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        Mat::from_vec(end - start, self.cols, self.data[start * self.cols..end * self.cols].to_vec())
    }

    /// Columns `start..end` as a new matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Self {
        let mut out = Mat::zeros(self.rows, end - start);
        for r in 0..self.rows {
            out.row_mut(r).copy_from_slice(&self.row(r)[start..end]);
        }
        out
    }

    /// Writes `src` into columns `start..start + src.cols`, accumulating.
    pub fn add_cols_from(&mut self, start: usize, src: &Mat<T>) {
        assert_eq!(self.rows, src.rows);
        for r in 0..self.rows {
            let dst = &mut self.row_mut(r)[start..start + src.cols];
            for (d, s) in dst.iter_mut().zip(src.row(r)) {
                *d += *s;
            }
        }
    }

    /// `self · other`
    pub fn matmul(&self, other: &Mat<T>) -> Mat<T> {
        assert_eq!(self.cols, other.rows, "matmul inner dimension");
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == T::zero() {
                    continue;
                }
                let brow = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * *b;
                }
            }
        }
        out
    }

    /// `self · otherᵀ`
    pub fn matmul_nt(&self, other: &Mat<T>) -> Mat<T> {
        assert_eq!(self.cols, other.cols, "matmul_nt inner dimension");
        let mut out = Mat::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        out
    }

    /// `selfᵀ · other`
    pub fn matmul_tn(&self, other: &Mat<T>) -> Mat<T> {
        assert_eq!(self.rows, other.rows, "matmul_tn inner dimension");
        let mut out = Mat::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let arow = self.row(k);
            let brow = other.row(k);
            for (i, &a) in arow.iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * *b;
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Mat<T> {
        let mut out = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Mat<T>) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn scale(&mut self, s: T) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn add_row_vec(&mut self, v: &[T]) {
        assert_eq!(v.len(), self.cols);
        for r in 0..self.rows {
            for (a, b) in self.row_mut(r).iter_mut().zip(v) {
                *a += *b;
            }
        }
    }

    pub fn col_sums(&self) -> Vec<T> {
        let mut out = vec![T::zero(); self.cols];
        for r in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(r)) {
                *o += *v;
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Index of the first row holding a non-finite value.
    pub fn first_non_finite_row(&self) -> Option<usize> {
        (0..self.rows).find(|&r| self.row(r).iter().any(|v| !v.is_finite()))
    }

    pub fn cast<U: Real>(&self) -> Mat<U> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| real::<U>(v.to_f64().unwrap_or(f64::NAN))).collect(),
        }
    }
}

/// H×W grid of D-vectors, stored as an `(H·W) × D` token matrix in
/// row-major cell order.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T = f32> {
    pub h: usize,
    pub w: usize,
    pub tokens: Mat<T>,
}

impl<T: Real> Grid<T> {
    pub fn new(h: usize, w: usize, tokens: Mat<T>) -> Self {
        assert_eq!(tokens.rows, h * w, "grid token count must equal h*w");
        Grid { h, w, tokens }
    }

    pub fn zeros(h: usize, w: usize, d: usize) -> Self {
        Grid::new(h, w, Mat::zeros(h * w, d))
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.tokens.cols
    }

    #[inline]
    pub fn cells(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> &[T] {
        self.tokens.row(i * self.w + j)
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut [T] {
        let w = self.w;
        self.tokens.row_mut(i * w + j)
    }

    pub fn cast<U: Real>(&self) -> Grid<U> {
        Grid::new(self.h, self.w, self.tokens.cast())
    }
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (x, y)| acc + *x * *y)
}

#[inline]
pub fn norm<T: Real>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// Row-wise softmax of `scale · m`, with per-row max subtraction.
pub fn softmax_rows<T: Real>(m: &Mat<T>, scale: T) -> Result<Mat<T>> {
    if !(scale > T::zero()) || !scale.is_finite() {
        return Err(Error::InvalidArgument(format!("softmax scale must be positive and finite, got {scale}")));
    }
    if let Some(r) = m.first_non_finite_row() {
        return Err(Error::non_finite(format!("softmax input row {r}")));
    }
    let mut out = m.clone();
    for r in 0..out.rows {
        softmax_in_place(out.row_mut(r), scale);
    }
    Ok(out)
}

/// Softmax of `scale · row` in place; the row must be finite.
pub(crate) fn softmax_in_place<T: Real>(row: &mut [T], scale: T) {
    let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = ((*v - max) * scale).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Cosine similarity, clamped to `[-1, 1]`. A zero-norm argument yields 0.
pub fn cosine<T: Real>(a: &[T], b: &[T]) -> T {
    assert_eq!(a.len(), b.len(), "cosine operands must have equal length");
    let na = norm(a);
    let nb = norm(b);
    if na == T::zero() || nb == T::zero() {
        return T::zero();
    }
    let c = dot(a, b) / (na * nb);
    c.max(-T::one()).min(T::one())
}

/// Layer normalization of a single vector.
pub fn layer_norm<T: Real>(x: &[T], gain: &[T], bias: &[T], eps: T) -> Vec<T> {
    assert_eq!(x.len(), gain.len());
    assert_eq!(x.len(), bias.len());
    let n = real::<T>(x.len() as f64);
    let mean = x.iter().copied().sum::<T>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let rstd = T::one() / (var + eps).sqrt();
    x.iter()
        .zip(gain.iter().zip(bias))
        .map(|(&v, (&g, &b))| (v - mean) * rstd * g + b)
        .collect()
}

/// Four cell indices and bilinear weights for a sample at `(x, y)` on an
/// `h × w` grid. Weights are nonnegative and sum to one.
pub fn bilinear_weights<T: Real>(h: usize, w: usize, x: T, y: T) -> [(usize, T); 4] {
    let xmax = real::<T>((w - 1) as f64);
    let ymax = real::<T>((h - 1) as f64);
    let x = x.max(T::zero()).min(xmax);
    let y = y.max(T::zero()).min(ymax);
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let x0 = x0.to_usize().unwrap_or(0).min(w - 1);
    let y0 = y0.to_usize().unwrap_or(0).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let one = T::one();
    [
        (y0 * w + x0, (one - fy) * (one - fx)),
        (y0 * w + x1, (one - fy) * fx),
        (y1 * w + x0, fy * (one - fx)),
        (y1 * w + x1, fy * fx),
    ]
}

/// Bilinear sample of `grid` at continuous coordinate `(x, y)`, where `x`
/// runs along the width axis.
pub fn bilinear_sample<T: Real>(grid: &Grid<T>, x: T, y: T) -> Vec<T> {
    let mut out = vec![T::zero(); grid.dim()];
    for (cell, wgt) in bilinear_weights(grid.h, grid.w, x, y) {
        if wgt == T::zero() {
            continue;
        }
        for (o, v) in out.iter_mut().zip(grid.tokens.row(cell)) {
            *o += wgt * *v;
        }
    }
    out
}

/// Seeded, platform-independent random source (ChaCha8 stream cipher).
#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream `stream` derived from `seed`.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng { inner }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    /// Uniform in `[0, 1)`.
    pub fn unit(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    /// Uniform integer in `[lo, hi]`.
    pub fn int_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        self.inner.random_range(lo..=hi)
    }

    /// Uniform index in `[0, n)`.
    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.unit();
        let u2 = self.unit();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn shuffle<V>(&mut self, items: &mut [V]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }
}
