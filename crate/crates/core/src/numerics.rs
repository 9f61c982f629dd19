// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense linear algebra and the differentiable kernels the transformer and
//! sparse autoencoder are built from.
//!
//! Everything is generic over [`Real`] so the same code runs in `f32` for
//! experiments and in `f64` for finite-difference gradient checks. All
//! reductions accumulate sequentially in index order, so results do not
//! depend on thread count.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floating-point element type.
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64`.
    fn of(x: f64) -> Self;

    /// Widening conversion to `f64`.
    fn f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn f64(self) -> f64 {
        self
    }
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    /// Wraps `data`, checking `data.len() == rows * cols`.
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "buffer of {} values cannot be {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Dimension(format!(
                    "row {i} has {} values, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// A `1 x n` matrix.
    pub fn row_vector(values: Vec<T>) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values,
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Columns `start..end` as a new matrix.
    pub fn col_slice(&self, start: usize, end: usize) -> Self {
        let w = end - start;
        let mut out = Self::zeros(self.rows, w);
        for i in 0..self.rows {
            out.row_mut(i).copy_from_slice(&self.row(i)[start..end]);
        }
        out
    }

    /// Rows `start..end` as a new matrix.
    pub fn row_slice(&self, start: usize, end: usize) -> Self {
        Self {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same(other, "add")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Adds `row` to every row.
    pub fn add_row_broadcast(&mut self, row: &[T]) {
        debug_assert_eq!(row.len(), self.cols);
        for i in 0..self.rows {
            for (a, &b) in self.row_mut(i).iter_mut().zip(row) {
                *a += b;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|a| *a = v);
    }

    /// Sums rows into a single row.
    pub fn sum_rows(&self) -> Vec<T> {
        let mut out = vec![T::zero(); self.cols];
        for i in 0..self.rows {
            for (o, &x) in out.iter_mut().zip(self.row(i)) {
                *o += x;
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Errors with `NonFinite` if any entry is NaN or infinite.
    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub fn frobenius_sq(&self) -> T {
        self.data.iter().map(|&x| x * x).sum()
    }

    pub fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| U::of(x.f64())).collect(),
        }
    }

    fn check_same(&self, other: &Self, op: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension(format!(
                "{op}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Slice kernels
// ---------------------------------------------------------------------------

/// `out[m x n] = a[m x k] * b[k x n]`, overwriting `out`.
///
/// The innermost loop is an axpy over a row of `b`, so each output element
/// accumulates over `k` in order.
pub fn gemm<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        orow.iter_mut().for_each(|x| *x = T::zero());
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// `out[k x n] += a[m x k]^T * b[m x n]`, accumulating over `m` in order.
pub fn gemm_tn_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// `y[n] = x[k] * w[k x n]` for a single row.
#[inline]
pub fn vecmat<T: Real>(x: &[T], w: &[T], y: &mut [T]) {
    let n = y.len();
    debug_assert_eq!(w.len(), x.len() * n);
    y.iter_mut().for_each(|v| *v = T::zero());
    for (p, &xp) in x.iter().enumerate() {
        let wrow = &w[p * n..(p + 1) * n];
        for (o, &wv) in y.iter_mut().zip(wrow) {
            *o += xp * wv;
        }
    }
}

/// Sequential dot product.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// Dot product accumulated in `f64`.
#[inline]
pub fn dot_f64<T: Real>(a: &[T], b: &[T]) -> f64 {
    let mut s = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        s += x.f64() * y.f64();
    }
    s
}

/// `y += alpha * x`.
#[inline]
pub fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

pub fn norm<T: Real>(x: &[T]) -> T {
    dot(x, x).sqrt()
}

// ---------------------------------------------------------------------------
// Matrix operations
// ---------------------------------------------------------------------------

/// Matrix product `a * b`.
pub fn matmul<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return Err(Error::Dimension(format!(
            "matmul {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    gemm(&a.data, &b.data, &mut out.data, a.rows, a.cols, b.cols);
    Ok(out)
}

/// `a^T * b`.
pub fn matmul_tn<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.rows != b.rows {
        return Err(Error::Dimension(format!(
            "matmul_tn {:?}^T x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Matrix::zeros(a.cols, b.cols);
    gemm_tn_acc(&a.data, &b.data, &mut out.data, a.rows, a.cols, b.cols);
    Ok(out)
}

/// `a * b^T`.
pub fn matmul_nt<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.cols {
        return Err(Error::Dimension(format!(
            "matmul_nt {:?} x {:?}^T",
            a.shape(),
            b.shape()
        )));
    }
    matmul(a, &b.transpose())
}

/// Row-wise softmax of `scale * m`, with max subtraction. `-inf` entries map
/// to exactly zero.
pub fn softmax_rows<T: Real>(m: &Matrix<T>, scale: T) -> Matrix<T> {
    let mut out = m.clone();
    for i in 0..m.rows {
        softmax_in_place(out.row_mut(i), scale);
    }
    out
}

/// In-place softmax of `scale * row`.
pub fn softmax_in_place<T: Real>(row: &mut [T], scale: T) {
    let mut max = T::neg_infinity();
    for &x in row.iter() {
        let v = x * scale;
        if v > max {
            max = v;
        }
    }
    let mut sum = T::zero();
    for x in row.iter_mut() {
        let e = if *x == T::neg_infinity() {
            T::zero()
        } else {
            (*x * scale - max).exp()
        };
        *x = e;
        sum += e;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// Numerical floor inside the RMS normalizer.
pub const RMS_EPS: f64 = 1e-6;

/// RMS normalization of each row followed by an elementwise gain.
///
/// Returns `(y, xhat, inv_rms)` where `xhat` is the normalized input before
/// the gain; the latter two are what the backward pass needs.
pub fn rms_norm<T: Real>(x: &Matrix<T>, gain: &[T]) -> (Matrix<T>, Matrix<T>, Vec<T>) {
    let d = x.cols;
    let mut y = Matrix::zeros(x.rows, d);
    let mut xhat = Matrix::zeros(x.rows, d);
    let mut inv = Vec::with_capacity(x.rows);
    for i in 0..x.rows {
        let r = rms_norm_row(x.row(i), xhat.row_mut(i));
        for ((o, &h), &g) in y.row_mut(i).iter_mut().zip(xhat.row(i)).zip(gain) {
            *o = h * g;
        }
        inv.push(r);
    }
    (y, xhat, inv)
}

/// Writes the normalized row into `xhat` and returns `1/rms`.
#[inline]
pub fn rms_norm_row<T: Real>(x: &[T], xhat: &mut [T]) -> T {
    let d = T::of(x.len() as f64);
    let ms = dot(x, x) / d;
    let r = T::one() / (ms + T::of(RMS_EPS)).sqrt();
    for (o, &v) in xhat.iter_mut().zip(x) {
        *o = v * r;
    }
    r
}

/// Backward of [`rms_norm`]. Accumulates the gain gradient into `dgain`
/// and returns the input gradient.
pub fn rms_norm_backward<T: Real>(
    dy: &Matrix<T>,
    xhat: &Matrix<T>,
    inv_rms: &[T],
    gain: &[T],
    dgain: &mut [T],
) -> Matrix<T> {
    let d = dy.cols;
    let dn = T::of(d as f64);
    let mut dx = Matrix::zeros(dy.rows, d);
    let mut dxhat = vec![T::zero(); d];
    for i in 0..dy.rows {
        let dyr = dy.row(i);
        let xh = xhat.row(i);
        for j in 0..d {
            dgain[j] += dyr[j] * xh[j];
            dxhat[j] = dyr[j] * gain[j];
        }
        let m = dot(&dxhat, xh) / dn;
        let r = inv_rms[i];
        for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
            *o = r * (dxhat[j] - xh[j] * m);
        }
    }
    dx
}

/// GELU, tanh approximation.
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + T::of(0.044715) * x * x * x)).tanh())
}

/// Derivative of [`gelu`].
#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let a = T::of(0.044715);
    let half = T::of(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::of(3.0) * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

/// Mean next-token cross-entropy over rows that carry a target.
///
/// Returns `(loss, dlogits, n_targets)`; `dlogits` is the gradient of the
/// *sum* over targets (callers divide by the batch target count).
pub fn cross_entropy<T: Real>(
    logits: &Matrix<T>,
    targets: &[Option<usize>],
) -> Result<(T, Matrix<T>, usize)> {
    if targets.len() != logits.rows {
        return Err(Error::Dimension(format!(
            "{} targets for {} logit rows",
            targets.len(),
            logits.rows
        )));
    }
    let mut grad = Matrix::zeros(logits.rows, logits.cols);
    let mut total = T::zero();
    let mut n = 0usize;
    for (i, t) in targets.iter().enumerate() {
        let Some(t) = *t else { continue };
        if t >= logits.cols {
            return Err(Error::OutOfRange {
                what: "target",
                index: t,
                limit: logits.cols,
            });
        }
        let g = grad.row_mut(i);
        g.copy_from_slice(logits.row(i));
        softmax_in_place(g, T::one());
        total += -(g[t].max(T::min_positive_value())).ln();
        g[t] -= T::one();
        n += 1;
    }
    let loss = if n == 0 {
        T::zero()
    } else {
        total / T::of(n as f64)
    };
    Ok((loss, grad, n))
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Hyperparameters for [`AdamState`].
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for a list of parameter tensors.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    /// Allocates zero moments matching `shapes` (element counts).
    pub fn new(config: AdamConfig, sizes: &[usize]) -> Self {
        Self {
            config,
            step: 0,
            first: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            second: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    /// One Adam update with learning rate `lr` (overrides `config.lr`).
    pub fn update(&mut self, params: &mut [&mut [T]], grads: &[&[T]], lr: f64) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::Dimension(format!(
                "adam holds {} tensors, got {} params / {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let c = &self.config;
        let b1 = T::of(c.beta1);
        let b2 = T::of(c.beta2);
        let one = T::one();
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let step_size = T::of(lr * bc2.sqrt() / bc1);
        let eps = T::of(c.eps * bc2.sqrt());
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.len() != self.first[k].len() || g.len() != p.len() {
                return Err(Error::Dimension(format!("adam tensor {k} size changed")));
            }
            let m = &mut self.first[k];
            let v = &mut self.second[k];
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                p[i] -= step_size * m[i] / (v[i].sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm<T: Real>(grads: &mut [&mut [T]], max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.iter() {
        for &x in g.iter() {
            sq += x.f64() * x.f64();
        }
    }
    let n = sq.sqrt();
    if n > max_norm && n > 0.0 {
        let s = T::of(max_norm / n);
        for g in grads.iter_mut() {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn naive(a: &Matrix<f64>, b: &Matrix<f64>) -> Matrix<f64> {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for p in 0..a.cols() {
                    s += a.get(i, p) * b.get(p, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_hand_cases() {
        let a = Matrix::new(2, 2, vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let eye = Matrix::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(matmul(&a, &eye).unwrap(), a);
        let r = Matrix::new(1, 2, vec![1.0f64, 2.0]).unwrap();
        let c = Matrix::new(2, 1, vec![3.0, 4.0]).unwrap();
        assert_eq!(matmul(&r, &c).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(5, 7, &mut rng);
        let b = random(7, 3, &mut rng);
        let fast = matmul(&a, &b).unwrap();
        let slow = naive(&a, &b);
        for (x, y) in fast.data().iter().zip(slow.data()) {
            assert!((x - y).abs() <= 1e-6 * y.abs().max(1.0));
        }
        let tn = matmul_tn(&a.transpose(), &b).unwrap();
        let nt = matmul_nt(&a, &b.transpose()).unwrap();
        for ((x, y), z) in tn.data().iter().zip(nt.data()).zip(slow.data()) {
            assert!((x - z).abs() < 1e-12 && (y - z).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Matrix::<f32>::zeros(2, 3);
        assert!(matches!(matmul(&a, &a), Err(Error::Dimension(_))));
        assert!(Matrix::<f32>::new(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn softmax_cases() {
        let m = Matrix::new(1, 2, vec![0.0f64, 0.0]).unwrap();
        assert_eq!(softmax_rows(&m, 1.0).data(), &[0.5, 0.5]);
        let big = Matrix::new(1, 3, vec![1000.0f64; 3]).unwrap();
        for &p in softmax_rows(&big, 1.0).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let m = Matrix::new(1, 3, vec![1.0f64, 2.0, 3.0]).unwrap();
        let s = softmax_rows(&m, 1.0);
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|x| x.exp()).sum();
        for (i, &p) in s.data().iter().enumerate() {
            assert!((p - ((i + 1) as f64).exp() / z).abs() <= 1e-9);
        }
        let masked = Matrix::new(1, 3, vec![0.5f64, f64::NEG_INFINITY, 0.5]).unwrap();
        assert_eq!(softmax_rows(&masked, 2.0).data(), &[0.5, 0.0, 0.5]);
    }

    #[test]
    fn rms_norm_has_unit_rms_before_gain() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(6, 16, &mut rng);
        let gain = vec![2.0; 16];
        let (y, xhat, _) = rms_norm(&x, &gain);
        for i in 0..6 {
            let rms = (dot(xhat.row(i), xhat.row(i)) / 16.0).sqrt();
            assert!((rms - 1.0).abs() < 1e-5);
            assert!((y.get(i, 0) - 2.0 * xhat.get(i, 0)).abs() < 1e-15);
        }
    }

    #[test]
    fn gelu_derivative_at_zero_is_half() {
        assert_eq!(gelu(0.0f64), 0.0);
        assert!((gelu_grad(0.0f64) - 0.5).abs() < 1e-15);
        for &x in &[-3.0f64, -0.7, 0.2, 1.9] {
            let h = 1e-5;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn cross_entropy_uniform_is_ln_v() {
        let logits = Matrix::<f64>::zeros(3, 10);
        let (loss, grad, n) = cross_entropy(&logits, &[Some(1), None, Some(9)]).unwrap();
        assert_eq!(n, 2);
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        assert!(grad.row(1).iter().all(|&g| g == 0.0));
        assert!((grad.get(0, 1) + 0.9).abs() < 1e-12);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = vec![3.0f64, -2.0];
        let mut opt = AdamState::new(AdamConfig::default(), &[2]);
        for _ in 0..3000 {
            let g: Vec<f64> = p.iter().map(|x| 2.0 * x).collect();
            opt.update(&mut [&mut p], &[&g], 0.01).unwrap();
        }
        assert!(p.iter().all(|x| x.abs() < 1e-2), "{p:?}");
        assert_eq!(opt.step, 3000);
    }

    #[test]
    fn kernels_are_pure() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random(9, 13, &mut rng).cast::<f32>();
        let b = random(13, 4, &mut rng).cast::<f32>();
        let x = matmul(&a, &b).unwrap();
        let y = matmul(&a, &b).unwrap();
        assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}
