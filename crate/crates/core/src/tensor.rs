//! Dense math kernel: row-major matrices, attention primitives, normalization,
//! rotary positions, and a seeded weight-init generator.
//!
//! Everything here is a pure function of its inputs. The forward path runs in
//! `f32`; the same kernels instantiate at `f64` for gradient checking.

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Scalar type of the kernels: `f32` in the forward path, `f64` for
/// finite-difference checks.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum<Self>
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    /// Convert a literal. Panics only on non-finite input, which never occurs
    /// for the constants used in this crate.
    fn lit(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("literal out of range")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Seed for deterministic weight init and synthetic data generation. The same
/// seed yields bit-identical streams on every platform.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngSeed(pub u64);

/// xorshift64* generator seeded through one round of splitmix64 so that nearby
/// seeds decorrelate. State is never zero.
#[derive(Debug, Clone)]
pub struct WeightRng {
    state: u64,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl WeightRng {
    pub fn new(seed: RngSeed) -> Self {
        let mut state = splitmix64(seed.0);
        if state == 0 {
            state = 0x9E37_79B9_7F4A_7C15;
        }
        WeightRng { state }
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.state;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        self.state = x;
        x.wrapping_mul(0x2545_F491_4F6C_DD1D)
    }

    /// Uniform in [0, 1) with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [-scale, scale).
    pub fn uniform<F: Scalar>(&mut self, scale: f64) -> F {
        F::lit((2.0 * self.next_f64() - 1.0) * scale)
    }

    /// Uniform integer in [0, bound) by rejection, bias-free.
    pub fn next_below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "next_below bound must be positive");
        let zone = u64::MAX - u64::MAX % bound;
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % bound;
            }
        }
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<F> {
    rows: usize,
    cols: usize,
    data: Vec<F>,
}

impl<F: Scalar> Matrix<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![F::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<F>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidArgument(format!(
                "matrix data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidArgument(
                "rows have unequal lengths".to_string(),
            ));
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = F::one();
        }
        m
    }

    /// Fill from the generator in row-major order, uniform in ±scale.
    pub fn random(rows: usize, cols: usize, scale: f64, rng: &mut WeightRng) -> Self {
        let data = (0..rows * cols).map(|_| rng.uniform(scale)).collect();
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[F] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [F] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> F {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: F) {
        self.data[i * self.cols + j] = v;
    }

    /// Standard matrix product. The inner loops run in ikj order so the right
    /// operand streams row-wise; this is the crate's single hot spot.
    pub fn matmul(&self, other: &Matrix<F>) -> Result<Matrix<F>> {
        if self.cols != other.rows {
            return Err(self.shape_err("matmul", other));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        let n = other.cols;
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = out.row_mut(i);
            for (k, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[k * n..(k + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self * other^T` without materializing the transpose.
    pub fn matmul_transpose_b(&self, other: &Matrix<F>) -> Result<Matrix<F>> {
        if self.cols != other.cols {
            return Err(self.shape_err("matmul_transpose_b", other));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            for (j, slot) in out.row_mut(i).iter_mut().enumerate() {
                let b_row = other.row(j);
                *slot = a_row.iter().zip(b_row).map(|(&a, &b)| a * b).sum();
            }
        }
        Ok(out)
    }

    /// `self^T * other` without materializing the transpose.
    pub fn matmul_transpose_a(&self, other: &Matrix<F>) -> Result<Matrix<F>> {
        if self.rows != other.rows {
            return Err(self.shape_err("matmul_transpose_a", other));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        let n = other.cols;
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (i, &a) in a_row.iter().enumerate() {
                let out_row = &mut out.data[i * n..(i + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix<F> {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn add(&self, other: &Matrix<F>) -> Result<Matrix<F>> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(self.shape_err("add", other));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn add_assign(&mut self, other: &Matrix<F>) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(self.shape_err("add_assign", other));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: F) -> Matrix<F> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| v * s).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Matrix<F> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Copy of the row range [start, end).
    pub fn row_range(&self, start: usize, end: usize) -> Matrix<F> {
        assert!(start <= end && end <= self.rows, "row range out of bounds");
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Copy of the column range [start, end).
    pub fn col_slice(&self, start: usize, end: usize) -> Matrix<F> {
        assert!(start <= end && end <= self.cols, "column range out of bounds");
        let w = end - start;
        let mut out = Matrix::zeros(self.rows, w);
        for i in 0..self.rows {
            out.row_mut(i).copy_from_slice(&self.row(i)[start..end]);
        }
        out
    }

    pub fn set_col_slice(&mut self, start: usize, src: &Matrix<F>) {
        assert_eq!(src.rows, self.rows, "row count mismatch");
        assert!(start + src.cols <= self.cols, "column range out of bounds");
        for i in 0..self.rows {
            self.row_mut(i)[start..start + src.cols].copy_from_slice(src.row(i));
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Convert between scalar precisions through f64.
    pub fn cast<G: Scalar>(&self) -> Matrix<G> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| G::lit(v.as_f64())).collect(),
        }
    }

    fn shape_err(&self, op: &'static str, other: &Matrix<F>) -> Error {
        Error::Shape {
            op,
            left_rows: self.rows,
            left_cols: self.cols,
            right_rows: other.rows,
            right_cols: other.cols,
        }
    }
}

/// Result of [`softmax_rows`]: probabilities plus the indices of rows whose
/// entries were all masked. Such rows come back all-zero; behind a causal mask
/// the list is always empty because the diagonal stays unmasked.
#[derive(Debug, Clone)]
pub struct SoftmaxRows<F> {
    pub probs: Matrix<F>,
    pub all_masked: Vec<usize>,
}

/// Row-wise softmax with an optional additive mask whose entries are 0 or
/// -inf. Stabilized by subtracting the row maximum over surviving entries.
pub fn softmax_rows<F: Scalar>(m: &Matrix<F>, mask: Option<&Matrix<F>>) -> Result<SoftmaxRows<F>> {
    if let Some(mask) = mask {
        if mask.rows() != m.rows() || mask.cols() != m.cols() {
            return Err(Error::Shape {
                op: "softmax_rows",
                left_rows: m.rows(),
                left_cols: m.cols(),
                right_rows: mask.rows(),
                right_cols: mask.cols(),
            });
        }
    }
    let mut probs = Matrix::zeros(m.rows(), m.cols());
    let mut all_masked = Vec::new();
    for i in 0..m.rows() {
        let row = m.row(i);
        let mask_row = mask.map(|mm| mm.row(i));
        let mut max = F::neg_infinity();
        for j in 0..row.len() {
            let v = row[j] + mask_row.map_or(F::zero(), |mr| mr[j]);
            if v > max {
                max = v;
            }
        }
        if max == F::neg_infinity() {
            all_masked.push(i);
            continue; // row stays all-zero
        }
        let out = probs.row_mut(i);
        let mut sum = F::zero();
        for j in 0..row.len() {
            let v = row[j] + mask_row.map_or(F::zero(), |mr| mr[j]);
            let e = if v == F::neg_infinity() {
                F::zero()
            } else {
                (v - max).exp()
            };
            out[j] = e;
            sum += e;
        }
        for e in out.iter_mut() {
            *e /= sum;
        }
    }
    Ok(SoftmaxRows { probs, all_masked })
}

/// RMS normalization: `x / sqrt(mean(x^2) + eps)`, elementwise times `gain`.
pub fn rms_norm<F: Scalar>(x: &[F], gain: &[F], eps: F) -> Vec<F> {
    assert_eq!(x.len(), gain.len(), "rms_norm: x and gain lengths differ");
    assert!(eps >= F::zero(), "rms_norm: eps must be non-negative");
    let n = F::lit(x.len() as f64);
    let mean_sq = x.iter().map(|&v| v * v).sum::<F>() / n;
    let inv = (mean_sq + eps).sqrt().recip();
    x.iter().zip(gain).map(|(&v, &g)| v * inv * g).collect()
}

/// Row-wise RMS normalization with a shared gain vector.
pub fn rms_norm_rows<F: Scalar>(m: &Matrix<F>, gain: &[F], eps: F) -> Matrix<F> {
    assert_eq!(m.cols(), gain.len(), "rms_norm_rows: gain length mismatch");
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for i in 0..m.rows() {
        out.row_mut(i).copy_from_slice(&rms_norm(m.row(i), gain, eps));
    }
    out
}

/// Rotary position encoding: rotate consecutive dimension pairs (2i, 2i+1) of
/// row t by angle `positions[t] * base^(-2i/d)`.
pub fn rope_apply<F: Scalar>(h: &Matrix<F>, positions: &[usize], base: f64) -> Result<Matrix<F>> {
    if !h.cols().is_multiple_of(2) {
        return Err(Error::Config(format!(
            "rotary dimension must be even, got {}",
            h.cols()
        )));
    }
    if positions.len() != h.rows() {
        return Err(Error::InvalidArgument(format!(
            "rope_apply: {} positions for {} rows",
            positions.len(),
            h.rows()
        )));
    }
    let d = h.cols();
    let mut out = Matrix::zeros(h.rows(), d);
    for (t, &pos) in positions.iter().enumerate() {
        let src = h.row(t);
        let dst = out.row_mut(t);
        for pair in 0..d / 2 {
            let freq = base.powf(-2.0 * pair as f64 / d as f64);
            let angle = F::lit(pos as f64 * freq);
            let (sin, cos) = angle.sin_cos();
            let x = src[2 * pair];
            let y = src[2 * pair + 1];
            dst[2 * pair] = x * cos - y * sin;
            dst[2 * pair + 1] = x * sin + y * cos;
        }
    }
    Ok(out)
}

/// GELU with the tanh approximation.
pub fn gelu<F: Scalar>(x: F) -> F {
    let c = F::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = F::lit(0.044_715);
    let half = F::lit(0.5);
    half * x * (F::one() + (c * (x + a * x * x * x)).tanh())
}

/// Derivative of [`gelu`].
pub fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = F::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = F::lit(0.044_715);
    let half = F::lit(0.5);
    let three = F::lit(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = F::one() - t * t;
    half * (F::one() + t) + half * x * sech2 * c * (F::one() + three * a * x * x)
}
