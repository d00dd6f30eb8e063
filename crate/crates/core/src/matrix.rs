//! Dense row-major matrices.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use std::cell::Cell;
use std::fmt;

thread_local! {
    static MULTIPLIES: Cell<u64> = const { Cell::new(0) };
}

/// Instrumented multiply counter for the matrix-product kernel.
///
/// Every call to [`Matrix::matmul`] (and the product kernels built on it)
/// adds the number of scalar multiplications it performed to a thread-local
/// tally. Elementwise operations are not counted.
pub mod mult_counter {
    use super::MULTIPLIES;

    pub fn reset() {
        MULTIPLIES.with(|c| c.set(0));
    }

    pub fn get() -> u64 {
        MULTIPLIES.with(|c| c.get())
    }

    /// Runs `f` and returns its result with the multiplies it performed.
    pub fn measure<R>(f: impl FnOnce() -> R) -> (R, u64) {
        let before = get();
        let out = f();
        (out, get() - before)
    }
}

#[inline]
fn record_multiplies(n: usize) {
    MULTIPLIES.with(|c| c.set(c.get() + n as u64));
}

/// `c[m×n] += a[m×k] · b[k×n]`, all row-major.
///
/// Each output entry accumulates over `k` in increasing order, so the result
/// of a row does not depend on how many other rows share the call.
pub(crate) fn gemm_acc<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    record_multiplies(m * k * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (c_ij, &b_pj) in c_row.iter_mut().zip(b_row) {
                *c_ij += a_ip * b_pj;
            }
        }
    }
}

#[derive(Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    /// Builds a matrix from row-major data, rejecting non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(
                "Matrix::new",
                format!("{} values for {rows}x{cols}", data.len()),
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: i / cols.max(1),
                col: i % cols.max(1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Internal constructor for values produced by our own arithmetic.
    pub(crate) fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
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

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn scalar(value: T) -> Self {
        Self::filled(1, 1, value)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Convenience constructor from `f64` rows (tests and examples).
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(n_rows * n_cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != n_cols {
                return Err(Error::dim(
                    "Matrix::from_rows",
                    format!("row {i} has {} entries, expected {n_cols}", r.len()),
                ));
            }
            data.extend(r.iter().map(|&v| T::lit(v)));
        }
        Self::new(n_rows, n_cols, data)
    }

    /// Single-row matrix.
    pub fn row_vector(values: Vec<T>) -> Self {
        let n = values.len();
        Self::from_vec_unchecked(1, n, values)
    }

    pub fn rand_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Self {
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        Self::from_fn(rows, cols, |_, _| T::lit(dist.sample(rng)))
    }

    pub fn rand_normal<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).expect("valid std");
        Self::from_fn(rows, cols, |_, _| T::lit(dist.sample(rng)))
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
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        let cols = self.cols;
        &mut self.data[r * cols..(r + 1) * cols]
    }

    /// Same data, new shape.
    pub fn reshaped(mut self, rows: usize, cols: usize) -> Result<Self> {
        if rows * cols != self.data.len() {
            return Err(Error::dim(
                "Matrix::reshaped",
                format!("{}x{} into {rows}x{cols}", self.rows, self.cols),
            ));
        }
        self.rows = rows;
        self.cols = cols;
        Ok(self)
    }

    pub fn transpose(&self) -> Self {
        let mut out = Vec::with_capacity(self.data.len());
        for c in 0..self.cols {
            for r in 0..self.rows {
                out.push(self.data[r * self.cols + c]);
            }
        }
        Self::from_vec_unchecked(self.cols, self.rows, out)
    }

    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        if self.cols != rhs.rows {
            return Err(Error::dim(
                "matmul",
                format!("{}x{} · {}x{}", self.rows, self.cols, rhs.rows, rhs.cols),
            ));
        }
        let mut out = Self::zeros(self.rows, rhs.cols);
        gemm_acc(
            self.rows,
            self.cols,
            rhs.cols,
            &self.data,
            &rhs.data,
            &mut out.data,
        );
        Ok(out)
    }

    fn check_same(&self, rhs: &Self, op: &'static str) -> Result<()> {
        if self.shape() != rhs.shape() {
            return Err(Error::dim(
                op,
                format!("{}x{} vs {}x{}", self.rows, self.cols, rhs.rows, rhs.cols),
            ));
        }
        Ok(())
    }

    pub fn add(&self, rhs: &Self) -> Result<Self> {
        self.zip_map(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Self) -> Result<Self> {
        self.zip_map(rhs, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, rhs: &Self) -> Result<Self> {
        self.zip_map(rhs, "hadamard", |a, b| a * b)
    }

    pub fn zip_map(&self, rhs: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.check_same(rhs, op)?;
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Self::from_vec_unchecked(self.rows, self.cols, data))
    }

    pub fn add_assign(&mut self, rhs: &Self) -> Result<()> {
        self.check_same(rhs, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_vec_unchecked(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    /// Adds a `1×cols` row to every row.
    pub fn add_row_broadcast(&self, row: &Self) -> Result<Self> {
        if row.rows != 1 || row.cols != self.cols {
            return Err(Error::dim(
                "add_row_broadcast",
                format!("{}x{} + {}x{}", self.rows, self.cols, row.rows, row.cols),
            ));
        }
        let mut out = self.clone();
        for r in 0..self.rows {
            for (a, &b) in out.row_mut(r).iter_mut().zip(&row.data) {
                *a += b;
            }
        }
        Ok(out)
    }

    /// Column sums as a `1×cols` row.
    pub fn sum_rows(&self) -> Self {
        let mut out = vec![T::zero(); self.cols];
        for r in 0..self.rows {
            for (o, &v) in out.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        Self::from_vec_unchecked(1, self.cols, out)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `max|self − other| / max(max|other|, tiny)`.
    pub fn max_rel_diff(&self, other: &Self) -> Result<T> {
        self.check_same(other, "max_rel_diff")?;
        let diff = self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()));
        let scale = other.max_abs().max(T::min_positive_value());
        Ok(diff / scale)
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64_lossy()).unwrap_or_else(U::nan))
                .collect(),
        }
    }

    /// Copies the sub-block `[r0, r0+rows) × [c0, c0+cols)`.
    pub fn block(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Result<Self> {
        if r0 + rows > self.rows || c0 + cols > self.cols {
            return Err(Error::dim(
                "block",
                format!(
                    "[{r0}+{rows}, {c0}+{cols}] out of {}x{}",
                    self.rows, self.cols
                ),
            ));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in r0..r0 + rows {
            data.extend_from_slice(&self.row(r)[c0..c0 + cols]);
        }
        Ok(Self::from_vec_unchecked(rows, cols, data))
    }
}

impl<T: Scalar> fmt::Debug for Matrix<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix<{}>[{}x{}]", T::NAME, self.rows, self.cols)?;
        let show_rows = self.rows.min(8);
        for r in 0..show_rows {
            let row = self.row(r);
            let shown: Vec<String> = row.iter().take(8).map(|v| format!("{v:.4}")).collect();
            let tail = if self.cols > 8 { ", …" } else { "" };
            writeln!(f, "  [{}{}]", shown.join(", "), tail)?;
        }
        if self.rows > show_rows {
            writeln!(f, "  …")?;
        }
        Ok(())
    }
}
