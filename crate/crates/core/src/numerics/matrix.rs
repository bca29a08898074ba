//! Dense row-major matrices over `f64`.
//!
//! This is deliberately minimal: the rest of the crate needs matrix products,
//! transposes, elementwise maps, and a bias broadcast, nothing more. Vectors
//! are single-column matrices. There is no general broadcasting; shape rules
//! stay auditable.

use crate::{Error, Result};

/// Dense row-major matrix of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Build from a row-major data vector. Panics if the length is wrong.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "data length {} does not match {}x{}",
            data.len(),
            rows,
            cols
        );
        Matrix { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Column vector (n x 1).
    pub fn col_vec(v: &[f64]) -> Self {
        Matrix {
            rows: v.len(),
            cols: 1,
            data: v.to_vec(),
        }
    }

    /// Row vector (1 x n).
    pub fn row_vec(v: &[f64]) -> Self {
        Matrix {
            rows: 1,
            cols: v.len(),
            data: v.to_vec(),
        }
    }

    /// 1x1 scalar.
    pub fn scalar(v: f64) -> Self {
        Matrix {
            rows: 1,
            cols: 1,
            data: vec![v],
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
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Copy of column `j`.
    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        transpose_into(self, &mut out);
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(
            self.cols, other.rows,
            "matmul {}x{} * {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let mut out = Matrix::zeros(self.rows, other.cols);
        matmul_into(self, other, &mut out);
        out
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.shape(), other.shape(), "add shape mismatch");
        let mut out = Matrix::zeros(self.rows, self.cols);
        add_into(self, other, &mut out);
        out
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.shape(), other.shape(), "sub shape mismatch");
        let mut out = Matrix::zeros(self.rows, self.cols);
        sub_into(self, other, &mut out);
        out
    }

    pub fn scale(&self, s: f64) -> Matrix {
        let mut out = Matrix::zeros(self.rows, self.cols);
        scale_into(self, s, &mut out);
        out
    }

    pub fn hadamard(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.shape(), other.shape(), "hadamard shape mismatch");
        let mut out = Matrix::zeros(self.rows, self.cols);
        hadamard_into(self, other, &mut out);
        out
    }

    /// Largest absolute entry (max norm). Zero for empty matrices.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest absolute entrywise difference.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Error out if any entry is NaN or infinite.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::Shape(format!("{what} contains non-finite entries")))
        }
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

// In-place kernels. The tape writes into preallocated node buffers through
// these, so repeated forward passes do not allocate.

pub(crate) fn matmul_into(a: &Matrix, b: &Matrix, out: &mut Matrix) {
    debug_assert_eq!(a.cols, b.rows);
    debug_assert_eq!(out.rows, a.rows);
    debug_assert_eq!(out.cols, b.cols);
    out.data.fill(0.0);
    let bc = b.cols;
    for (arow, orow) in a
        .data
        .chunks_exact(a.cols.max(1))
        .zip(out.data.chunks_exact_mut(bc.max(1)))
    {
        for (k, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = &b.data[k * bc..(k + 1) * bc];
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    }
}

/// out += s * (a b^T); both operands indexed by rows, so the inner loop is a
/// dot product of two contiguous rows.
pub(crate) fn matmul_abt_acc(a: &Matrix, b: &Matrix, s: f64, out: &mut Matrix) {
    debug_assert_eq!(a.cols, b.cols);
    debug_assert_eq!(out.rows, a.rows);
    debug_assert_eq!(out.cols, b.rows);
    let inner = a.cols.max(1);
    for (arow, orow) in a
        .data
        .chunks_exact(inner)
        .zip(out.data.chunks_exact_mut(b.rows.max(1)))
    {
        for (brow, o) in b.data.chunks_exact(inner).zip(orow.iter_mut()) {
            let mut dot = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                dot += x * y;
            }
            *o += s * dot;
        }
    }
}

/// out += s * (a^T b)
pub(crate) fn matmul_atb_acc(a: &Matrix, b: &Matrix, s: f64, out: &mut Matrix) {
    debug_assert_eq!(a.rows, b.rows);
    debug_assert_eq!(out.rows, a.cols);
    debug_assert_eq!(out.cols, b.cols);
    let bc = b.cols.max(1);
    for (arow, brow) in a
        .data
        .chunks_exact(a.cols.max(1))
        .zip(b.data.chunks_exact(bc))
    {
        for (k, &aik) in arow.iter().enumerate() {
            let f = s * aik;
            if f == 0.0 {
                continue;
            }
            let orow = &mut out.data[k * bc..(k + 1) * bc];
            for (o, &bij) in orow.iter_mut().zip(brow) {
                *o += f * bij;
            }
        }
    }
}

pub(crate) fn transpose_into(a: &Matrix, out: &mut Matrix) {
    debug_assert_eq!(out.rows, a.cols);
    debug_assert_eq!(out.cols, a.rows);
    for i in 0..a.rows {
        for j in 0..a.cols {
            out.data[j * a.rows + i] = a.data[i * a.cols + j];
        }
    }
}

pub(crate) fn add_into(a: &Matrix, b: &Matrix, out: &mut Matrix) {
    for ((o, x), y) in out.data.iter_mut().zip(&a.data).zip(&b.data) {
        *o = x + y;
    }
}

pub(crate) fn sub_into(a: &Matrix, b: &Matrix, out: &mut Matrix) {
    for ((o, x), y) in out.data.iter_mut().zip(&a.data).zip(&b.data) {
        *o = x - y;
    }
}

pub(crate) fn scale_into(a: &Matrix, s: f64, out: &mut Matrix) {
    for (o, x) in out.data.iter_mut().zip(&a.data) {
        *o = s * x;
    }
}

pub(crate) fn hadamard_into(a: &Matrix, b: &Matrix, out: &mut Matrix) {
    for ((o, x), y) in out.data.iter_mut().zip(&a.data).zip(&b.data) {
        *o = x * y;
    }
}

/// out = a + bias broadcast over columns; bias is rows x 1.
pub(crate) fn add_bias_into(a: &Matrix, bias: &Matrix, out: &mut Matrix) {
    debug_assert_eq!(bias.cols, 1);
    debug_assert_eq!(bias.rows, a.rows);
    for (i, (orow, arow)) in out
        .data
        .chunks_exact_mut(a.cols.max(1))
        .zip(a.data.chunks_exact(a.cols.max(1)))
        .enumerate()
    {
        let b = bias.data[i];
        for (o, x) in orow.iter_mut().zip(arow) {
            *o = x + b;
        }
    }
}

/// out(0, j) = sum_i a(i, j)
pub(crate) fn col_sum_into(a: &Matrix, out: &mut Matrix) {
    debug_assert_eq!(out.rows, 1);
    debug_assert_eq!(out.cols, a.cols);
    out.data.fill(0.0);
    for arow in a.data.chunks_exact(a.cols.max(1)) {
        for (o, x) in out.data.iter_mut().zip(arow) {
            *o += x;
        }
    }
}

pub(crate) fn sum_all_into(a: &Matrix, out: &mut Matrix) {
    debug_assert_eq!(out.shape(), (1, 1));
    out.data[0] = a.data.iter().sum();
}

pub(crate) fn row_slice_into(a: &Matrix, start: usize, len: usize, out: &mut Matrix) {
    debug_assert_eq!(out.rows, len);
    debug_assert_eq!(out.cols, a.cols);
    let c = a.cols;
    out.data.copy_from_slice(&a.data[start * c..(start + len) * c]);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let a = Matrix::identity(3);
        let x = Matrix::col_vec(&[1.0, 2.0, 3.0]);
        assert_eq!(a.matmul(&x).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn matmul_known_product() {
        let a = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Matrix::from_vec(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = a.matmul(&b);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn transpose_round_trip() {
        let a = Matrix::from_fn(4, 7, |i, j| (i * 7 + j) as f64);
        assert_eq!(a.transpose().transpose(), a);
    }

    #[test]
    fn bias_broadcast_over_columns() {
        let a = Matrix::from_vec(2, 3, vec![0.0; 6]);
        let b = Matrix::col_vec(&[1.0, -2.0]);
        let mut out = Matrix::zeros(2, 3);
        add_bias_into(&a, &b, &mut out);
        assert_eq!(out.data(), &[1.0, 1.0, 1.0, -2.0, -2.0, -2.0]);
    }

    #[test]
    fn matmul_associativity_random_16x16() {
        // fixed LCG so the test is self-contained and deterministic
        let mut state = 0x2545f4914f6cdd1du64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        for _ in 0..5 {
            let a = Matrix::from_fn(16, 16, |_, _| next());
            let b = Matrix::from_fn(16, 16, |_, _| next());
            let c = Matrix::from_fn(16, 16, |_, _| next());
            let left = a.matmul(&b).matmul(&c);
            let right = a.matmul(&b.matmul(&c));
            let scale = left.max_abs().max(1.0);
            assert!(left.max_abs_diff(&right) / scale < 1e-12);
        }
    }
}
