//! Dense symmetric matrices, Cholesky factorization, and triangular solves.
//!
//! Joint covariances here stay below ~1200 rows, so dense cubic factorization
//! is the right tool. The factorization is the hot path of training (one per
//! objective evaluation), hence the manually unrolled dot products: a naive
//! summation cannot be vectorized under strict float semantics.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::CoreError;
use crate::fmath;

/// Row-major square matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    n: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(n: usize) -> Self {
        Self { n, data: vec![0.0; n * n] }
    }

    pub fn from_rows(n: usize, data: Vec<f64>) -> Result<Self, CoreError> {
        if data.len() != n * n {
            return Err(CoreError::DimensionMismatch { expected: n * n, got: data.len() });
        }
        Ok(Self { n, data })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline(always)]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    #[inline(always)]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    #[inline(always)]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] += v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn add_diagonal(&mut self, v: f64) {
        for i in 0..self.n {
            self.data[i * self.n + i] += v;
        }
    }

    pub fn mean_diagonal(&self) -> f64 {
        if self.n == 0 {
            return 0.0;
        }
        let mut s = 0.0;
        for i in 0..self.n {
            s += self.data[i * self.n + i];
        }
        s / self.n as f64
    }

    /// Largest absolute asymmetry `|A_ij - A_ji|`.
    pub fn max_asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.n {
            for j in 0..i {
                worst = worst.max(fmath::abs(self.get(i, j) - self.get(j, i)));
            }
        }
        worst
    }

    /// y = A x.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for i in 0..self.n {
            y[i] = dot(self.row(i), x);
        }
        y
    }

    /// In-place Cholesky: on success the lower triangle holds `L` with
    /// `A = L Lᵀ`; the strict upper triangle is left untouched. Fails on a
    /// non-positive pivot.
    pub fn cholesky_in_place(&mut self) -> Result<(), CoreError> {
        let n = self.n;
        for i in 0..n {
            let (head, tail) = self.data.split_at_mut(i * n);
            let row_i = &mut tail[..n];
            for j in 0..i {
                let row_j = &head[j * n..j * n + j + 1];
                let s = row_i[j] - dot(&row_i[..j], &row_j[..j]);
                row_i[j] = s / row_j[j];
            }
            let s = row_i[i] - dot(&row_i[..i], &row_i[..i]);
            if !(s > 0.0) || !s.is_finite() {
                return Err(CoreError::InvalidInput("matrix not positive definite"));
            }
            row_i[i] = fmath::sqrt(s);
        }
        Ok(())
    }

    /// Forward substitution `L y = b`, overwriting `b` with `y`. Uses the
    /// lower triangle only.
    pub fn solve_lower_in_place(&self, b: &mut [f64]) {
        debug_assert_eq!(b.len(), self.n);
        for i in 0..self.n {
            let row_i = &self.data[i * self.n..i * self.n + i + 1];
            let s = b[i] - dot(&row_i[..i], &b[..i]);
            b[i] = s / row_i[i];
        }
    }

    /// Back substitution `Lᵀ x = b`, overwriting `b` with `x`.
    pub fn solve_lower_transpose_in_place(&self, b: &mut [f64]) {
        let n = self.n;
        for i in (0..n).rev() {
            let mut s = b[i];
            for j in i + 1..n {
                s -= self.data[j * n + i] * b[j];
            }
            b[i] = s / self.data[i * n + i];
        }
    }

    /// `Σ ln L_ii` over the factor diagonal.
    pub fn diag_log_sum(&self) -> f64 {
        let mut s = 0.0;
        for i in 0..self.n {
            s += fmath::ln(self.data[i * self.n + i]);
        }
        s
    }
}

/// Dot product with eight accumulators so the loop vectorizes.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let chunks_a = a.chunks_exact(8);
    let chunks_b = b.chunks_exact(8);
    let rem_a = chunks_a.remainder();
    let rem_b = chunks_b.remainder();
    for (ca, cb) in chunks_a.zip(chunks_b) {
        for k in 0..8 {
            acc[k] = ca[k].mul_add(cb[k], acc[k]);
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (xa, xb) in rem_a.iter().zip(rem_b) {
        s += xa * xb;
    }
    s
}

/// A successful factorization along with the diagonal jitter it needed.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    pub l: DenseMatrix,
    pub jitter: f64,
}

/// Factor `a + jitter·I`, escalating the jitter by 10× from
/// `base_rel·mean(diag)` up to `cap_rel·mean(diag)` until the factorization
/// succeeds.
pub fn cholesky_with_jitter(
    a: &DenseMatrix,
    base_rel: f64,
    cap_rel: f64,
) -> Result<CholeskyFactor, CoreError> {
    let scale = a.mean_diagonal().abs().max(f64::MIN_POSITIVE);
    let cap = cap_rel * scale;
    let mut jitter = base_rel * scale;
    loop {
        let mut l = a.clone();
        l.add_diagonal(jitter);
        if l.cholesky_in_place().is_ok() {
            return Ok(CholeskyFactor { l, jitter });
        }
        jitter *= 10.0;
        if jitter > cap {
            return Err(CoreError::AssemblyDegenerate { jitter_cap: cap });
        }
    }
}
