//! ARD squared-exponential kernel and its mixed partial derivatives.
//!
//! The covariance blocks of the linearized models need entries of the form
//! `∂^m_x ∂^n_{x'} k(x, x')` for per-dimension orders up to `m + n = 8` (the
//! worst case: a fourth-derivative operator term applied on both arguments).
//! Because the kernel factorizes over dimensions, each factor is differentiated
//! in closed form: with `r = x_d − x'_d` and `a = w_d²/2`,
//!
//! ```text
//! (d/dr)^p e^{-a r²} = (-1)^p a^{p/2} H_p(√a·r) e^{-a r²}
//! ```
//!
//! with the physicists' Hermite polynomial `H_p`, and `∂_x = d/dr`,
//! `∂_{x'} = -d/dr`, so the (m, n) mixed partial of one factor is
//! `(-1)^m a^{(m+n)/2} H_{m+n}(√a·r) e^{-a r²}`.

use alloc::vec::Vec;

use crate::error::CoreError;
use crate::fmath;

/// Highest supported `m + n` per dimension.
pub const MAX_TOTAL_ORDER: usize = 8;

/// Hyperparameters of the ARD squared-exponential kernel
/// `k(x, x') = γ² ∏_d exp(-w_d² (x_d - x'_d)² / 2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ArdSeKernelParams {
    gamma: f64,
    weights: Vec<f64>,
}

impl ArdSeKernelParams {
    pub fn new(gamma: f64, weights: Vec<f64>) -> Result<Self, CoreError> {
        if !(gamma > 0.0) || !gamma.is_finite() {
            return Err(CoreError::InvalidParameter("gamma must be positive and finite"));
        }
        if weights.is_empty() {
            return Err(CoreError::InvalidParameter("weights must be non-empty"));
        }
        if weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err(CoreError::InvalidParameter("weights must be positive and finite"));
        }
        Ok(Self { gamma, weights })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }
}

/// Derivative orders applied to the two kernel arguments, per dimension.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DerivMultiIndexPair {
    left: Vec<usize>,
    right: Vec<usize>,
}

impl DerivMultiIndexPair {
    pub fn new(left: Vec<usize>, right: Vec<usize>) -> Result<Self, CoreError> {
        if left.len() != right.len() {
            return Err(CoreError::DimensionMismatch { expected: left.len(), got: right.len() });
        }
        for (m, n) in left.iter().zip(&right) {
            if m + n > MAX_TOTAL_ORDER {
                return Err(CoreError::UnsupportedOrder { order: m + n, max: MAX_TOTAL_ORDER });
            }
        }
        Ok(Self { left, right })
    }

    /// All orders zero in `dim` dimensions: the kernel itself.
    pub fn zero(dim: usize) -> Self {
        Self { left: alloc::vec![0; dim], right: alloc::vec![0; dim] }
    }

    /// The index with the roles of the two arguments exchanged.
    pub fn swapped(&self) -> Self {
        Self { left: self.right.clone(), right: self.left.clone() }
    }

    pub fn left(&self) -> &[usize] {
        &self.left
    }

    pub fn right(&self) -> &[usize] {
        &self.right
    }
}

/// Physicists' Hermite polynomial `H_p(z)` by the recurrence
/// `H_{p+1} = 2z H_p - 2p H_{p-1}`.
pub fn hermite(p: usize, z: f64) -> Result<f64, CoreError> {
    if p > MAX_TOTAL_ORDER {
        return Err(CoreError::UnsupportedOrder { order: p, max: MAX_TOTAL_ORDER });
    }
    Ok(hermite_rec(p, z))
}

fn hermite_rec(p: usize, z: f64) -> f64 {
    if p == 0 {
        return 1.0;
    }
    let mut prev = 1.0;
    let mut cur = 2.0 * z;
    for j in 1..p {
        let next = 2.0 * z * cur - 2.0 * (j as f64) * prev;
        prev = cur;
        cur = next;
    }
    cur
}

/// One dimension's derivative factor `(-1)^m a^{p/2} H_p(√a·r) e^{-a r²}`
/// without the exponential, as `t_p = a^{p/2} H_p(√a·r)`.
///
/// Runs the Hermite recurrence directly on the scaled values so no square
/// root is needed: `t_{p+1} = 2(a·r) t_p - 2p·a t_{p-1}`, `t_0 = 1`,
/// `t_1 = 2a·r`.
#[inline]
pub(crate) fn scaled_hermite(p: usize, a: f64, r: f64) -> f64 {
    if p == 0 {
        return 1.0;
    }
    let u = a * r;
    let mut prev = 1.0;
    let mut cur = 2.0 * u;
    for j in 1..p {
        let next = 2.0 * u * cur - 2.0 * (j as f64) * a * prev;
        prev = cur;
        cur = next;
    }
    cur
}

/// Kernel value `γ² ∏_d exp(-w_d² (x_d - x'_d)² / 2)`.
pub fn se_eval(x: &[f64], x_prime: &[f64], params: &ArdSeKernelParams) -> Result<f64, CoreError> {
    check_dims(x, x_prime, params)?;
    let mut s = 0.0;
    for d in 0..params.dim() {
        let r = x[d] - x_prime[d];
        s += 0.5 * params.weights[d] * params.weights[d] * r * r;
    }
    Ok(params.gamma * params.gamma * fmath::exp(-s))
}

/// Mixed partial derivative `∂^m_x ∂^n_{x'} k(x, x')` for per-dimension
/// orders given by `idx`.
pub fn se_partial(
    idx: &DerivMultiIndexPair,
    x: &[f64],
    x_prime: &[f64],
    params: &ArdSeKernelParams,
) -> Result<f64, CoreError> {
    check_dims(x, x_prime, params)?;
    if idx.left.len() != params.dim() {
        return Err(CoreError::DimensionMismatch { expected: params.dim(), got: idx.left.len() });
    }
    let mut poly = 1.0;
    let mut expo = 0.0;
    for d in 0..params.dim() {
        let a = 0.5 * params.weights[d] * params.weights[d];
        let r = x[d] - x_prime[d];
        let (m, n) = (idx.left[d], idx.right[d]);
        let sign = if m % 2 == 1 { -1.0 } else { 1.0 };
        poly *= sign * scaled_hermite(m + n, a, r);
        expo += a * r * r;
    }
    Ok(params.gamma * params.gamma * poly * fmath::exp(-expo))
}

fn check_dims(x: &[f64], x_prime: &[f64], params: &ArdSeKernelParams) -> Result<(), CoreError> {
    if x.len() != params.dim() {
        return Err(CoreError::DimensionMismatch { expected: params.dim(), got: x.len() });
    }
    if x_prime.len() != params.dim() {
        return Err(CoreError::DimensionMismatch { expected: params.dim(), got: x_prime.len() });
    }
    Ok(())
}
