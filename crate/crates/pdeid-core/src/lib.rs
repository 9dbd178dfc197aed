//! Parameter identification for nonlinear time-dependent PDEs from two noisy
//! field snapshots.
//!
//! The central idea: discretize the PDE in time with backward Euler and freeze
//! the nonlinear coefficients at the observed previous snapshot, so the step
//! becomes a *linear* operator equation
//!
//! ```text
//! L_x^λ h^n(x) = h^{n-1}(x),
//! ```
//!
//! then place a Gaussian-process prior on the current field `h^n`. Because
//! linear operators map GPs to GPs, the joint distribution of both snapshots
//! is again a GP whose covariance blocks
//!
//! ```text
//! [ k         L_{x'} k      ]
//! [ L_x k     L_x L_{x'} k  ]  + σ² I
//! ```
//!
//! carry the PDE coefficients λ as kernel hyperparameters. Maximizing the
//! marginal likelihood of the observed values therefore identifies the PDE
//! alongside the usual kernel hyperparameters.
//!
//! Modules, bottom-up:
//!
//! - [`kernel`]: ARD squared-exponential kernel and closed-form mixed partial
//!   derivatives up to total order 8 per dimension.
//! - [`spectral`]: covariances for fractional-order operators, built by
//!   multiplying the kernel's spectral density with the operator's Fourier
//!   symbol and integrating with Gauss–Hermite quadrature.
//! - [`operator`]: the linearized backward-Euler operator as a sum of
//!   (coefficient, derivative multi-index) terms.
//! - [`linalg`]: dense symmetric storage, Cholesky factorization, and
//!   triangular solves.
//! - [`assembly`]: joint covariance matrices for each supported PDE family,
//!   including the multi-output Schrödinger system, the divergence-free
//!   stream-function prior with a latent pressure for Navier–Stokes, and the
//!   spectral fractional blocks.
//! - [`inference`]: negative log marginal likelihood, finite-difference
//!   gradients, L-BFGS with a strong-Wolfe line search, and multi-restart
//!   training.
//!
//! Everything here is `no_std + alloc`; host-side concerns (data generation,
//! file formats, the CLI) live in the companion crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod assembly;
pub mod error;
mod fmath;
pub mod inference;
pub mod kernel;
pub mod linalg;
pub mod operator;
pub mod spectral;

pub use error::CoreError;
