//! Negative log marginal likelihood scoring and parameter learning.
//!
//! All parameters live in one unconstrained vector: positives (γ, w, σ²) via
//! log, PDE coefficients λ untransformed, fractional orders through a scaled
//! sigmoid. The objective assembles the joint covariance for the candidate,
//! factorizes it, and scores
//!
//! ```text
//! nlml = ½ hᵀK⁻¹h + ½ log|K| + (N/2) log 2π
//! ```
//!
//! Gradients are central finite differences in the unconstrained space;
//! training runs a memory-10 L-BFGS with a strong-Wolfe line search from
//! several randomized starts and keeps the best final objective.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::assembly::{
    assemble_fractional, assemble_nls, assemble_ns, assemble_scalar,
    stacked_observations, JointCovariance, SnapshotPair,
};
use crate::error::CoreError;
use crate::fmath;
use crate::kernel::ArdSeKernelParams;
use crate::linalg::dot;
use crate::operator::{ModelFamily, ModelSpec};
use crate::spectral::QuadratureRule;

/// Map between one unconstrained entry and its decoded parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Transform {
    /// decoded = exp(entry); for γ, w, σ².
    LogPositive,
    /// decoded = entry; for PDE coefficients λ.
    Identity,
    /// decoded = lo + (hi-lo)·sigmoid(entry); for fractional orders.
    BoundedSigmoid { lo: f64, hi: f64 },
}

impl Transform {
    pub fn decode(&self, e: f64) -> f64 {
        match self {
            Transform::LogPositive => fmath::exp(e),
            Transform::Identity => e,
            Transform::BoundedSigmoid { lo, hi } => {
                lo + (hi - lo) / (1.0 + fmath::exp(-e))
            }
        }
    }

    pub fn encode(&self, d: f64) -> Result<f64, CoreError> {
        match self {
            Transform::LogPositive => {
                if !(d > 0.0) {
                    return Err(CoreError::InvalidParameter("value must be positive"));
                }
                Ok(fmath::ln(d))
            }
            Transform::Identity => Ok(d),
            Transform::BoundedSigmoid { lo, hi } => {
                if !(d > *lo && d < *hi) {
                    return Err(CoreError::InvalidParameter("value outside sigmoid bounds"));
                }
                let t = (d - lo) / (hi - lo);
                Ok(fmath::ln(t / (1.0 - t)))
            }
        }
    }
}

/// How an entry is initialized at the start of a restart.
#[derive(Debug, Clone, Copy, PartialEq)]
enum InitHint {
    /// Signal amplitude: log of the data standard deviation, jittered.
    Amplitude,
    /// Inverse length scale of one input dimension: log(2 / range), jittered.
    Width(usize),
    /// Noise variance: log of 1e-4 × data variance, jittered.
    Noise,
    /// Deterministic value in decoded units (λ and fractional orders).
    Fixed(f64),
}

#[derive(Debug, Clone)]
struct ParamEntry {
    name: &'static str,
    transform: Transform,
    hint: InitHint,
}

/// Parameter layout of one model family: entry order, transforms, and how the
/// entries map onto kernels, λ, and σ².
#[derive(Debug, Clone)]
pub struct ParamLayout {
    family: ModelFamily,
    entries: Vec<ParamEntry>,
    // (gamma entry, width entries) per kernel
    kernels: Vec<(usize, Vec<usize>)>,
    lambda_range: (usize, usize),
    sigma2_idx: usize,
}

const RL_ORDER_BOUNDS: (f64, f64) = (0.0, 2.5);
// the Laplacian symbol is only valid up to order 2, so its sigmoid is
// tighter than the generic fractional bound
const LAPLACIAN_ORDER_BOUNDS: (f64, f64) = (0.0, 2.0);

impl ParamLayout {
    pub fn for_family(family: ModelFamily) -> Self {
        let log = Transform::LogPositive;
        let id = Transform::Identity;
        let lam = |v: f64| InitHint::Fixed(v);
        let mut entries = Vec::new();
        let mut kernels = Vec::new();
        match family {
            ModelFamily::Burgers | ModelFamily::Kdv | ModelFamily::Ks => {
                entries.push(ParamEntry { name: "gamma", transform: log, hint: InitHint::Amplitude });
                entries.push(ParamEntry { name: "w1", transform: log, hint: InitHint::Width(0) });
                kernels.push((0, vec![1]));
                for name in ["lambda1", "lambda2", "lambda3"]
                    .into_iter()
                    .take(family.lambda_len())
                {
                    entries.push(ParamEntry { name, transform: id, hint: lam(0.0) });
                }
            }
            ModelFamily::Nls => {
                entries.push(ParamEntry { name: "gamma_u", transform: log, hint: InitHint::Amplitude });
                entries.push(ParamEntry { name: "w_u", transform: log, hint: InitHint::Width(0) });
                entries.push(ParamEntry { name: "gamma_v", transform: log, hint: InitHint::Amplitude });
                entries.push(ParamEntry { name: "w_v", transform: log, hint: InitHint::Width(0) });
                kernels.push((0, vec![1]));
                kernels.push((2, vec![3]));
                entries.push(ParamEntry { name: "lambda1", transform: id, hint: lam(0.0) });
                entries.push(ParamEntry { name: "lambda2", transform: id, hint: lam(0.0) });
            }
            ModelFamily::Ns2d => {
                entries.push(ParamEntry { name: "gamma_psi", transform: log, hint: InitHint::Amplitude });
                entries.push(ParamEntry { name: "w_psi_x", transform: log, hint: InitHint::Width(0) });
                entries.push(ParamEntry { name: "w_psi_y", transform: log, hint: InitHint::Width(1) });
                entries.push(ParamEntry { name: "gamma_p", transform: log, hint: InitHint::Amplitude });
                entries.push(ParamEntry { name: "w_p_x", transform: log, hint: InitHint::Width(0) });
                entries.push(ParamEntry { name: "w_p_y", transform: log, hint: InitHint::Width(1) });
                kernels.push((0, vec![1, 2]));
                kernels.push((3, vec![4, 5]));
                entries.push(ParamEntry { name: "lambda1", transform: id, hint: lam(0.0) });
                entries.push(ParamEntry { name: "lambda2", transform: id, hint: lam(0.0) });
            }
            ModelFamily::FractionalRl => {
                entries.push(ParamEntry { name: "gamma", transform: log, hint: InitHint::Amplitude });
                entries.push(ParamEntry { name: "w1", transform: log, hint: InitHint::Width(0) });
                kernels.push((0, vec![1]));
                // a zero drift coefficient makes the operator the identity,
                // so the leading coefficient starts at 1
                entries.push(ParamEntry { name: "lambda1", transform: id, hint: lam(1.0) });
                entries.push(ParamEntry {
                    name: "lambda2",
                    transform: Transform::BoundedSigmoid {
                        lo: RL_ORDER_BOUNDS.0,
                        hi: RL_ORDER_BOUNDS.1,
                    },
                    hint: lam(1.0),
                });
            }
            ModelFamily::FractionalLaplacian => {
                entries.push(ParamEntry { name: "gamma", transform: log, hint: InitHint::Amplitude });
                entries.push(ParamEntry { name: "w1", transform: log, hint: InitHint::Width(0) });
                kernels.push((0, vec![1]));
                entries.push(ParamEntry {
                    name: "alpha",
                    transform: Transform::BoundedSigmoid {
                        lo: LAPLACIAN_ORDER_BOUNDS.0,
                        hi: LAPLACIAN_ORDER_BOUNDS.1,
                    },
                    hint: lam(1.0),
                });
            }
        }
        let lambda_start = entries
            .iter()
            .position(|e| e.name.starts_with("lambda") || e.name == "alpha")
            .expect("every family has coefficients");
        let lambda_end = lambda_start + family.lambda_len();
        entries.push(ParamEntry {
            name: "sigma2",
            transform: log,
            hint: InitHint::Noise,
        });
        let sigma2_idx = entries.len() - 1;
        Self { family, entries, kernels, lambda_range: (lambda_start, lambda_end), sigma2_idx }
    }

    pub fn family(&self) -> ModelFamily {
        self.family
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|e| e.name).collect()
    }

    pub fn transform(&self, i: usize) -> &Transform {
        &self.entries[i].transform
    }
}

/// Packed unconstrained parameters tied to a family layout.
#[derive(Debug, Clone)]
pub struct ParamVector {
    layout: ParamLayout,
    entries: Vec<f64>,
}

/// Decoded parameters: per-kernel hyperparameters, PDE coefficients, noise.
#[derive(Debug, Clone)]
pub struct DecodedParams {
    pub kernels: Vec<ArdSeKernelParams>,
    pub lambda: Vec<f64>,
    pub sigma2: f64,
}

impl ParamVector {
    pub fn new(layout: ParamLayout, entries: Vec<f64>) -> Result<Self, CoreError> {
        if entries.len() != layout.len() {
            return Err(CoreError::DimensionMismatch {
                expected: layout.len(),
                got: entries.len(),
            });
        }
        if entries.iter().any(|e| !e.is_finite()) {
            return Err(CoreError::InvalidParameter("entries must be finite"));
        }
        Ok(Self { layout, entries })
    }

    /// Pack decoded per-entry values (in layout order) into unconstrained form.
    pub fn from_decoded_entries(
        layout: ParamLayout,
        decoded: &[f64],
    ) -> Result<Self, CoreError> {
        if decoded.len() != layout.len() {
            return Err(CoreError::DimensionMismatch {
                expected: layout.len(),
                got: decoded.len(),
            });
        }
        let entries = layout
            .entries
            .iter()
            .zip(decoded)
            .map(|(e, d)| e.transform.encode(*d))
            .collect::<Result<Vec<f64>, CoreError>>()?;
        Ok(Self { layout, entries })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    /// Decoded scalar per entry, in layout order.
    pub fn decoded_entries(&self) -> Vec<f64> {
        self.layout
            .entries
            .iter()
            .zip(&self.entries)
            .map(|(e, v)| e.transform.decode(*v))
            .collect()
    }

    /// Fails when an unconstrained entry is extreme enough that its decoded
    /// positive over- or underflows; strict positivity is part of the
    /// contract, so such vectors have no decoded form.
    pub fn decode(&self) -> Result<DecodedParams, CoreError> {
        let d = self.decoded_entries();
        let mut kernels = Vec::with_capacity(self.layout.kernels.len());
        for (g, ws) in &self.layout.kernels {
            let weights: Vec<f64> = ws.iter().map(|i| d[*i]).collect();
            kernels.push(ArdSeKernelParams::new(d[*g], weights)?);
        }
        let sigma2 = d[self.layout.sigma2_idx];
        if !sigma2.is_finite() || sigma2 <= 0.0 {
            return Err(CoreError::InvalidParameter("noise variance must be positive and finite"));
        }
        let (ls, le) = self.layout.lambda_range;
        Ok(DecodedParams { kernels, lambda: d[ls..le].to_vec(), sigma2 })
    }
}

/// The three NLML summands: `½hᵀK⁻¹h`, `½log|K|`, `(N/2)log 2π`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NlmlTerms {
    pub data_fit: f64,
    pub complexity: f64,
    pub constant: f64,
}

impl NlmlTerms {
    pub fn total(&self) -> f64 {
        self.data_fit + self.complexity + self.constant
    }
}

/// NLML of stacked observations under an assembled covariance, split into its
/// data-fit, complexity, and constant terms.
pub fn nlml_terms(cov: &JointCovariance, h: &[f64]) -> Result<NlmlTerms, CoreError> {
    let n = cov.dim();
    if h.len() != n {
        return Err(CoreError::DimensionMismatch { expected: n, got: h.len() });
    }
    let mut y = h.to_vec();
    cov.factor().l.solve_lower_in_place(&mut y);
    let data_fit = 0.5 * dot(&y, &y);
    let complexity = cov.factor().l.diag_log_sum();
    let constant = 0.5 * n as f64 * fmath::ln(2.0 * core::f64::consts::PI);
    Ok(NlmlTerms { data_fit, complexity, constant })
}

/// `½hᵀK⁻¹h + ½log|K| + (N/2)log 2π` through the cached Cholesky factor.
pub fn nlml(cov: &JointCovariance, h: &[f64]) -> Result<f64, CoreError> {
    Ok(nlml_terms(cov, h)?.total())
}

/// Assemble the family's joint covariance for decoded parameters.
fn assemble_for(
    family: ModelFamily,
    decoded: &DecodedParams,
    pair: &SnapshotPair,
    rule: &QuadratureRule,
) -> Result<JointCovariance, CoreError> {
    let model = ModelSpec::new(family, decoded.lambda.clone())?;
    match family {
        ModelFamily::Burgers | ModelFamily::Kdv | ModelFamily::Ks => {
            assemble_scalar(&model, &decoded.kernels[0], decoded.sigma2, pair)
        }
        ModelFamily::Nls => assemble_nls(
            &model,
            &decoded.kernels[0],
            &decoded.kernels[1],
            decoded.sigma2,
            pair,
        ),
        ModelFamily::Ns2d => assemble_ns(
            &model,
            &decoded.kernels[0],
            &decoded.kernels[1],
            decoded.sigma2,
            pair,
        ),
        ModelFamily::FractionalRl | ModelFamily::FractionalLaplacian => {
            assemble_fractional(&model, &decoded.kernels[0], decoded.sigma2, pair, rule)
        }
    }
}

/// Candidate scorer over one snapshot pair. Degenerate assemblies and
/// non-finite objectives score +infinity so the optimizer stays total.
struct Objective<'a> {
    family: ModelFamily,
    layout: ParamLayout,
    pair: &'a SnapshotPair,
    h: Vec<f64>,
    rule: QuadratureRule,
}

impl<'a> Objective<'a> {
    fn new(family: ModelFamily, pair: &'a SnapshotPair) -> Result<Self, CoreError> {
        let layout = ParamLayout::for_family(family);
        let rule = QuadratureRule::default_gauss_hermite();
        // any candidate produces the same block layout, so the target vector
        // can be stacked once
        let blocks = crate::assembly::BlockLayout::for_pair(pair);
        let h = stacked_observations(pair, &blocks);
        Ok(Self { family, layout, pair, h, rule })
    }

    fn eval(&self, entries: &[f64]) -> Result<f64, CoreError> {
        if entries.iter().any(|e| !e.is_finite()) {
            return Ok(f64::INFINITY);
        }
        let pv = ParamVector { layout: self.layout.clone(), entries: entries.to_vec() };
        // an undecodable candidate is infinitely bad, not an error
        let decoded = match pv.decode() {
            Ok(d) => d,
            Err(CoreError::InvalidParameter(_)) => return Ok(f64::INFINITY),
            Err(e) => return Err(e),
        };
        match assemble_for(self.family, &decoded, self.pair, &self.rule) {
            Ok(cov) => {
                let v = nlml(&cov, &self.h)?;
                Ok(if v.is_finite() { v } else { f64::INFINITY })
            }
            Err(CoreError::AssemblyDegenerate { .. })
            | Err(CoreError::InvalidParameter(_)) => Ok(f64::INFINITY),
            Err(e) => Err(e),
        }
    }
}

/// Central finite-difference gradient with one-sided fallback.
#[derive(Debug, Clone)]
pub struct FdGradient {
    pub values: Vec<f64>,
    /// Components that fell back to a one-sided difference.
    pub one_sided: Vec<usize>,
    /// Components zeroed because both stencil sides were non-finite.
    pub zeroed: Vec<usize>,
}

const FD_REL_STEP: f64 = 1e-4;
const FD_ABS_FLOOR: f64 = 1e-6;

fn fd_gradient<F>(f: &F, x: &[f64], f0: f64) -> Result<FdGradient, CoreError>
where
    F: Fn(&[f64]) -> Result<f64, CoreError>,
{
    let mut values = vec![0.0; x.len()];
    let mut one_sided = Vec::new();
    let mut zeroed = Vec::new();
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let h = (FD_REL_STEP * fmath::abs(x[i])).max(FD_ABS_FLOOR);
        probe[i] = x[i] + h;
        let fp = f(&probe)?;
        probe[i] = x[i] - h;
        let fm = f(&probe)?;
        probe[i] = x[i];
        values[i] = if fp.is_finite() && fm.is_finite() {
            (fp - fm) / (2.0 * h)
        } else if fp.is_finite() && f0.is_finite() {
            one_sided.push(i);
            (fp - f0) / h
        } else if fm.is_finite() && f0.is_finite() {
            one_sided.push(i);
            (f0 - fm) / h
        } else {
            zeroed.push(i);
            0.0
        };
    }
    Ok(FdGradient { values, one_sided, zeroed })
}

/// Finite-difference NLML gradient in the unconstrained space.
pub fn nlml_grad(
    model: &ModelSpec,
    pair: &SnapshotPair,
    params: &ParamVector,
) -> Result<FdGradient, CoreError> {
    if params.layout().family() != model.family {
        return Err(CoreError::UnsupportedModel(model.family.name()));
    }
    let obj = Objective::new(model.family, pair)?;
    let f0 = obj.eval(params.entries())?;
    fd_gradient(&|e: &[f64]| obj.eval(e), params.entries(), f0)
}

/// NLML of one candidate parameter vector (+infinity when degenerate).
pub fn nlml_value(
    model: &ModelSpec,
    pair: &SnapshotPair,
    params: &ParamVector,
) -> Result<f64, CoreError> {
    if params.layout().family() != model.family {
        return Err(CoreError::UnsupportedModel(model.family.name()));
    }
    Objective::new(model.family, pair)?.eval(params.entries())
}

/// Training configuration; defaults: 10 restarts, 500 iterations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub restarts: usize,
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { restarts: 10, max_iters: 500, seed: 0 }
    }
}

/// Outcome of training: decoded optimum plus per-restart diagnostics.
#[derive(Debug, Clone)]
pub struct TrainResult {
    pub theta: Vec<ArdSeKernelParams>,
    pub lambda: Vec<f64>,
    pub sigma2: f64,
    pub nlml: f64,
    pub restarts_run: usize,
    pub converged: bool,
    pub iterations: Vec<usize>,
    pub restart_nlmls: Vec<f64>,
    pub params: ParamVector,
}

const LBFGS_MEMORY: usize = 10;
const WOLFE_C1: f64 = 1e-4;
const WOLFE_C2: f64 = 0.9;
const GRAD_TOL: f64 = 1e-5;
const DECREASE_TOL: f64 = 1e-10;

struct RestartOutcome {
    x: Vec<f64>,
    f: f64,
    converged: bool,
    iterations: usize,
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(fmath::abs(*x)))
}

/// Two-loop recursion with `sᵀy/yᵀy` initial scaling.
fn lbfgs_direction(g: &[f64], hist: &[(Vec<f64>, Vec<f64>, f64)]) -> Vec<f64> {
    let mut q: Vec<f64> = g.iter().map(|x| -x).collect();
    let mut alphas = vec![0.0; hist.len()];
    for (idx, (s, y, rho)) in hist.iter().enumerate().rev() {
        let a = rho * dot(s, &q);
        alphas[idx] = a;
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
    }
    if let Some((s, y, _)) = hist.last() {
        let scale = dot(s, y) / dot(y, y);
        for qi in q.iter_mut() {
            *qi *= scale;
        }
    }
    for (idx, (s, y, rho)) in hist.iter().enumerate() {
        let b = rho * dot(y, &q);
        let a = alphas[idx];
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    q
}

struct LineSearchResult {
    alpha: f64,
    f: f64,
}

/// Strong-Wolfe bracket and zoom; the derivative along the ray is a central
/// finite difference of the objective, two evaluations per probe.
fn wolfe_line_search<F>(
    f: &F,
    x: &[f64],
    d: &[f64],
    f0: f64,
    dphi0: f64,
    alpha_init: f64,
) -> Result<Option<LineSearchResult>, CoreError>
where
    F: Fn(&[f64]) -> Result<f64, CoreError>,
{
    let phi = |alpha: f64| -> Result<f64, CoreError> {
        let probe: Vec<f64> = x.iter().zip(d).map(|(xi, di)| xi + alpha * di).collect();
        f(&probe)
    };
    // one-sided difference reusing the probe value already in hand; a Wolfe
    // curvature check tolerates the extra O(h) bias and it halves the
    // evaluation count of every probe
    let dphi = |alpha: f64, f_alpha: f64| -> Result<f64, CoreError> {
        let h = 1e-6 * (1.0 + fmath::abs(alpha));
        let fp = phi(alpha + h)?;
        if !fp.is_finite() || !f_alpha.is_finite() {
            return Ok(f64::NAN);
        }
        Ok((fp - f_alpha) / h)
    };
    let zoom = |mut lo: f64, mut hi: f64, mut f_lo: f64| -> Result<Option<LineSearchResult>, CoreError> {
        for _ in 0..12 {
            let mid = 0.5 * (lo + hi);
            let fm = phi(mid)?;
            if !fm.is_finite() || fm > f0 + WOLFE_C1 * mid * dphi0 || fm >= f_lo {
                hi = mid;
            } else {
                let dm = dphi(mid, fm)?;
                if dm.is_finite() && fmath::abs(dm) <= -WOLFE_C2 * dphi0 {
                    return Ok(Some(LineSearchResult { alpha: mid, f: fm }));
                }
                if dm.is_finite() && dm * (hi - lo) >= 0.0 {
                    hi = lo;
                }
                lo = mid;
                f_lo = fm;
            }
            if fmath::abs(hi - lo) < 1e-14 * (1.0 + fmath::abs(lo)) {
                break;
            }
        }
        // fall back to the best sufficient-decrease point seen
        if f_lo < f0 {
            return Ok(Some(LineSearchResult { alpha: lo, f: f_lo }));
        }
        Ok(None)
    };

    let mut alpha_prev = 0.0;
    let mut f_prev = f0;
    let mut alpha = alpha_init;
    for it in 0..12 {
        let fa = phi(alpha)?;
        if !fa.is_finite() || fa > f0 + WOLFE_C1 * alpha * dphi0 || (it > 0 && fa >= f_prev) {
            return zoom(alpha_prev, alpha, f_prev);
        }
        let da = dphi(alpha, fa)?;
        if da.is_finite() && fmath::abs(da) <= -WOLFE_C2 * dphi0 {
            return Ok(Some(LineSearchResult { alpha, f: fa }));
        }
        if da.is_finite() && da >= 0.0 {
            return zoom(alpha, alpha_prev, fa);
        }
        alpha_prev = alpha;
        f_prev = fa;
        alpha *= 2.0;
        if alpha > 1e4 {
            break;
        }
    }
    if f_prev < f0 {
        return Ok(Some(LineSearchResult { alpha: alpha_prev, f: f_prev }));
    }
    Ok(None)
}

fn minimize<F>(
    f: &F,
    x0: Vec<f64>,
    max_iters: usize,
) -> Result<RestartOutcome, CoreError>
where
    F: Fn(&[f64]) -> Result<f64, CoreError>,
{
    let mut x = x0;
    let mut fx = f(&x)?;
    if !fx.is_finite() {
        return Ok(RestartOutcome { x, f: fx, converged: false, iterations: 0 });
    }
    let mut grad = fd_gradient(f, &x, fx)?.values;
    let mut hist: Vec<(Vec<f64>, Vec<f64>, f64)> = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut flat_steps = 0;
    for iter in 0..max_iters {
        iterations = iter;
        if inf_norm(&grad) <= GRAD_TOL * (1.0 + fmath::abs(fx)) {
            converged = true;
            break;
        }
        let mut d = lbfgs_direction(&grad, &hist);
        let mut dphi0 = dot(&d, &grad);
        if !(dphi0 < 0.0) {
            hist.clear();
            d = grad.iter().map(|g| -g).collect();
            dphi0 = dot(&d, &grad);
            if !(dphi0 < 0.0) {
                converged = true;
                break;
            }
        }
        let alpha_init = if hist.is_empty() {
            (1.0 / (1.0 + inf_norm(&grad))).min(1.0)
        } else {
            1.0
        };
        let ls = match wolfe_line_search(f, &x, &d, fx, dphi0, alpha_init)? {
            Some(r) => r,
            None => {
                if hist.is_empty() {
                    break;
                }
                // retry once as plain gradient descent
                hist.clear();
                let d: Vec<f64> = grad.iter().map(|g| -g).collect();
                let dphi0 = dot(&d, &grad);
                match wolfe_line_search(f, &x, &d, fx, dphi0, 1e-2)? {
                    Some(r) => {
                        let x_new: Vec<f64> =
                            x.iter().zip(&d).map(|(xi, di)| xi + r.alpha * di).collect();
                        let g_new = fd_gradient(f, &x_new, r.f)?.values;
                        update_state(&mut x, &mut fx, &mut grad, &mut hist, x_new, r.f, g_new);
                        continue;
                    }
                    None => break,
                }
            }
        };
        let x_new: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + ls.alpha * di).collect();
        let decrease = fx - ls.f;
        let g_new = fd_gradient(f, &x_new, ls.f)?.values;
        update_state(&mut x, &mut fx, &mut grad, &mut hist, x_new, ls.f, g_new);
        if decrease <= DECREASE_TOL * (1.0 + fmath::abs(fx)) {
            flat_steps += 1;
            if flat_steps >= 3 {
                converged = true;
                break;
            }
        } else {
            flat_steps = 0;
        }
    }
    Ok(RestartOutcome { x, f: fx, converged, iterations })
}

fn update_state(
    x: &mut Vec<f64>,
    fx: &mut f64,
    grad: &mut Vec<f64>,
    hist: &mut Vec<(Vec<f64>, Vec<f64>, f64)>,
    x_new: Vec<f64>,
    f_new: f64,
    g_new: Vec<f64>,
) {
    let s: Vec<f64> = x_new.iter().zip(x.iter()).map(|(a, b)| a - b).collect();
    let y: Vec<f64> = g_new.iter().zip(grad.iter()).map(|(a, b)| a - b).collect();
    let sy = dot(&s, &y);
    if sy > 1e-10 * inf_norm(&s).max(1e-300) * inf_norm(&y).max(1e-300) {
        if hist.len() == LBFGS_MEMORY {
            hist.remove(0);
        }
        hist.push((s, y, 1.0 / sy));
    }
    *x = x_new;
    *fx = f_new;
    *grad = g_new;
}

/// Data-driven initialization: multiplicative spread around amplitude and
/// length-scale heuristics; coefficients start at fixed values.
fn initial_entries(
    layout: &ParamLayout,
    pair: &SnapshotPair,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for q in 0..pair.outputs() {
        for v in pair.h_prev(q).iter().chain(pair.h_curr(q)) {
            sum += v;
            count += 1;
        }
    }
    let mean = sum / count as f64;
    let mut var = 0.0;
    for q in 0..pair.outputs() {
        for v in pair.h_prev(q).iter().chain(pair.h_curr(q)) {
            var += (v - mean) * (v - mean);
        }
    }
    var /= count as f64;
    let std = fmath::sqrt(var).max(1e-6);
    let dim = pair.dim();
    let mut range = vec![0.0f64; dim];
    for d in 0..dim {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for x in [pair.x_prev(), pair.x_curr()] {
            for p in x.chunks_exact(dim) {
                lo = lo.min(p[d]);
                hi = hi.max(p[d]);
            }
        }
        range[d] = (hi - lo).max(1e-6);
    }
    let spread = fmath::ln(10.0);
    let mut draw = |center: f64| center + rng.gen_range(-spread..spread);
    layout
        .entries
        .iter()
        .map(|e| match e.hint {
            InitHint::Amplitude => draw(fmath::ln(std)),
            InitHint::Width(d) => draw(fmath::ln(2.0 / range[d])),
            InitHint::Noise => draw(fmath::ln(var.max(1e-12) * 1e-4)),
            InitHint::Fixed(v) => e.transform.encode(v).expect("fixed inits are encodable"),
        })
        .collect()
}

fn restart_seed(seed: u64, restart: usize) -> u64 {
    seed ^ (restart as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Learn (θ, λ, σ²) by multi-restart L-BFGS; returns the best restart.
pub fn train(
    model: &ModelSpec,
    pair: &SnapshotPair,
    config: &TrainConfig,
) -> Result<TrainResult, CoreError> {
    if !(pair.dt() > 0.0) {
        return Err(CoreError::InvalidParameter("training requires dt > 0"));
    }
    if config.restarts == 0 {
        return Err(CoreError::InvalidParameter("at least one restart is required"));
    }
    let obj = Objective::new(model.family, pair)?;
    let run_one = |r: usize| -> Result<RestartOutcome, CoreError> {
        let mut rng = ChaCha8Rng::seed_from_u64(restart_seed(config.seed, r));
        let x0 = initial_entries(&obj.layout, pair, &mut rng);
        minimize(&|e: &[f64]| obj.eval(e), x0, config.max_iters)
    };
    #[cfg(feature = "parallel")]
    let outcomes: Vec<Result<RestartOutcome, CoreError>> = {
        use rayon::prelude::*;
        (0..config.restarts).into_par_iter().map(run_one).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let outcomes: Vec<Result<RestartOutcome, CoreError>> =
        (0..config.restarts).map(run_one).collect();
    let mut results = Vec::with_capacity(config.restarts);
    for o in outcomes {
        results.push(o?);
    }
    let mut best: Option<usize> = None;
    for (i, r) in results.iter().enumerate() {
        if r.f.is_finite() && best.map_or(true, |b| r.f < results[b].f) {
            best = Some(i);
        }
    }
    let Some(best) = best else {
        return Err(CoreError::TrainingFailed(results.iter().map(|r| r.f).collect()));
    };
    let chosen = &results[best];
    let params = ParamVector::new(obj.layout.clone(), chosen.x.clone())?;
    // best restart had finite objective, so its vector decodes
    let decoded = params.decode()?;
    Ok(TrainResult {
        theta: decoded.kernels,
        lambda: decoded.lambda,
        sigma2: decoded.sigma2,
        nlml: chosen.f,
        restarts_run: results.len(),
        converged: chosen.converged,
        iterations: results.iter().map(|r| r.iterations).collect(),
        restart_nlmls: results.iter().map(|r| r.f).collect(),
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::SnapshotPair;
    use crate::linalg::DenseMatrix;
    use alloc::string::ToString;
    use nalgebra::DMatrix;
    use rand::Rng;

    fn labels(names: &[&str]) -> Vec<alloc::string::String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    fn dense_from_na(m: &DMatrix<f64>) -> DenseMatrix {
        let n = m.nrows();
        let mut data = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                data.push(m[(i, j)]);
            }
        }
        DenseMatrix::from_rows(n, data).unwrap()
    }

    #[test]
    fn transforms_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let transforms = [
            Transform::LogPositive,
            Transform::Identity,
            Transform::BoundedSigmoid { lo: 0.0, hi: 2.5 },
        ];
        for t in transforms {
            for _ in 0..200 {
                let e = rng.gen_range(-6.0..6.0);
                let d = t.decode(e);
                match t {
                    Transform::LogPositive => assert!(d > 0.0),
                    Transform::BoundedSigmoid { lo, hi } => assert!(d > lo && d < hi),
                    Transform::Identity => {}
                }
                let back = t.encode(d).unwrap();
                assert!(
                    (back - e).abs() <= 1e-12 * e.abs().max(1.0),
                    "{t:?}: {e} -> {d} -> {back}"
                );
            }
        }
        assert!(Transform::LogPositive.encode(-1.0).is_err());
        assert!(Transform::BoundedSigmoid { lo: 0.0, hi: 2.0 }.encode(2.0).is_err());
    }

    #[test]
    fn layout_lengths_match_families() {
        let cases = [
            (ModelFamily::Burgers, 5),
            (ModelFamily::Kdv, 5),
            (ModelFamily::Ks, 6),
            (ModelFamily::Nls, 7),
            (ModelFamily::Ns2d, 9),
            (ModelFamily::FractionalRl, 5),
            (ModelFamily::FractionalLaplacian, 4),
        ];
        for (family, len) in cases {
            let layout = ParamLayout::for_family(family);
            assert_eq!(layout.len(), len, "{family:?}");
            let names = layout.names();
            for (i, n) in names.iter().enumerate() {
                assert!((i + 1..names.len()).all(|j| names[j] != *n), "duplicate {n}");
            }
            assert_eq!(*names.last().unwrap(), "sigma2");
            // decode produces the right shapes
            let entries = vec![0.1; layout.len()];
            let pv = ParamVector::new(layout, entries).unwrap();
            let d = pv.decode().unwrap();
            assert_eq!(d.lambda.len(), family.lambda_len());
            assert_eq!(d.kernels.len(), if family.outputs() == 2 { 2 } else { 1 });
        }
    }

    fn small_burgers_pair(seed: u64, n: usize, dt: f64) -> SnapshotPair {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xp: Vec<f64> = (0..n).map(|i| -2.0 + 4.0 * i as f64 / (n - 1) as f64).collect();
        let xc = xp.clone();
        let hp: Vec<f64> = xp.iter().map(|x| (-x * x).exp() + 0.01 * rng.gen_range(-1.0..1.0)).collect();
        let hc: Vec<f64> = xc.iter().map(|x| 0.9 * (-x * x).exp() + 0.01 * rng.gen_range(-1.0..1.0)).collect();
        SnapshotPair::new(xp, vec![hp], xc, vec![hc], dt, 1, labels(&["h"])).unwrap()
    }

    #[test]
    fn nlml_single_point_closed_form() {
        let m = DenseMatrix::from_rows(1, vec![2.25 + 0.04]).unwrap();
        let cov = JointCovariance::from_dense(m).unwrap();
        let h0 = 0.7;
        let got = nlml(&cov, &[h0]).unwrap();
        let k = 2.25 + 0.04 + cov.jitter_applied();
        let want = 0.5 * h0 * h0 / k + 0.5 * k.ln() + 0.5 * (2.0 * core::f64::consts::PI).ln();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn nlml_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let n = 5;
            let b = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let spd = &b * b.transpose() + DMatrix::identity(n, n) * (n as f64);
            let cov = JointCovariance::from_dense(dense_from_na(&spd)).unwrap();
            let h: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let got = nlml(&cov, &h).unwrap();
            // oracle on the same (jittered) matrix, explicit inverse and det
            let kj = &spd + DMatrix::identity(n, n) * cov.jitter_applied();
            let hv = nalgebra::DVector::from_column_slice(&h);
            let quad = (hv.transpose() * kj.clone().try_inverse().unwrap() * &hv)[(0, 0)];
            let want = 0.5 * quad
                + 0.5 * kj.determinant().ln()
                + 0.5 * n as f64 * (2.0 * core::f64::consts::PI).ln();
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
    }

    #[test]
    fn nlml_zero_data_is_pure_complexity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 4;
        let b = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let spd = &b * b.transpose() + DMatrix::identity(n, n) * 2.0;
        let cov = JointCovariance::from_dense(dense_from_na(&spd)).unwrap();
        let t = nlml_terms(&cov, &vec![0.0; n]).unwrap();
        assert_eq!(t.data_fit, 0.0);
        assert!((t.total() - (t.complexity + t.constant)).abs() < 1e-15);
    }

    #[test]
    fn complexity_term_grows_with_gamma() {
        use crate::operator::{ModelFamily, ModelSpec};
        let pair = small_burgers_pair(4, 8, 0.1);
        let model = ModelSpec::new(ModelFamily::Burgers, vec![1.0, 0.1]).unwrap();
        let h = {
            let mut v = pair.h_curr(0).to_vec();
            v.extend_from_slice(pair.h_prev(0));
            v
        };
        let mut prev = f64::NEG_INFINITY;
        for gamma in [0.5, 5.0, 50.0] {
            let theta = ArdSeKernelParams::new(gamma, vec![1.0]).unwrap();
            let cov =
                crate::assembly::assemble_scalar(&model, &theta, 1e-4, &pair).unwrap();
            let t = nlml_terms(&cov, &h).unwrap();
            assert!(t.complexity > prev, "complexity must grow with gamma");
            prev = t.complexity;
        }
    }

    #[test]
    fn fd_gradient_ignores_constant_coordinate() {
        let f = |x: &[f64]| -> Result<f64, CoreError> { Ok(x[0] * x[0] + 3.0) };
        let g = fd_gradient(&f, &[1.5, -0.7], f(&[1.5, -0.7]).unwrap()).unwrap();
        assert!((g.values[0] - 3.0).abs() < 1e-6);
        assert_eq!(g.values[1], 0.0);
        assert!(g.zeroed.is_empty());
    }

    #[test]
    fn fd_gradient_one_sided_fallback() {
        // f is only defined for x0 <= 1: the + side of the stencil at 1.0 is
        // non-finite and forces the one-sided path
        let f = |x: &[f64]| -> Result<f64, CoreError> {
            Ok(if x[0] > 1.0 { f64::INFINITY } else { 2.0 * x[0] })
        };
        let g = fd_gradient(&f, &[1.0], 2.0).unwrap();
        assert_eq!(g.one_sided, vec![0]);
        assert!((g.values[0] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn nlml_grad_halved_step_agreement() {
        let pair = small_burgers_pair(5, 10, 0.1);
        let model = ModelSpec::new(ModelFamily::Burgers, vec![0.0, 0.0]).unwrap();
        let layout = ParamLayout::for_family(ModelFamily::Burgers);
        let pv = ParamVector::new(
            layout,
            vec![0.2, -0.1, 0.8, 0.05, (1e-3f64).ln()],
        )
        .unwrap();
        let g = nlml_grad(&model, &pair, &pv).unwrap();
        // independent half-step central differences
        let obj = Objective::new(ModelFamily::Burgers, &pair).unwrap();
        let x = pv.entries();
        for i in 0..x.len() {
            let h = 0.5 * (FD_REL_STEP * x[i].abs()).max(FD_ABS_FLOOR);
            let mut p = x.to_vec();
            p[i] = x[i] + h;
            let fp = obj.eval(&p).unwrap();
            p[i] = x[i] - h;
            let fm = obj.eval(&p).unwrap();
            let want = (fp - fm) / (2.0 * h);
            let scale = want.abs().max(g.values[i].abs()).max(1e-6);
            assert!(
                (g.values[i] - want).abs() / scale < 1e-3,
                "component {i}: {} vs {want}",
                g.values[i]
            );
        }
    }

    #[test]
    fn train_small_burgers_reaches_stationary_point() {
        let pair = small_burgers_pair(6, 12, 0.1);
        let model = ModelSpec::new(ModelFamily::Burgers, vec![0.0, 0.0]).unwrap();
        let config = TrainConfig { restarts: 2, max_iters: 150, seed: 3 };
        let result = train(&model, &pair, &config).unwrap();
        assert!(result.nlml.is_finite());
        assert!(result.sigma2 >= 0.0);
        let g = nlml_grad(&model, &pair, &result.params).unwrap();
        let gn = inf_norm(&g.values);
        assert!(
            gn <= 1e-3 * (1.0 + result.nlml.abs()),
            "gradient at optimum too large: {gn}"
        );
    }

    #[test]
    fn train_is_seed_deterministic() {
        let pair = small_burgers_pair(7, 9, 0.1);
        let model = ModelSpec::new(ModelFamily::Burgers, vec![0.0, 0.0]).unwrap();
        let config = TrainConfig { restarts: 2, max_iters: 40, seed: 11 };
        let a = train(&model, &pair, &config).unwrap();
        let b = train(&model, &pair, &config).unwrap();
        assert_eq!(a.nlml.to_bits(), b.nlml.to_bits());
        assert_eq!(a.sigma2.to_bits(), b.sigma2.to_bits());
        for (x, y) in a.lambda.iter().zip(&b.lambda) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(a.iterations, b.iterations);
    }

    #[test]
    fn best_restart_is_monotone() {
        let pair = small_burgers_pair(8, 9, 0.1);
        let model = ModelSpec::new(ModelFamily::Burgers, vec![0.0, 0.0]).unwrap();
        let config = TrainConfig { restarts: 3, max_iters: 40, seed: 5 };
        let r = train(&model, &pair, &config).unwrap();
        assert_eq!(r.restarts_run, 3);
        assert_eq!(r.restart_nlmls.len(), 3);
        for f in &r.restart_nlmls {
            assert!(r.nlml <= *f);
        }
        assert!(r.restart_nlmls.iter().any(|f| *f == r.nlml));
    }

    #[test]
    fn train_single_point_pair_does_not_crash() {
        let pair = SnapshotPair::new(
            vec![0.0],
            vec![vec![0.5]],
            vec![0.1],
            vec![vec![0.4]],
            0.1,
            1,
            labels(&["h"]),
        )
        .unwrap();
        let model = ModelSpec::new(ModelFamily::Burgers, vec![0.0, 0.0]).unwrap();
        let config = TrainConfig { restarts: 2, max_iters: 30, seed: 1 };
        let r = train(&model, &pair, &config).unwrap();
        assert!(r.nlml.is_finite());
    }

    #[test]
    fn train_rejects_zero_dt() {
        let pair = SnapshotPair::new(
            vec![0.0, 1.0],
            vec![vec![0.5, 0.2]],
            vec![0.1, 0.9],
            vec![vec![0.4, 0.1]],
            0.0,
            1,
            labels(&["h"]),
        )
        .unwrap();
        let model = ModelSpec::new(ModelFamily::Burgers, vec![0.0, 0.0]).unwrap();
        assert!(train(&model, &pair, &TrainConfig::default()).is_err());
    }

    /// Generate a pair directly from the fractional prior (its covariance has
    /// no data-dependent coefficients), then check recovery.
    fn sample_fractional_pair(
        seed: u64,
        lambda: &[f64],
        gamma: f64,
        w: f64,
        sigma2: f64,
        n: usize,
        dt: f64,
    ) -> SnapshotPair {
        let rule = QuadratureRule::default_gauss_hermite();
        let model = ModelSpec::new(ModelFamily::FractionalRl, lambda.to_vec()).unwrap();
        let theta = ArdSeKernelParams::new(gamma, vec![w]).unwrap();
        let lo = -3.0;
        let hi = 3.0;
        let width = (hi - lo) / n as f64;
        let x: Vec<f64> = (0..n).map(|i| lo + (i as f64 + 0.5) * width).collect();
        let zeros = vec![0.0; n];
        let skeleton = SnapshotPair::new(
            x.clone(),
            vec![zeros.clone()],
            x.clone(),
            vec![zeros],
            dt,
            1,
            labels(&["density"]),
        )
        .unwrap();
        let cov = assemble_fractional(&model, &theta, sigma2, &skeleton, &rule).unwrap();
        let m = cov.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z: Vec<f64> = (0..m)
            .map(|_| {
                let (a, b): (f64, f64) = (rng.gen(), rng.gen());
                (-2.0 * a.max(1e-12).ln()).sqrt() * (2.0 * core::f64::consts::PI * b).cos()
            })
            .collect();
        let l = &cov.factor().l;
        let mut s = vec![0.0; m];
        for i in 0..m {
            let mut acc = 0.0;
            for j in 0..=i {
                acc += l.get(i, j) * z[j];
            }
            s[i] = acc;
        }
        // layout is [current block, previous block]
        let hc = s[..n].to_vec();
        let hp = s[n..].to_vec();
        SnapshotPair::new(x.clone(), vec![hp], x, vec![hc], dt, 1, labels(&["density"]))
            .unwrap()
    }

    #[test]
    fn self_consistency_recovers_known_parameters() {
        let truth = [0.5, 2.0];
        let s2 = 1e-4;
        let mut hits = 0;
        for seed in 0..4u64 {
            let pair = sample_fractional_pair(seed, &truth, 1.0, 1.0, s2, 40, 0.1);
            let model = ModelSpec::new(ModelFamily::FractionalRl, truth.to_vec()).unwrap();
            let config = TrainConfig { restarts: 2, max_iters: 80, seed };
            let r = train(&model, &pair, &config).unwrap();
            if (r.lambda[0] - truth[0]).abs() <= 0.1 * truth[0].abs()
                && (r.lambda[1] - truth[1]).abs() <= 0.1 * truth[1].abs()
            {
                hits += 1;
            }
        }
        assert!(hits >= 3, "parameter recovery succeeded only {hits}/4 times");
    }

    #[test]
    fn noise_variance_recovered_within_factor_three() {
        let truth = [0.5, 2.0];
        let s2 = 1e-2;
        let mut hits = 0;
        for seed in 20..24u64 {
            let pair = sample_fractional_pair(seed, &truth, 1.0, 1.0, s2, 40, 0.1);
            let model = ModelSpec::new(ModelFamily::FractionalRl, truth.to_vec()).unwrap();
            let config = TrainConfig { restarts: 2, max_iters: 80, seed };
            let r = train(&model, &pair, &config).unwrap();
            if r.sigma2 >= s2 / 3.0 && r.sigma2 <= s2 * 3.0 {
                hits += 1;
            }
        }
        assert!(hits >= 3, "noise recovery succeeded only {hits}/4 times");
    }
}
