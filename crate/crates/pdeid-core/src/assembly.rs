//! Joint covariance assembly for pairs of observed snapshots.
//!
//! A model with observed outputs `f_1..f_Q` and linearized rows
//! `L_q [f_1..f_O] = f_q^{n-1}` induces a joint Gaussian prior on the stacked
//! vector `[f^n ; f^{n-1}]`. With latent prior covariances `C_{p,q}(x, x')`
//! between outputs, bilinearity of covariance gives the blocks
//!
//! ```text
//! K[f_p^n,     f_q^n]     = C_{p,q}
//! K[f_p^n,     f_q^{n-1}] = Σ_o  L_{q,o,x'} C_{p,o}
//! K[f_p^{n-1}, f_q^{n-1}] = Σ_{o,o'} L_{p,o,x} L_{q,o',x'} C_{o,o'}
//! ```
//!
//! where `L_{q,o}` is the piece of row `q` acting on output `o`. Scalar
//! families use a single output with `C = k`; the Schrödinger split (u, v)
//! uses two independent kernels; the 2D Navier-Stokes prior derives (u, v)
//! from a stream function and routes the pressure gradient through a latent
//! third output that is never observed.
//!
//! Entries are evaluated through per-dimension tables of scaled Hermite
//! factors sharing one Gaussian envelope per point pair, so each extra
//! operator term costs a few multiplies rather than a fresh `exp`.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::CoreError;
use crate::fmath;
use crate::kernel::{se_eval, ArdSeKernelParams, MAX_TOTAL_ORDER};
use crate::linalg::{cholesky_with_jitter, CholeskyFactor, DenseMatrix};
use crate::operator::{build_linearized, Coeff, ModelFamily, ModelSpec, OperatorRow};
use crate::spectral::{
    spectral_cross_cov, spectral_self_cov, FourierSymbol, QuadratureRule,
};

/// Relative jitter at the first Cholesky attempt.
pub const JITTER_BASE_REL: f64 = 1e-10;
/// Relative jitter cap; exceeding it makes assembly degenerate.
pub const JITTER_CAP_REL: f64 = 1e-4;

/// Time level of a block of observations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeLevel {
    Current,
    Previous,
}

/// Two field snapshots Δt apart on scattered locations.
///
/// Locations are stored flat, row-major (`n · dim` values); field values are
/// stored per output. `dt = 0` is admitted so degenerate-limit reductions can
/// be exercised; training paths require `dt > 0`.
#[derive(Debug, Clone)]
pub struct SnapshotPair {
    x_prev: Vec<f64>,
    h_prev: Vec<Vec<f64>>,
    x_curr: Vec<f64>,
    h_curr: Vec<Vec<f64>>,
    dt: f64,
    dim: usize,
    field_labels: Vec<String>,
}

impl SnapshotPair {
    pub fn new(
        x_prev: Vec<f64>,
        h_prev: Vec<Vec<f64>>,
        x_curr: Vec<f64>,
        h_curr: Vec<Vec<f64>>,
        dt: f64,
        dim: usize,
        field_labels: Vec<String>,
    ) -> Result<Self, CoreError> {
        if dim == 0 {
            return Err(CoreError::InvalidParameter("dim must be at least 1"));
        }
        if !(dt >= 0.0) || !dt.is_finite() {
            return Err(CoreError::InvalidParameter("dt must be finite and non-negative"));
        }
        let q = field_labels.len();
        if q == 0 {
            return Err(CoreError::InvalidInput("at least one output field is required"));
        }
        if h_prev.len() != q || h_curr.len() != q {
            return Err(CoreError::DimensionMismatch { expected: q, got: h_prev.len() });
        }
        for (x, h) in [(&x_prev, &h_prev), (&x_curr, &h_curr)] {
            if x.is_empty() || x.len() % dim != 0 {
                return Err(CoreError::InvalidInput(
                    "locations must be a nonempty multiple of dim",
                ));
            }
            let n = x.len() / dim;
            if h.iter().any(|col| col.len() != n) {
                return Err(CoreError::InvalidInput("field values disagree with point count"));
            }
            if x.iter().any(|v| !v.is_finite())
                || h.iter().any(|col| col.iter().any(|v| !v.is_finite()))
            {
                return Err(CoreError::InvalidInput("snapshot values must be finite"));
            }
        }
        Ok(Self { x_prev, h_prev, x_curr, h_curr, dt, dim, field_labels })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn outputs(&self) -> usize {
        self.field_labels.len()
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn n_prev(&self) -> usize {
        self.x_prev.len() / self.dim
    }

    pub fn n_curr(&self) -> usize {
        self.x_curr.len() / self.dim
    }

    pub fn x_prev(&self) -> &[f64] {
        &self.x_prev
    }

    pub fn x_curr(&self) -> &[f64] {
        &self.x_curr
    }

    pub fn h_prev(&self, output: usize) -> &[f64] {
        &self.h_prev[output]
    }

    pub fn h_curr(&self, output: usize) -> &[f64] {
        &self.h_curr[output]
    }

    pub fn field_labels(&self) -> &[String] {
        &self.field_labels
    }

    fn points(&self, level: TimeLevel) -> (&[f64], usize) {
        match level {
            TimeLevel::Current => (&self.x_curr, self.n_curr()),
            TimeLevel::Previous => (&self.x_prev, self.n_prev()),
        }
    }

    fn values(&self, output: usize, level: TimeLevel) -> &[f64] {
        match level {
            TimeLevel::Current => &self.h_curr[output],
            TimeLevel::Previous => &self.h_prev[output],
        }
    }
}

/// One contiguous block of the stacked observation vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockInfo {
    pub output: usize,
    pub level: TimeLevel,
    pub offset: usize,
    pub len: usize,
}

/// Stacking order of the joint matrix: all outputs at the current level
/// first, then all outputs at the previous level.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockLayout {
    blocks: Vec<BlockInfo>,
    total: usize,
}

impl BlockLayout {
    /// Layout the given pair's observations will be stacked into.
    pub fn for_pair(pair: &SnapshotPair) -> Self {
        Self::two_level(pair.outputs(), pair.n_curr(), pair.n_prev())
    }

    /// Single-block layout for a covariance not tied to snapshots.
    pub fn single(n: usize) -> Self {
        Self {
            blocks: vec![BlockInfo { output: 0, level: TimeLevel::Current, offset: 0, len: n }],
            total: n,
        }
    }

    fn two_level(outputs: usize, n_curr: usize, n_prev: usize) -> Self {
        let mut blocks = Vec::with_capacity(2 * outputs);
        let mut offset = 0;
        for (level, len) in [(TimeLevel::Current, n_curr), (TimeLevel::Previous, n_prev)] {
            for output in 0..outputs {
                blocks.push(BlockInfo { output, level, offset, len });
                offset += len;
            }
        }
        Self { blocks, total: offset }
    }

    pub fn blocks(&self) -> &[BlockInfo] {
        &self.blocks
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn block(&self, output: usize, level: TimeLevel) -> Option<&BlockInfo> {
        self.blocks.iter().find(|b| b.output == output && b.level == level)
    }
}

/// Stack the observed field values in the layout's block order.
pub fn stacked_observations(pair: &SnapshotPair, layout: &BlockLayout) -> Vec<f64> {
    let mut out = Vec::with_capacity(layout.total());
    for b in layout.blocks() {
        out.extend_from_slice(pair.values(b.output, b.level));
    }
    out
}

/// Assembled joint covariance with its Cholesky factor.
#[derive(Debug, Clone)]
pub struct JointCovariance {
    matrix: DenseMatrix,
    layout: BlockLayout,
    factor: CholeskyFactor,
}

impl JointCovariance {
    /// Wrap an externally built symmetric matrix, applying the standard
    /// jitter policy.
    pub fn from_dense(matrix: DenseMatrix) -> Result<Self, CoreError> {
        let layout = BlockLayout::single(matrix.n());
        finish(matrix, layout, 0.0)
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.matrix
    }

    pub fn layout(&self) -> &BlockLayout {
        &self.layout
    }

    pub fn jitter_applied(&self) -> f64 {
        self.factor.jitter
    }

    pub fn factor(&self) -> &CholeskyFactor {
        &self.factor
    }

    pub fn dim(&self) -> usize {
        self.matrix.n()
    }
}

/// Latent prior covariance `C_{p,q} = sign · ∂^{extra_left}_x ∂^{extra_right}_{x'}
/// k_{kernel}(x, x')`; absent entries are identically zero (independence).
#[derive(Debug, Clone)]
struct PriorBlock {
    sign: f64,
    extra_left: Vec<usize>,
    extra_right: Vec<usize>,
    kernel: usize,
}

struct LatentPrior {
    outputs: usize,
    blocks: Vec<Option<PriorBlock>>,
}

impl LatentPrior {
    fn independent(outputs: usize, dim: usize) -> Self {
        let mut blocks = vec![None; outputs * outputs];
        for q in 0..outputs {
            blocks[q * outputs + q] = Some(PriorBlock {
                sign: 1.0,
                extra_left: vec![0; dim],
                extra_right: vec![0; dim],
                kernel: q,
            });
        }
        Self { outputs, blocks }
    }

    /// Stream-function velocity prior plus an independent pressure kernel:
    /// u = ψ_y, v = -ψ_x, so C_uu = ∂_y∂_{y'}k_ψ, C_uv = -∂_y∂_{x'}k_ψ,
    /// C_vu = -∂_x∂_{y'}k_ψ, C_vv = ∂_x∂_{x'}k_ψ; output 2 is the pressure
    /// with kernel 1 and no velocity correlation.
    fn stream_function_2d() -> Self {
        let entry = |sign: f64, el: [usize; 2], er: [usize; 2]| {
            Some(PriorBlock {
                sign,
                extra_left: el.to_vec(),
                extra_right: er.to_vec(),
                kernel: 0,
            })
        };
        let blocks = vec![
            entry(1.0, [0, 1], [0, 1]),  // (u, u)
            entry(-1.0, [0, 1], [1, 0]), // (u, v)
            None,                        // (u, p)
            entry(-1.0, [1, 0], [0, 1]), // (v, u)
            entry(1.0, [1, 0], [1, 0]),  // (v, v)
            None,                        // (v, p)
            None,
            None,
            Some(PriorBlock {
                sign: 1.0,
                extra_left: vec![0, 0],
                extra_right: vec![0, 0],
                kernel: 1,
            }), // (p, p)
        ];
        Self { outputs: 3, blocks }
    }

    fn get(&self, p: usize, q: usize) -> Option<&PriorBlock> {
        self.blocks[p * self.outputs + q].as_ref()
    }
}

/// Per-dimension tables `t_p(a_d, r_d)` over one (left set, right set) pair
/// plus the shared envelope `γ²·exp(-Σ a_d r_d²)`, giving any mixed partial
/// `∂^m_x ∂^n_{x'} k` as `env · Π_d (-1)^{m_d} t_{m_d+n_d}`.
struct PartialTable {
    n_right: usize,
    env: Vec<f64>,
    // orders[d][p-1] holds t_p; t_0 = 1 is implicit
    orders: Vec<Vec<Vec<f64>>>,
}

impl PartialTable {
    fn new(
        left: &[f64],
        n_left: usize,
        right: &[f64],
        n_right: usize,
        params: &ArdSeKernelParams,
        max_order: &[usize],
    ) -> Self {
        let dim = params.dim();
        let gamma2 = params.gamma() * params.gamma();
        let total = n_left * n_right;
        let mut r = vec![vec![0.0; total]; dim];
        let mut env_exponent = vec![0.0; total];
        let mut a = vec![0.0; dim];
        for d in 0..dim {
            let w = params.weights()[d];
            a[d] = 0.5 * w * w;
            let rd = &mut r[d];
            for i in 0..n_left {
                let xi = left[i * dim + d];
                for j in 0..n_right {
                    let diff = xi - right[j * dim + d];
                    let idx = i * n_right + j;
                    rd[idx] = diff;
                    env_exponent[idx] += a[d] * diff * diff;
                }
            }
        }
        let env: Vec<f64> =
            env_exponent.iter().map(|e| gamma2 * fmath::exp(-e)).collect();
        let mut orders = Vec::with_capacity(dim);
        for d in 0..dim {
            let mut tables: Vec<Vec<f64>> = Vec::with_capacity(max_order[d]);
            for p in 1..=max_order[d] {
                let mut t = vec![0.0; total];
                if p == 1 {
                    for idx in 0..total {
                        t[idx] = 2.0 * a[d] * r[d][idx];
                    }
                } else {
                    let (lo, hi) = tables.split_at(p - 2);
                    let prev = &hi[0];
                    // t_1 has no predecessor table; t_0 = 1
                    for idx in 0..total {
                        let older = if p == 2 { 1.0 } else { lo[p - 3][idx] };
                        t[idx] = 2.0 * a[d]
                            * (r[d][idx] * prev[idx] - (p as f64 - 1.0) * older);
                    }
                }
                tables.push(t);
            }
            orders.push(tables);
        }
        Self { n_right, env, orders }
    }

    #[inline]
    fn eval(&self, i: usize, j: usize, left: &[usize], right: &[usize]) -> f64 {
        let idx = i * self.n_right + j;
        let mut v = self.env[idx];
        for (d, tables) in self.orders.iter().enumerate() {
            let m = left[d];
            let p = m + right[d];
            if p > 0 {
                let f = tables[p - 1][idx];
                v *= if m % 2 == 1 { -f } else { f };
            }
        }
        v
    }
}

/// One additive term of a block: `sign · c_left(i) · c_right(j) ·
/// ∂^{left}∂^{right} k_{kernel}` with combined derivative orders.
struct Contribution<'a> {
    sign: f64,
    left_coeff: Option<&'a Coeff>,
    right_coeff: Option<&'a Coeff>,
    left_orders: Vec<usize>,
    right_orders: Vec<usize>,
    kernel: usize,
}

#[inline]
fn coeff_value(c: Option<&Coeff>, idx: usize) -> f64 {
    match c {
        None => 1.0,
        Some(Coeff::Constant(v)) => *v,
        Some(Coeff::PerPoint(vals)) => vals[idx],
    }
}

fn add_orders(a: &[usize], b: &[usize]) -> Result<Vec<usize>, CoreError> {
    let mut out = Vec::with_capacity(a.len());
    for (x, y) in a.iter().zip(b) {
        let s = x + y;
        if s > MAX_TOTAL_ORDER {
            return Err(CoreError::UnsupportedOrder { order: s, max: MAX_TOTAL_ORDER });
        }
        out.push(s);
    }
    Ok(out)
}

/// Collect the additive terms of block (row block, col block).
fn block_contributions<'a>(
    rows: &'a [OperatorRow],
    prior: &'a LatentPrior,
    row_b: &BlockInfo,
    col_b: &BlockInfo,
    dim: usize,
) -> Result<Vec<Contribution<'a>>, CoreError> {
    let zero = vec![0usize; dim];
    let mut out = Vec::new();
    match (row_b.level, col_b.level) {
        (TimeLevel::Current, TimeLevel::Current) => {
            if let Some(pb) = prior.get(row_b.output, col_b.output) {
                out.push(Contribution {
                    sign: pb.sign,
                    left_coeff: None,
                    right_coeff: None,
                    left_orders: pb.extra_left.clone(),
                    right_orders: pb.extra_right.clone(),
                    kernel: pb.kernel,
                });
            }
        }
        (TimeLevel::Current, TimeLevel::Previous) => {
            for piece in rows[col_b.output].pieces() {
                let Some(pb) = prior.get(row_b.output, piece.output_index()) else {
                    continue;
                };
                for term in piece.terms() {
                    out.push(Contribution {
                        sign: pb.sign,
                        left_coeff: None,
                        right_coeff: Some(term.coeff()),
                        left_orders: pb.extra_left.clone(),
                        right_orders: add_orders(&pb.extra_right, term.deriv_orders())?,
                        kernel: pb.kernel,
                    });
                }
            }
        }
        (TimeLevel::Previous, TimeLevel::Current) => {
            for piece in rows[row_b.output].pieces() {
                let Some(pb) = prior.get(piece.output_index(), col_b.output) else {
                    continue;
                };
                for term in piece.terms() {
                    out.push(Contribution {
                        sign: pb.sign,
                        left_coeff: Some(term.coeff()),
                        right_coeff: None,
                        left_orders: add_orders(&pb.extra_left, term.deriv_orders())?,
                        right_orders: pb.extra_right.clone(),
                        kernel: pb.kernel,
                    });
                }
            }
        }
        (TimeLevel::Previous, TimeLevel::Previous) => {
            for piece_l in rows[row_b.output].pieces() {
                for piece_r in rows[col_b.output].pieces() {
                    let Some(pb) =
                        prior.get(piece_l.output_index(), piece_r.output_index())
                    else {
                        continue;
                    };
                    for tl in piece_l.terms() {
                        for tr in piece_r.terms() {
                            out.push(Contribution {
                                sign: pb.sign,
                                left_coeff: Some(tl.coeff()),
                                right_coeff: Some(tr.coeff()),
                                left_orders: add_orders(&pb.extra_left, tl.deriv_orders())?,
                                right_orders: add_orders(&pb.extra_right, tr.deriv_orders())?,
                                kernel: pb.kernel,
                            });
                        }
                    }
                }
            }
        }
    }
    let _ = zero;
    Ok(out)
}

/// Assemble the joint matrix from linearized rows and a latent prior.
fn assemble_generic(
    rows: &[OperatorRow],
    prior: &LatentPrior,
    kernels: &[ArdSeKernelParams],
    sigma2: f64,
    pair: &SnapshotPair,
) -> Result<JointCovariance, CoreError> {
    if !(sigma2 >= 0.0) || !sigma2.is_finite() {
        return Err(CoreError::InvalidParameter("sigma2 must be finite and non-negative"));
    }
    let dim = pair.dim();
    for k in kernels {
        if k.dim() != dim {
            return Err(CoreError::DimensionMismatch { expected: dim, got: k.dim() });
        }
    }
    for row in rows {
        for piece in row.pieces() {
            for term in piece.terms() {
                if let Coeff::PerPoint(vals) = term.coeff() {
                    if vals.len() != pair.n_prev() {
                        return Err(CoreError::DimensionMismatch {
                            expected: pair.n_prev(),
                            got: vals.len(),
                        });
                    }
                }
            }
        }
    }
    let layout = BlockLayout::two_level(pair.outputs(), pair.n_curr(), pair.n_prev());
    let n = layout.total();
    let mut matrix = DenseMatrix::zeros(n);

    // per-kernel per-dim maximum derivative order, then one table per
    // (kernel, level pair) actually used
    let n_blocks = layout.blocks().len();
    let mut all_contribs: Vec<Vec<Contribution>> =
        Vec::with_capacity(n_blocks * n_blocks);
    for row_b in layout.blocks() {
        for col_b in layout.blocks() {
            all_contribs.push(block_contributions(rows, prior, row_b, col_b, dim)?);
        }
    }
    let mut max_order = vec![vec![0usize; dim]; kernels.len()];
    let mut used = vec![[false; 4]; kernels.len()];
    let level_idx = |a: TimeLevel, b: TimeLevel| match (a, b) {
        (TimeLevel::Current, TimeLevel::Current) => 0usize,
        (TimeLevel::Current, TimeLevel::Previous) => 1,
        (TimeLevel::Previous, TimeLevel::Current) => 2,
        (TimeLevel::Previous, TimeLevel::Previous) => 3,
    };
    for (bi, row_b) in layout.blocks().iter().enumerate() {
        for (bj, col_b) in layout.blocks().iter().enumerate() {
            for c in &all_contribs[bi * n_blocks + bj] {
                used[c.kernel][level_idx(row_b.level, col_b.level)] = true;
                for d in 0..dim {
                    let total = c.left_orders[d] + c.right_orders[d];
                    if total > MAX_TOTAL_ORDER {
                        return Err(CoreError::UnsupportedOrder {
                            order: total,
                            max: MAX_TOTAL_ORDER,
                        });
                    }
                    max_order[c.kernel][d] = max_order[c.kernel][d].max(total);
                }
            }
        }
    }
    let mut tables: Vec<[Option<PartialTable>; 4]> = Vec::with_capacity(kernels.len());
    for (k, kparams) in kernels.iter().enumerate() {
        let mut set: [Option<PartialTable>; 4] = [None, None, None, None];
        for li in 0..4usize {
            if !used[k][li] {
                continue;
            }
            let (left_level, right_level) = match li {
                0 => (TimeLevel::Current, TimeLevel::Current),
                1 => (TimeLevel::Current, TimeLevel::Previous),
                2 => (TimeLevel::Previous, TimeLevel::Current),
                _ => (TimeLevel::Previous, TimeLevel::Previous),
            };
            let (lx, ln) = pair.points(left_level);
            let (rx, rn) = pair.points(right_level);
            set[li] =
                Some(PartialTable::new(lx, ln, rx, rn, kparams, &max_order[k]));
        }
        tables.push(set);
    }

    for (bi, row_b) in layout.blocks().iter().enumerate() {
        for (bj, col_b) in layout.blocks().iter().enumerate() {
            let contribs = &all_contribs[bi * n_blocks + bj];
            if contribs.is_empty() {
                continue;
            }
            let li = level_idx(row_b.level, col_b.level);
            for c in contribs {
                let table = tables[c.kernel][li]
                    .as_ref()
                    .expect("table built for every used level pair");
                for i in 0..row_b.len {
                    let row_off = (row_b.offset + i) * n + col_b.offset;
                    let cl = c.sign * coeff_value(c.left_coeff, i);
                    if cl == 0.0 {
                        continue;
                    }
                    for j in 0..col_b.len {
                        let v = cl
                            * coeff_value(c.right_coeff, j)
                            * table.eval(i, j, &c.left_orders, &c.right_orders);
                        matrix.data_mut()[row_off + j] += v;
                    }
                }
            }
        }
    }

    finish(matrix, layout, sigma2)
}

fn finish(
    mut matrix: DenseMatrix,
    layout: BlockLayout,
    sigma2: f64,
) -> Result<JointCovariance, CoreError> {
    matrix.add_diagonal(sigma2);
    if matrix.max_asymmetry() > 1e-12 * matrix.mean_diagonal().abs().max(1.0) {
        return Err(CoreError::InvalidInput("assembled covariance lost symmetry"));
    }
    let factor = cholesky_with_jitter(&matrix, JITTER_BASE_REL, JITTER_CAP_REL)?;
    Ok(JointCovariance { matrix, layout, factor })
}

fn expect_family(model: &ModelSpec, allowed: &[ModelFamily]) -> Result<(), CoreError> {
    if allowed.contains(&model.family) {
        Ok(())
    } else {
        Err(CoreError::UnsupportedModel(model.family.name()))
    }
}

fn check_pair(model: &ModelSpec, pair: &SnapshotPair) -> Result<(), CoreError> {
    if pair.dim() != model.dim() {
        return Err(CoreError::DimensionMismatch { expected: model.dim(), got: pair.dim() });
    }
    if pair.outputs() != model.outputs() {
        return Err(CoreError::DimensionMismatch {
            expected: model.outputs(),
            got: pair.outputs(),
        });
    }
    Ok(())
}

/// Joint covariance of a single-output differential family
/// (Burgers / KdV / Kuramoto-Sivashinsky).
pub fn assemble_scalar(
    model: &ModelSpec,
    theta: &ArdSeKernelParams,
    sigma2: f64,
    pair: &SnapshotPair,
) -> Result<JointCovariance, CoreError> {
    expect_family(model, &[ModelFamily::Burgers, ModelFamily::Kdv, ModelFamily::Ks])?;
    check_pair(model, pair)?;
    let rows = build_linearized(model, pair.dt(), &[pair.h_prev(0)])?;
    let prior = LatentPrior::independent(1, pair.dim());
    assemble_generic(&rows, &prior, core::slice::from_ref(theta), sigma2, pair)
}

/// Joint covariance of the Schrödinger real/imaginary split with independent
/// kernels for u and v.
pub fn assemble_nls(
    model: &ModelSpec,
    theta_u: &ArdSeKernelParams,
    theta_v: &ArdSeKernelParams,
    sigma2: f64,
    pair: &SnapshotPair,
) -> Result<JointCovariance, CoreError> {
    expect_family(model, &[ModelFamily::Nls])?;
    check_pair(model, pair)?;
    let rows = build_linearized(model, pair.dt(), &[pair.h_prev(0), pair.h_prev(1)])?;
    let prior = LatentPrior::independent(2, pair.dim());
    assemble_generic(&rows, &prior, &[theta_u.clone(), theta_v.clone()], sigma2, pair)
}

/// Joint covariance of 2D incompressible flow: divergence-free velocity prior
/// from a stream-function kernel, pressure folded in as a latent output.
pub fn assemble_ns(
    model: &ModelSpec,
    theta_psi: &ArdSeKernelParams,
    theta_p: &ArdSeKernelParams,
    sigma2: f64,
    pair: &SnapshotPair,
) -> Result<JointCovariance, CoreError> {
    expect_family(model, &[ModelFamily::Ns2d])?;
    check_pair(model, pair)?;
    let rows = build_linearized(model, pair.dt(), &[pair.h_prev(0), pair.h_prev(1)])?;
    let prior = LatentPrior::stream_function_2d();
    assemble_generic(&rows, &prior, &[theta_psi.clone(), theta_p.clone()], sigma2, pair)
}

/// Joint covariance of a fractional-order family, with cross and
/// previous-level blocks evaluated in the spectral domain.
pub fn assemble_fractional(
    model: &ModelSpec,
    theta: &ArdSeKernelParams,
    sigma2: f64,
    pair: &SnapshotPair,
    rule: &QuadratureRule,
) -> Result<JointCovariance, CoreError> {
    expect_family(
        model,
        &[ModelFamily::FractionalRl, ModelFamily::FractionalLaplacian],
    )?;
    check_pair(model, pair)?;
    if !(sigma2 >= 0.0) || !sigma2.is_finite() {
        return Err(CoreError::InvalidParameter("sigma2 must be finite and non-negative"));
    }
    if theta.dim() != 1 {
        return Err(CoreError::DimensionMismatch { expected: 1, got: theta.dim() });
    }
    let symbol = if pair.dt() == 0.0 {
        FourierSymbol::Identity
    } else {
        match model.family {
            ModelFamily::FractionalRl => FourierSymbol::riemann_liouville(
                model.lambda[0],
                model.lambda[1],
                pair.dt(),
            )?,
            _ => FourierSymbol::fractional_laplacian(model.lambda[0], pair.dt())?,
        }
    };
    let layout = BlockLayout::two_level(1, pair.n_curr(), pair.n_prev());
    let n = layout.total();
    let nc = pair.n_curr();
    let np = pair.n_prev();
    let mut matrix = DenseMatrix::zeros(n);
    for i in 0..nc {
        for j in 0..nc {
            let v = se_eval(&pair.x_curr()[i..=i], &pair.x_curr()[j..=j], theta)?;
            matrix.set(i, j, v);
        }
    }
    // identical lags repeat heavily on gridded data; memoize on the signed lag
    let mut cross_memo: Vec<(u64, f64)> = Vec::new();
    let mut self_memo: Vec<(u64, f64)> = Vec::new();
    let lookup = |memo: &mut Vec<(u64, f64)>,
                      xl: f64,
                      xr: f64,
                      is_cross: bool|
     -> Result<f64, CoreError> {
        let r = xl - xr;
        let key = r.to_bits();
        if let Some((_, v)) = memo.iter().find(|(k, _)| *k == key) {
            return Ok(*v);
        }
        let v = if is_cross {
            spectral_cross_cov(xl, xr, theta, &symbol, rule)?.value
        } else {
            spectral_self_cov(xl, xr, theta, &symbol, rule)?.value
        };
        memo.push((key, v));
        Ok(v)
    };
    for i in 0..nc {
        let xc = pair.x_curr()[i];
        for j in 0..np {
            let xp = pair.x_prev()[j];
            let v = lookup(&mut cross_memo, xc, xp, true)?;
            matrix.set(i, nc + j, v);
            matrix.set(nc + j, i, v);
        }
    }
    for i in 0..np {
        let xi = pair.x_prev()[i];
        for j in 0..np {
            let v = lookup(&mut self_memo, xi, pair.x_prev()[j], false)?;
            matrix.set(nc + i, nc + j, v);
        }
    }
    finish(matrix, layout, sigma2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operator::{apply_left_right, apply_right};
    use alloc::string::ToString;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn labels(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    fn scalar_pair(rng: &mut ChaCha8Rng, n_prev: usize, n_curr: usize, dt: f64) -> SnapshotPair {
        let x_prev: Vec<f64> = (0..n_prev).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let x_curr: Vec<f64> = (0..n_curr).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let h_prev: Vec<f64> = (0..n_prev).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let h_curr: Vec<f64> = (0..n_curr).map(|_| rng.gen_range(-1.0..1.0)).collect();
        SnapshotPair::new(x_prev, vec![h_prev], x_curr, vec![h_curr], dt, 1, labels(&["h"]))
            .unwrap()
    }

    fn to_na(m: &DenseMatrix) -> DMatrix<f64> {
        DMatrix::from_fn(m.n(), m.n(), |i, j| m.get(i, j))
    }

    fn min_eig(m: &DenseMatrix) -> f64 {
        to_na(m).symmetric_eigen().eigenvalues.min()
    }

    #[test]
    fn pair_validation() {
        assert!(SnapshotPair::new(
            vec![0.0],
            vec![vec![1.0]],
            vec![1.0],
            vec![vec![2.0]],
            0.1,
            1,
            labels(&["h"]),
        )
        .is_ok());
        // negative dt
        assert!(SnapshotPair::new(
            vec![0.0],
            vec![vec![1.0]],
            vec![1.0],
            vec![vec![2.0]],
            -0.1,
            1,
            labels(&["h"]),
        )
        .is_err());
        // value count mismatch
        assert!(SnapshotPair::new(
            vec![0.0, 1.0],
            vec![vec![1.0]],
            vec![1.0],
            vec![vec![2.0]],
            0.1,
            1,
            labels(&["h"]),
        )
        .is_err());
        // non-finite field
        assert!(SnapshotPair::new(
            vec![0.0],
            vec![vec![f64::NAN]],
            vec![1.0],
            vec![vec![2.0]],
            0.1,
            1,
            labels(&["h"]),
        )
        .is_err());
    }

    #[test]
    fn single_point_identity_closed_form() {
        let model = ModelSpec::new(ModelFamily::Burgers, vec![1.0, 0.1]).unwrap();
        let pair = SnapshotPair::new(
            vec![0.3],
            vec![vec![0.5]],
            vec![0.3],
            vec![vec![0.4]],
            0.0,
            1,
            labels(&["h"]),
        )
        .unwrap();
        let theta = ArdSeKernelParams::new(1.5, vec![0.7]).unwrap();
        let cov = assemble_scalar(&model, &theta, 0.25, &pair).unwrap();
        let g2 = 1.5 * 1.5;
        assert!((cov.matrix().get(0, 0) - (g2 + 0.25)).abs() < 1e-12);
        assert!((cov.matrix().get(0, 1) - g2).abs() < 1e-12);
        assert!((cov.matrix().get(1, 0) - g2).abs() < 1e-12);
        assert!((cov.matrix().get(1, 1) - (g2 + 0.25)).abs() < 1e-12);
    }

    #[test]
    fn zero_dt_blocks_reduce_to_plain_gram() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pair = scalar_pair(&mut rng, 4, 5, 0.0);
        let theta = ArdSeKernelParams::new(1.1, vec![0.9]).unwrap();
        let model = ModelSpec::new(ModelFamily::Ks, vec![1.0, 1.0, 1.0]).unwrap();
        let cov = assemble_scalar(&model, &theta, 0.3, &pair).unwrap();
        let xs = [pair.x_curr(), pair.x_prev()];
        let offs = [0usize, pair.n_curr()];
        for bi in 0..2 {
            for bj in 0..2 {
                for i in 0..xs[bi].len() {
                    for j in 0..xs[bj].len() {
                        let mut want =
                            se_eval(&xs[bi][i..=i], &xs[bj][j..=j], &theta).unwrap();
                        if bi == bj && i == j {
                            want += 0.3;
                        }
                        let got = cov.matrix().get(offs[bi] + i, offs[bj] + j);
                        assert!((got - want).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn scalar_blocks_match_direct_operator_application() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for family in [ModelFamily::Burgers, ModelFamily::Kdv, ModelFamily::Ks] {
            let lambda: Vec<f64> =
                (0..family.lambda_len()).map(|_| rng.gen_range(0.2..1.2)).collect();
            let model = ModelSpec::new(family, lambda).unwrap();
            let pair = scalar_pair(&mut rng, 4, 3, 0.07);
            let theta = ArdSeKernelParams::new(
                rng.gen_range(0.5..1.5),
                vec![rng.gen_range(0.5..1.5)],
            )
            .unwrap();
            let cov = assemble_scalar(&model, &theta, 0.0, &pair).unwrap();
            let rows = build_linearized(&model, pair.dt(), &[pair.h_prev(0)]).unwrap();
            let op = &rows[0].pieces()[0];
            let nc = pair.n_curr();
            for i in 0..nc {
                for j in 0..pair.n_prev() {
                    let want = apply_right(
                        op,
                        &theta,
                        &pair.x_curr()[i..=i],
                        &pair.x_prev()[j..=j],
                        j,
                    )
                    .unwrap();
                    assert!((cov.matrix().get(i, nc + j) - want).abs() < 1e-11);
                }
            }
            for i in 0..pair.n_prev() {
                for j in 0..pair.n_prev() {
                    let want = apply_left_right(
                        op,
                        op,
                        &theta,
                        &pair.x_prev()[i..=i],
                        &pair.x_prev()[j..=j],
                        i,
                        j,
                    )
                    .unwrap();
                    assert!((cov.matrix().get(nc + i, nc + j) - want).abs() < 1e-11);
                }
            }
        }
    }

    #[test]
    fn assembled_matrices_symmetric_and_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let model = ModelSpec::new(ModelFamily::Burgers, vec![1.0, 0.1]).unwrap();
        for _ in 0..10 {
            let pair = scalar_pair(&mut rng, 3, 3, 0.1);
            let theta = ArdSeKernelParams::new(
                rng.gen_range(0.5..2.0),
                vec![rng.gen_range(0.3..2.0)],
            )
            .unwrap();
            let cov = assemble_scalar(&model, &theta, 1e-4, &pair).unwrap();
            assert!(cov.matrix().max_asymmetry() <= 1e-12);
            assert!(min_eig(cov.matrix()) >= -1e-8);
            assert!(cov.jitter_applied() <= 1e-6 * cov.matrix().mean_diagonal());
        }
    }

    #[test]
    fn cross_level_blocks_are_transposes() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let model = ModelSpec::new(ModelFamily::Kdv, vec![6.0, 1.0]).unwrap();
        let pair = scalar_pair(&mut rng, 5, 4, 0.05);
        let theta = ArdSeKernelParams::new(1.0, vec![1.0]).unwrap();
        let cov = assemble_scalar(&model, &theta, 1e-6, &pair).unwrap();
        let nc = pair.n_curr();
        for i in 0..nc {
            for j in 0..pair.n_prev() {
                assert_eq!(cov.matrix().get(i, nc + j), cov.matrix().get(nc + j, i));
            }
        }
    }

    #[test]
    fn permuting_points_permutes_entries() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let model = ModelSpec::new(ModelFamily::Burgers, vec![0.8, 0.2]).unwrap();
        let theta = ArdSeKernelParams::new(1.0, vec![1.2]).unwrap();
        let n = 5;
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let h: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let xc: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let hc: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let perm = [2usize, 0, 4, 1, 3];
        let xp: Vec<f64> = perm.iter().map(|&i| x[i]).collect();
        let hp: Vec<f64> = perm.iter().map(|&i| h[i]).collect();
        let pair_a = SnapshotPair::new(
            x.clone(),
            vec![h.clone()],
            xc.clone(),
            vec![hc.clone()],
            0.1,
            1,
            labels(&["h"]),
        )
        .unwrap();
        let pair_b =
            SnapshotPair::new(xp, vec![hp], xc, vec![hc], 0.1, 1, labels(&["h"])).unwrap();
        let cov_a = assemble_scalar(&model, &theta, 1e-4, &pair_a).unwrap();
        let cov_b = assemble_scalar(&model, &theta, 1e-4, &pair_b).unwrap();
        // previous-level block starts after the current block in both
        for i in 0..n {
            for j in 0..n {
                let a = cov_a.matrix().get(n + perm[i], n + perm[j]);
                let b = cov_b.matrix().get(n + i, n + j);
                assert!((a - b).abs() < 1e-14);
                let a = cov_a.matrix().get(i, n + perm[j]);
                let b = cov_b.matrix().get(i, n + j);
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    fn nls_pair(rng: &mut ChaCha8Rng, n: usize, dt: f64) -> SnapshotPair {
        let x_prev: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let x_curr: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let col = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
        };
        let (up, vp, uc, vc) = (col(rng), col(rng), col(rng), col(rng));
        SnapshotPair::new(
            x_prev,
            vec![up, vp],
            x_curr,
            vec![uc, vc],
            dt,
            1,
            labels(&["u", "v"]),
        )
        .unwrap()
    }

    #[test]
    fn nls_zero_dt_is_block_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(66);
        let pair = nls_pair(&mut rng, 3, 0.0);
        let model = ModelSpec::new(ModelFamily::Nls, vec![0.5, 1.0]).unwrap();
        let tu = ArdSeKernelParams::new(1.0, vec![0.8]).unwrap();
        let tv = ArdSeKernelParams::new(1.3, vec![1.1]).unwrap();
        let cov = assemble_nls(&model, &tu, &tv, 0.2, &pair).unwrap();
        let n = 3;
        // layout: u^n, v^n, u^{n-1}, v^{n-1}; mixed (u, v) blocks vanish
        for i in 0..n {
            for j in 0..n {
                assert_eq!(cov.matrix().get(i, n + j), 0.0);
                assert_eq!(cov.matrix().get(i, 3 * n + j), 0.0);
                assert_eq!(cov.matrix().get(n + i, 2 * n + j), 0.0);
                assert_eq!(cov.matrix().get(2 * n + i, 3 * n + j), 0.0);
            }
        }
        // u-u cross-level block is the plain u kernel over (curr, prev)
        for i in 0..n {
            for j in 0..n {
                let want =
                    se_eval(&pair.x_curr()[i..=i], &pair.x_prev()[j..=j], &tu).unwrap();
                assert!((cov.matrix().get(i, 2 * n + j) - want).abs() < 1e-13);
            }
        }
    }

    /// Hand-built blocks for the linear part (λ₂ = 0): rows reduce to
    /// u^{n-1} = u^n + Δtλ₁∂²v^n and v^{n-1} = v^n - Δtλ₁∂²u^n.
    #[test]
    fn nls_linear_part_matches_hand_built_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let pair = nls_pair(&mut rng, 4, 0.08);
        let model = ModelSpec::new(ModelFamily::Nls, vec![0.7, 0.0]).unwrap();
        let tu = ArdSeKernelParams::new(1.0, vec![0.9]).unwrap();
        let tv = ArdSeKernelParams::new(1.2, vec![0.7]).unwrap();
        let cov = assemble_nls(&model, &tu, &tv, 0.0, &pair).unwrap();
        let n = 4;
        let b = 0.08 * 0.7;
        let d = |l: usize, r: usize, x: &[f64], y: &[f64], th: &ArdSeKernelParams| {
            use crate::kernel::{se_partial, DerivMultiIndexPair};
            let idx = DerivMultiIndexPair::new(vec![l], vec![r]).unwrap();
            se_partial(&idx, x, y, th).unwrap()
        };
        let (xc, xp) = (pair.x_curr(), pair.x_prev());
        for i in 0..n {
            for j in 0..n {
                let (xi, xj) = (&xc[i..=i], &xp[j..=j]);
                // K[u^n, u^{n-1}] = k_u; K[u^n, v^{n-1}] = -b ∂²_{x'} k_u
                let got = cov.matrix().get(i, 2 * n + j);
                assert!((got - se_eval(xi, xj, &tu).unwrap()).abs() < 1e-12);
                let got = cov.matrix().get(i, 3 * n + j);
                assert!((got - (-b) * d(0, 2, xi, xj, &tu)).abs() < 1e-12);
                // K[v^n, u^{n-1}] = b ∂²_{x'} k_v
                let got = cov.matrix().get(n + i, 2 * n + j);
                assert!((got - b * d(0, 2, xi, xj, &tv)).abs() < 1e-12);
                let (yi, yj) = (&xp[i..=i], &xp[j..=j]);
                // K[u^{n-1}, u^{n-1}] = k_u + b² ∂²∂²' k_v
                let got = cov.matrix().get(2 * n + i, 2 * n + j);
                let want = se_eval(yi, yj, &tu).unwrap() + b * b * d(2, 2, yi, yj, &tv);
                assert!((got - want).abs() < 1e-11);
                // K[u^{n-1}, v^{n-1}] = -b ∂²_{x'} k_u + b ∂²_x k_v
                let got = cov.matrix().get(2 * n + i, 3 * n + j);
                let want = -b * d(0, 2, yi, yj, &tu) + b * d(2, 0, yi, yj, &tv);
                assert!((got - want).abs() < 1e-11);
                // K[v^{n-1}, v^{n-1}] = k_v + b² ∂²∂²' k_u
                let got = cov.matrix().get(3 * n + i, 3 * n + j);
                let want = se_eval(yi, yj, &tv).unwrap() + b * b * d(2, 2, yi, yj, &tu);
                assert!((got - want).abs() < 1e-11);
            }
        }
    }

    #[test]
    fn nls_full_matrix_symmetric_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(88);
        let pair = nls_pair(&mut rng, 5, 0.1);
        let model = ModelSpec::new(ModelFamily::Nls, vec![0.5, 1.0]).unwrap();
        let tu = ArdSeKernelParams::new(0.9, vec![1.0]).unwrap();
        let tv = ArdSeKernelParams::new(1.1, vec![0.8]).unwrap();
        let cov = assemble_nls(&model, &tu, &tv, 1e-4, &pair).unwrap();
        assert!(cov.matrix().max_asymmetry() <= 1e-12);
        assert!(min_eig(cov.matrix()) >= -1e-8);
    }

    fn ns_pair(rng: &mut ChaCha8Rng, n: usize, dt: f64) -> SnapshotPair {
        let pts = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..2 * n).map(|_| rng.gen_range(-1.5..1.5)).collect()
        };
        let col = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
        };
        let (xp, xc) = (pts(rng), pts(rng));
        let (up, vp, uc, vc) = (col(rng), col(rng), col(rng), col(rng));
        SnapshotPair::new(xp, vec![up, vp], xc, vec![uc, vc], dt, 2, labels(&["u", "v"]))
            .unwrap()
    }

    #[test]
    fn ns_zero_dt_is_velocity_prior_without_pressure() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let pair = ns_pair(&mut rng, 4, 0.0);
        let model = ModelSpec::new(ModelFamily::Ns2d, vec![1.0, 0.01]).unwrap();
        let tpsi = ArdSeKernelParams::new(1.0, vec![0.8, 1.1]).unwrap();
        let tp = ArdSeKernelParams::new(2.0, vec![0.5, 0.6]).unwrap();
        let cov = assemble_ns(&model, &tpsi, &tp, 0.3, &pair).unwrap();
        // at dt = 0 every level pair carries the same stream-function prior
        // and the pressure kernel contributes nowhere
        use crate::kernel::{se_partial, DerivMultiIndexPair};
        let n = 4;
        let duu = DerivMultiIndexPair::new(vec![0, 1], vec![0, 1]).unwrap();
        let duv = DerivMultiIndexPair::new(vec![0, 1], vec![1, 0]).unwrap();
        for i in 0..n {
            for j in 0..n {
                let (xi, xj) =
                    (&pair.x_curr()[2 * i..2 * i + 2], &pair.x_prev()[2 * j..2 * j + 2]);
                let got_uu = cov.matrix().get(i, 2 * n + j);
                let want_uu = se_partial(&duu, xi, xj, &tpsi).unwrap();
                assert!((got_uu - want_uu).abs() < 1e-12);
                let got_uv = cov.matrix().get(i, 3 * n + j);
                let want_uv = -se_partial(&duv, xi, xj, &tpsi).unwrap();
                assert!((got_uv - want_uv).abs() < 1e-12);
            }
        }
        // changing the pressure kernel leaves the dt = 0 matrix unchanged
        let tp2 = ArdSeKernelParams::new(5.0, vec![2.0, 2.0]).unwrap();
        let cov2 = assemble_ns(&model, &tpsi, &tp2, 0.3, &pair).unwrap();
        for i in 0..cov.matrix().n() {
            for j in 0..cov.matrix().n() {
                assert_eq!(cov.matrix().get(i, j), cov2.matrix().get(i, j));
            }
        }
    }

    #[test]
    fn ns_full_matrix_symmetric_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(111);
        let pair = ns_pair(&mut rng, 10, 0.02);
        let model = ModelSpec::new(ModelFamily::Ns2d, vec![1.0, 0.01]).unwrap();
        let tpsi = ArdSeKernelParams::new(1.0, vec![1.0, 1.0]).unwrap();
        let tp = ArdSeKernelParams::new(1.0, vec![1.0, 1.0]).unwrap();
        let cov = assemble_ns(&model, &tpsi, &tp, 1e-4, &pair).unwrap();
        assert!(cov.matrix().max_asymmetry() <= 1e-12);
        assert!(min_eig(cov.matrix()) >= -1e-8);
    }

    #[test]
    fn ns_pressure_enters_only_with_dt() {
        // with dt > 0 the previous-level blocks must depend on θ_p
        let mut rng = ChaCha8Rng::seed_from_u64(112);
        let pair = ns_pair(&mut rng, 3, 0.05);
        let model = ModelSpec::new(ModelFamily::Ns2d, vec![1.0, 0.01]).unwrap();
        let tpsi = ArdSeKernelParams::new(1.0, vec![1.0, 1.0]).unwrap();
        let tp1 = ArdSeKernelParams::new(1.0, vec![1.0, 1.0]).unwrap();
        let tp2 = ArdSeKernelParams::new(2.0, vec![1.0, 1.0]).unwrap();
        let a = assemble_ns(&model, &tpsi, &tp1, 1e-4, &pair).unwrap();
        let b = assemble_ns(&model, &tpsi, &tp2, 1e-4, &pair).unwrap();
        let n = 3;
        let mut max_diff_prev: f64 = 0.0;
        let mut max_diff_curr: f64 = 0.0;
        for i in 0..4 * n {
            for j in 0..4 * n {
                let d = (a.matrix().get(i, j) - b.matrix().get(i, j)).abs();
                if i < 2 * n && j < 2 * n {
                    max_diff_curr = max_diff_curr.max(d);
                } else if i >= 2 * n && j >= 2 * n {
                    max_diff_prev = max_diff_prev.max(d);
                }
            }
        }
        assert_eq!(max_diff_curr, 0.0);
        assert!(max_diff_prev > 0.0);
    }

    /// Samples from the stream-function velocity prior should be discretely
    /// divergence-free; central differences converge at second order, so
    /// halving the grid spacing should shrink the residual about fourfold.
    #[test]
    fn ns_prior_samples_divergence_free() {
        let model = ModelSpec::new(ModelFamily::Ns2d, vec![1.0, 0.01]).unwrap();
        let tpsi = ArdSeKernelParams::new(1.0, vec![1.0, 1.0]).unwrap();
        let tp = ArdSeKernelParams::new(1.0, vec![1.0, 1.0]).unwrap();
        let mut ratios = Vec::new();
        let mut rel = Vec::new();
        for (steps, h) in [(12usize, 0.1f64), (24, 0.05)] {
            let g = steps + 1;
            let mut grid = Vec::with_capacity(2 * g * g);
            for i in 0..g {
                for j in 0..g {
                    grid.push(i as f64 * h);
                    grid.push(j as f64 * h);
                }
            }
            let npts = g * g;
            let dummy = vec![0.0; npts];
            let pair = SnapshotPair::new(
                grid.clone(),
                vec![dummy.clone(), dummy.clone()],
                grid,
                vec![dummy.clone(), dummy],
                0.0,
                2,
                labels(&["u", "v"]),
            )
            .unwrap();
            let cov = assemble_ns(&model, &tpsi, &tp, 1e-10, &pair).unwrap();
            // current-level (u, v) sub-block is the pure velocity prior
            let m = 2 * npts;
            let mut sub = DenseMatrix::zeros(m);
            for i in 0..m {
                for j in 0..m {
                    sub.set(i, j, cov.matrix().get(i, j));
                }
            }
            let f = cholesky_with_jitter(&sub, 1e-10, 1e-4).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let z: Vec<f64> = (0..m)
                .map(|_| {
                    let (a, b): (f64, f64) = (rng.gen(), rng.gen());
                    (-2.0 * a.max(1e-12).ln()).sqrt()
                        * (2.0 * core::f64::consts::PI * b).cos()
                })
                .collect();
            // sample = L z
            let mut s = vec![0.0; m];
            for i in 0..m {
                let mut acc = 0.0;
                for j in 0..=i {
                    acc += f.l.get(i, j) * z[j];
                }
                s[i] = acc;
            }
            let (u, v) = s.split_at(npts);
            let mut div2 = 0.0;
            let mut mag2 = 0.0;
            let mut count = 0;
            let at = |field: &[f64], i: usize, j: usize| field[i * g + j];
            for i in 1..g - 1 {
                for j in 1..g - 1 {
                    let ux = (at(u, i + 1, j) - at(u, i - 1, j)) / (2.0 * h);
                    let vy = (at(v, i, j + 1) - at(v, i, j - 1)) / (2.0 * h);
                    div2 += (ux + vy) * (ux + vy);
                    mag2 += ux * ux + vy * vy;
                    count += 1;
                }
            }
            let rms_div = (div2 / count as f64).sqrt();
            let rms_mag = (mag2 / count as f64).sqrt();
            ratios.push(rms_div);
            rel.push(rms_div / rms_mag);
        }
        assert!(rel[0] < 0.05, "coarse-grid relative divergence {}", rel[0]);
        let ratio = ratios[0] / ratios[1];
        assert!(ratio > 2.5, "divergence did not shrink at second order: {ratio}");
    }

    fn bins(n: usize, lo: f64, hi: f64) -> Vec<f64> {
        let w = (hi - lo) / n as f64;
        (0..n).map(|i| lo + (i as f64 + 0.5) * w).collect()
    }

    #[test]
    fn fractional_integer_order_matches_differential_assembly() {
        let rule = QuadratureRule::default_gauss_hermite();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x_prev = bins(6, -2.0, 2.0);
        let x_curr = bins(5, -2.0, 2.0);
        let hp: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..1.0)).collect();
        let hc: Vec<f64> = (0..5).map(|_| rng.gen_range(0.0..1.0)).collect();
        let pair = SnapshotPair::new(
            x_prev,
            vec![hp.clone()],
            x_curr,
            vec![hc.clone()],
            0.05,
            1,
            labels(&["density"]),
        )
        .unwrap();
        let theta = ArdSeKernelParams::new(1.2, vec![0.9]).unwrap();
        // RL order 2 is plain diffusion: L = I - Δtλ₁∂², the same operator
        // Burgers produces with zero advection
        let frac = ModelSpec::new(ModelFamily::FractionalRl, vec![0.4, 2.0]).unwrap();
        let diff = ModelSpec::new(ModelFamily::Burgers, vec![0.0, 0.4]).unwrap();
        let zeros_pair = SnapshotPair::new(
            pair.x_prev().to_vec(),
            vec![vec![0.0; 6]],
            pair.x_curr().to_vec(),
            vec![vec![0.0; 5]],
            0.05,
            1,
            labels(&["density"]),
        )
        .unwrap();
        let a = assemble_fractional(&frac, &theta, 1e-6, &pair, &rule).unwrap();
        let b = assemble_scalar(&diff, &theta, 1e-6, &zeros_pair).unwrap();
        for i in 0..a.matrix().n() {
            for j in 0..a.matrix().n() {
                let (x, y) = (a.matrix().get(i, j), b.matrix().get(i, j));
                assert!((x - y).abs() <= 1e-6 * y.abs().max(1.0), "({i},{j}): {x} vs {y}");
            }
        }
    }

    #[test]
    fn fractional_zero_dt_reduces_to_se_gram() {
        let rule = QuadratureRule::default_gauss_hermite();
        let x = bins(5, -1.0, 1.0);
        let h = vec![0.2; 5];
        let pair = SnapshotPair::new(
            x.clone(),
            vec![h.clone()],
            x.clone(),
            vec![h],
            0.0,
            1,
            labels(&["density"]),
        )
        .unwrap();
        let theta = ArdSeKernelParams::new(0.8, vec![1.4]).unwrap();
        let model = ModelSpec::new(ModelFamily::FractionalLaplacian, vec![1.5]).unwrap();
        let cov = assemble_fractional(&model, &theta, 0.1, &pair, &rule).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                for (bi, bj) in [(0, 0), (0, 5), (5, 0), (5, 5)] {
                    let mut want = se_eval(&x[i..=i], &x[j..=j], &theta).unwrap();
                    if bi + i == bj + j {
                        want += 0.1;
                    }
                    assert!((cov.matrix().get(bi + i, bj + j) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn fractional_laplacian_on_bins_is_psd() {
        let rule = QuadratureRule::default_gauss_hermite();
        let x = bins(40, -3.0, 3.0);
        let h = vec![0.1; 40];
        let pair = SnapshotPair::new(
            x.clone(),
            vec![h.clone()],
            x,
            vec![h],
            0.01,
            1,
            labels(&["density"]),
        )
        .unwrap();
        let theta = ArdSeKernelParams::new(1.0, vec![1.0]).unwrap();
        let model = ModelSpec::new(ModelFamily::FractionalLaplacian, vec![2.0]).unwrap();
        let cov = assemble_fractional(&model, &theta, 1e-4, &pair, &rule).unwrap();
        assert!(cov.matrix().max_asymmetry() <= 1e-12);
        assert!(min_eig(cov.matrix()) >= -1e-8);
    }

    #[test]
    fn stacked_observations_follow_layout() {
        let pair = SnapshotPair::new(
            vec![0.0, 1.0],
            vec![vec![1.0, 2.0], vec![3.0, 4.0]],
            vec![0.5],
            vec![vec![5.0], vec![6.0]],
            0.1,
            1,
            labels(&["u", "v"]),
        )
        .unwrap();
        let layout = BlockLayout::two_level(2, 1, 2);
        let h = stacked_observations(&pair, &layout);
        assert_eq!(h, vec![5.0, 6.0, 1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn duplicated_points_are_rescued_by_jitter() {
        // exact duplicates give a rank-deficient but PSD matrix, which the
        // escalating jitter keeps factorizable well under the cap
        let x = vec![0.5; 30];
        let h = vec![1.0; 30];
        let pair = SnapshotPair::new(
            x.clone(),
            vec![h.clone()],
            x,
            vec![h],
            0.0,
            1,
            labels(&["h"]),
        )
        .unwrap();
        let model = ModelSpec::new(ModelFamily::Burgers, vec![1.0, 0.1]).unwrap();
        let theta = ArdSeKernelParams::new(1.0, vec![1.0]).unwrap();
        let cov = assemble_scalar(&model, &theta, 0.0, &pair).unwrap();
        assert!(cov.jitter_applied() > 0.0);
        assert!(cov.jitter_applied() <= JITTER_CAP_REL * cov.matrix().mean_diagonal());
    }

    #[test]
    fn jitter_cap_reports_degenerate_assembly() {
        // an indefinite matrix can never be factorized, so the escalation
        // must stop at the cap and report the degenerate assembly
        let m = DenseMatrix::from_rows(2, vec![1.0, 2.0, 2.0, 1.0]).unwrap();
        match JointCovariance::from_dense(m) {
            Err(CoreError::AssemblyDegenerate { jitter_cap }) => {
                assert!(jitter_cap > 0.0);
            }
            other => panic!("expected degenerate assembly, got {other:?}"),
        }
    }
}
