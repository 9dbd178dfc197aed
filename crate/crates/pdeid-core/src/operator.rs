//! The backward-Euler linearized operator as a finite sum of
//! coefficient-times-derivative terms.
//!
//! After freezing nonlinear coefficients at the observed previous snapshot,
//! every supported model's time step reads `L_x^λ h^n = h^{n-1}` with
//!
//! ```text
//! L_x^λ = I + Δt Σ_k c_k(x) ∂^{α_k},
//! ```
//!
//! where each `c_k` is either a constant built from λ or a per-training-point
//! sample of the previous field (e.g. `Δt λ₁ h^{n-1}(x_j)` for the advection
//! term). Multi-output models carry one operator piece per latent output they
//! touch; the piece on the row's own output always contains the identity.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::CoreError;
use crate::kernel::{se_partial, ArdSeKernelParams, DerivMultiIndexPair, MAX_TOTAL_ORDER};

/// Coefficient of one operator term.
#[derive(Debug, Clone, PartialEq)]
pub enum Coeff {
    Constant(f64),
    /// One sample per previous-snapshot training point.
    PerPoint(Vec<f64>),
}

/// One `c(x) ∂^α` term of the linearized operator.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorTerm {
    coeff: Coeff,
    deriv_orders: Vec<usize>,
}

impl OperatorTerm {
    pub fn constant(value: f64, deriv_orders: Vec<usize>) -> Result<Self, CoreError> {
        Self::new(Coeff::Constant(value), deriv_orders)
    }

    pub fn per_point(values: Vec<f64>, deriv_orders: Vec<usize>) -> Result<Self, CoreError> {
        if values.is_empty() {
            return Err(CoreError::InvalidInput("per-point coefficient needs samples"));
        }
        Self::new(Coeff::PerPoint(values), deriv_orders)
    }

    fn new(coeff: Coeff, deriv_orders: Vec<usize>) -> Result<Self, CoreError> {
        // each side of a covariance block contributes at most half the total order
        if deriv_orders.iter().any(|o| *o > MAX_TOTAL_ORDER / 2) {
            return Err(CoreError::UnsupportedOrder {
                order: *deriv_orders.iter().max().unwrap(),
                max: MAX_TOTAL_ORDER / 2,
            });
        }
        if deriv_orders.is_empty() {
            return Err(CoreError::InvalidInput("derivative orders must cover each dimension"));
        }
        Ok(Self { coeff, deriv_orders })
    }

    pub fn coeff(&self) -> &Coeff {
        &self.coeff
    }

    pub fn deriv_orders(&self) -> &[usize] {
        &self.deriv_orders
    }

    /// Coefficient sample for previous-snapshot point `j`.
    pub fn coeff_at(&self, j: usize) -> Result<f64, CoreError> {
        match &self.coeff {
            Coeff::Constant(v) => Ok(*v),
            Coeff::PerPoint(vals) => {
                vals.get(j).copied().ok_or(CoreError::InvalidIndex { index: j, len: vals.len() })
            }
        }
    }

    fn is_identity(&self) -> bool {
        matches!(self.coeff, Coeff::Constant(v) if v == 1.0)
            && self.deriv_orders.iter().all(|o| *o == 0)
    }
}

/// The sum of terms a row applies to one latent output.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearizedOperator {
    terms: Vec<OperatorTerm>,
    output_index: usize,
}

impl LinearizedOperator {
    pub fn new(output_index: usize, terms: Vec<OperatorTerm>) -> Result<Self, CoreError> {
        if terms.is_empty() {
            return Err(CoreError::InvalidInput("operator needs at least one term"));
        }
        let dim = terms[0].deriv_orders.len();
        if terms.iter().any(|t| t.deriv_orders.len() != dim) {
            return Err(CoreError::InvalidInput("terms disagree on dimension"));
        }
        Ok(Self { terms, output_index })
    }

    /// Plain identity: `L = I` on the given output.
    pub fn identity(dim: usize, output_index: usize) -> Self {
        let term = OperatorTerm::constant(1.0, vec![0; dim]).unwrap();
        Self { terms: vec![term], output_index }
    }

    pub fn terms(&self) -> &[OperatorTerm] {
        &self.terms
    }

    pub fn output_index(&self) -> usize {
        self.output_index
    }

    pub fn dim(&self) -> usize {
        self.terms[0].deriv_orders.len()
    }

    fn identity_count(&self) -> usize {
        self.terms.iter().filter(|t| t.is_identity()).count()
    }
}

/// One equation of the linearized system: `h_row^{n-1} = Σ_pieces L_piece f_piece`.
///
/// The piece acting on the row's own latent output carries the identity term
/// exactly once; off-diagonal pieces (couplings to other outputs) carry none.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorRow {
    row_index: usize,
    pieces: Vec<LinearizedOperator>,
}

impl OperatorRow {
    pub fn new(row_index: usize, pieces: Vec<LinearizedOperator>) -> Result<Self, CoreError> {
        let diag = pieces
            .iter()
            .find(|p| p.output_index == row_index)
            .ok_or(CoreError::InvalidInput("row lacks a piece on its own output"))?;
        if diag.identity_count() != 1 {
            return Err(CoreError::InvalidInput("diagonal piece must contain identity exactly once"));
        }
        for (i, p) in pieces.iter().enumerate() {
            if pieces[..i].iter().any(|q| q.output_index == p.output_index) {
                return Err(CoreError::InvalidInput("duplicate piece for one output"));
            }
        }
        Ok(Self { row_index, pieces })
    }

    pub fn row_index(&self) -> usize {
        self.row_index
    }

    pub fn pieces(&self) -> &[LinearizedOperator] {
        &self.pieces
    }

    /// The piece acting on latent output `o`, if the row touches it.
    pub fn piece_for(&self, o: usize) -> Option<&LinearizedOperator> {
        self.pieces.iter().find(|p| p.output_index == o)
    }
}

/// PDE family selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelFamily {
    Burgers,
    Kdv,
    Ks,
    Nls,
    Ns2d,
    FractionalRl,
    FractionalLaplacian,
}

impl ModelFamily {
    pub fn name(self) -> &'static str {
        match self {
            ModelFamily::Burgers => "burgers",
            ModelFamily::Kdv => "kdv",
            ModelFamily::Ks => "ks",
            ModelFamily::Nls => "nls",
            ModelFamily::Ns2d => "ns2d",
            ModelFamily::FractionalRl => "fractional_rl",
            ModelFamily::FractionalLaplacian => "fractional_laplacian",
        }
    }

    /// Number of PDE parameters λ.
    pub fn lambda_len(self) -> usize {
        match self {
            ModelFamily::Burgers | ModelFamily::Kdv | ModelFamily::Nls | ModelFamily::Ns2d => 2,
            ModelFamily::Ks => 3,
            ModelFamily::FractionalRl => 2,
            ModelFamily::FractionalLaplacian => 1,
        }
    }

    /// Spatial dimension of the fields.
    pub fn dim(self) -> usize {
        match self {
            ModelFamily::Ns2d => 2,
            _ => 1,
        }
    }

    /// Observed field components per snapshot.
    pub fn outputs(self) -> usize {
        match self {
            ModelFamily::Nls | ModelFamily::Ns2d => 2,
            _ => 1,
        }
    }
}

/// A PDE family with a concrete parameter vector λ.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub family: ModelFamily,
    pub lambda: Vec<f64>,
}

impl ModelSpec {
    pub fn new(family: ModelFamily, lambda: Vec<f64>) -> Result<Self, CoreError> {
        if lambda.len() != family.lambda_len() {
            return Err(CoreError::DimensionMismatch {
                expected: family.lambda_len(),
                got: lambda.len(),
            });
        }
        if lambda.iter().any(|l| !l.is_finite()) {
            return Err(CoreError::InvalidParameter("lambda must be finite"));
        }
        Ok(Self { family, lambda })
    }

    pub fn dim(&self) -> usize {
        self.family.dim()
    }

    pub fn outputs(&self) -> usize {
        self.family.outputs()
    }
}

/// `Σ_terms c(j) · ∂^{orders}_{x'} k(x_i, x'_j)`: the operator applied to the
/// kernel's second argument.
pub fn apply_right(
    op: &LinearizedOperator,
    params: &ArdSeKernelParams,
    x_i: &[f64],
    x_prime_j: &[f64],
    coeff_index_j: usize,
) -> Result<f64, CoreError> {
    let dim = params.dim();
    let mut acc = 0.0;
    for term in &op.terms {
        let c = term.coeff_at(coeff_index_j)?;
        let idx = DerivMultiIndexPair::new(vec![0; dim], term.deriv_orders.clone())?;
        acc += c * se_partial(&idx, x_i, x_prime_j, params)?;
    }
    Ok(acc)
}

/// Double sum `Σ Σ c_L(i) c_R(j) · ∂^{L}_x ∂^{R}_{x'} k(x_i, x'_j)`: operators
/// applied to both kernel arguments.
pub fn apply_left_right(
    op_left: &LinearizedOperator,
    op_right: &LinearizedOperator,
    params: &ArdSeKernelParams,
    x_i: &[f64],
    x_prime_j: &[f64],
    coeff_i: usize,
    coeff_j: usize,
) -> Result<f64, CoreError> {
    let mut acc = 0.0;
    for tl in &op_left.terms {
        let cl = tl.coeff_at(coeff_i)?;
        for tr in &op_right.terms {
            let cr = tr.coeff_at(coeff_j)?;
            let idx =
                DerivMultiIndexPair::new(tl.deriv_orders.clone(), tr.deriv_orders.clone())?;
            acc += cl * cr * se_partial(&idx, x_i, x_prime_j, params)?;
        }
    }
    Ok(acc)
}

/// Previous-snapshot field samples used to freeze nonlinear coefficients,
/// one vector per observed output, aligned with the `n-1` training points.
pub type PrevFields<'a> = &'a [&'a [f64]];

/// Build the linearized operator rows of a model, with coefficients frozen at
/// the raw observed previous-snapshot values.
pub fn build_linearized(
    model: &ModelSpec,
    dt: f64,
    prev_values: PrevFields<'_>,
) -> Result<Vec<OperatorRow>, CoreError> {
    if !(dt >= 0.0) {
        return Err(CoreError::InvalidParameter("dt must be non-negative"));
    }
    if prev_values.len() != model.outputs() {
        return Err(CoreError::DimensionMismatch {
            expected: model.outputs(),
            got: prev_values.len(),
        });
    }
    let n = prev_values[0].len();
    if n == 0 || prev_values.iter().any(|v| v.len() != n) {
        return Err(CoreError::InvalidInput("previous-snapshot outputs disagree in length"));
    }
    let lam = &model.lambda;
    match model.family {
        ModelFamily::Burgers => scalar_row(dt, prev_values[0], &[(lam[0], 1), (-lam[1], 2)]),
        ModelFamily::Kdv => scalar_row(dt, prev_values[0], &[(lam[0], 1), (lam[1], 3)]),
        ModelFamily::Ks => {
            scalar_row(dt, prev_values[0], &[(lam[0], 1), (lam[1], 2), (lam[2], 4)])
        }
        ModelFamily::Nls => {
            let (u, v) = (prev_values[0], prev_values[1]);
            let c: Vec<f64> = u.iter().zip(v).map(|(a, b)| a * a + b * b).collect();
            // u^{n-1} = u^n + Δtλ₁ ∂²v^n + Δtλ₂ c v^n
            // v^{n-1} = v^n - Δtλ₁ ∂²u^n - Δtλ₂ c u^n
            let coupling = |sign: f64| -> Result<Vec<OperatorTerm>, CoreError> {
                let mut terms = Vec::new();
                if dt * lam[0] != 0.0 {
                    terms.push(OperatorTerm::constant(sign * dt * lam[0], vec![2])?);
                }
                if dt * lam[1] != 0.0 && c.iter().any(|x| *x != 0.0) {
                    let vals = c.iter().map(|x| sign * dt * lam[1] * x).collect();
                    terms.push(OperatorTerm::per_point(vals, vec![0])?);
                }
                Ok(terms)
            };
            let mut rows = Vec::with_capacity(2);
            for (row_idx, own, other, sign) in [(0usize, 0usize, 1usize, 1.0), (1, 1, 0, -1.0)] {
                let mut pieces = vec![LinearizedOperator::identity(1, own)];
                let coup = coupling(sign)?;
                if !coup.is_empty() {
                    pieces.push(LinearizedOperator::new(other, coup)?);
                }
                rows.push(OperatorRow::new(row_idx, pieces)?);
            }
            Ok(rows)
        }
        ModelFamily::Ns2d => {
            let (u, v) = (prev_values[0], prev_values[1]);
            // L h = h + Δtλ₁(ū h_x + v̄ h_y) - Δtλ₂(h_xx + h_yy), same for both rows;
            // the pressure gradient enters as Δt ∂p/∂x_row on latent output 2.
            let mut rows = Vec::with_capacity(2);
            for row_idx in 0..2usize {
                let mut terms = vec![OperatorTerm::constant(1.0, vec![0, 0])?];
                if dt * lam[0] != 0.0 {
                    if u.iter().any(|x| *x != 0.0) {
                        let vals = u.iter().map(|x| dt * lam[0] * x).collect();
                        terms.push(OperatorTerm::per_point(vals, vec![1, 0])?);
                    }
                    if v.iter().any(|x| *x != 0.0) {
                        let vals = v.iter().map(|x| dt * lam[0] * x).collect();
                        terms.push(OperatorTerm::per_point(vals, vec![0, 1])?);
                    }
                }
                if dt * lam[1] != 0.0 {
                    terms.push(OperatorTerm::constant(-dt * lam[1], vec![2, 0])?);
                    terms.push(OperatorTerm::constant(-dt * lam[1], vec![0, 2])?);
                }
                let mut pieces = vec![LinearizedOperator::new(row_idx, terms)?];
                if dt != 0.0 {
                    let grad = if row_idx == 0 { vec![1, 0] } else { vec![0, 1] };
                    pieces.push(LinearizedOperator::new(
                        2,
                        vec![OperatorTerm::constant(dt, grad)?],
                    )?);
                }
                rows.push(OperatorRow::new(row_idx, pieces)?);
            }
            Ok(rows)
        }
        ModelFamily::FractionalRl | ModelFamily::FractionalLaplacian => {
            Err(CoreError::UnsupportedModel("fractional families use the spectral path"))
        }
    }
}

/// Single-output row `I + Δt Σ (coef · ∂^order)` where the first listed term
/// is the advection term with the per-point previous field as multiplier.
fn scalar_row(
    dt: f64,
    prev: &[f64],
    entries: &[(f64, usize)],
) -> Result<Vec<OperatorRow>, CoreError> {
    let mut terms = vec![OperatorTerm::constant(1.0, vec![0])?];
    let (adv_coef, adv_order) = entries[0];
    if dt * adv_coef != 0.0 && prev.iter().any(|x| *x != 0.0) {
        let vals = prev.iter().map(|x| dt * adv_coef * x).collect();
        terms.push(OperatorTerm::per_point(vals, vec![adv_order])?);
    }
    for (coef, order) in &entries[1..] {
        if dt * coef != 0.0 {
            terms.push(OperatorTerm::constant(dt * coef, vec![*order])?);
        }
    }
    let op = LinearizedOperator::new(0, terms)?;
    Ok(vec![OperatorRow::new(0, vec![op])?])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::se_eval;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params1() -> ArdSeKernelParams {
        ArdSeKernelParams::new(1.2, vec![0.9]).unwrap()
    }

    fn burgers(dt: f64, lambda: [f64; 2], prev: &[f64]) -> OperatorRow {
        let model = ModelSpec::new(ModelFamily::Burgers, lambda.to_vec()).unwrap();
        build_linearized(&model, dt, &[prev]).unwrap().remove(0)
    }

    #[test]
    fn identity_only_when_dt_zero() {
        let row = burgers(0.0, [1.0, 0.1], &[0.5, -0.3]);
        assert_eq!(row.pieces().len(), 1);
        assert_eq!(row.pieces()[0].terms().len(), 1);
        let p = params1();
        let v = apply_right(&row.pieces()[0], &p, &[0.3], &[0.9], 0).unwrap();
        assert_eq!(v, se_eval(&[0.3], &[0.9], &p).unwrap());
    }

    #[test]
    fn ks_zero_field_drops_advection() {
        let model = ModelSpec::new(ModelFamily::Ks, vec![1.0, 1.0, 1.0]).unwrap();
        let rows = build_linearized(&model, 0.4, &[&[0.0, 0.0, 0.0]]).unwrap();
        let terms = rows[0].pieces()[0].terms();
        assert_eq!(terms.len(), 3);
        assert_eq!(terms[1], OperatorTerm::constant(0.4, vec![2]).unwrap());
        assert_eq!(terms[2], OperatorTerm::constant(0.4, vec![4]).unwrap());
    }

    #[test]
    fn burgers_zero_field_matches_direct_sum() {
        // with h^{n-1} = 0 only I - Δtλ₂∂² survives
        let row = burgers(0.1, [1.0, 0.25], &[0.0, 0.0]);
        let p = params1();
        let (x, xp) = ([0.4], [-0.2]);
        let got = apply_right(&row.pieces()[0], &p, &x, &xp, 1).unwrap();
        let d2 = DerivMultiIndexPair::new(vec![0], vec![2]).unwrap();
        let want = se_eval(&x, &xp, &p).unwrap()
            - 0.1 * 0.25 * se_partial(&d2, &x, &xp, &p).unwrap();
        assert!((got - want).abs() < 1e-14);
    }

    #[test]
    fn diffusion_only_matches_finite_difference() {
        let row = burgers(0.2, [0.0, 0.3], &[0.7]);
        let p = params1();
        let (x, xp) = ([0.1], [0.6]);
        let got = apply_right(&row.pieces()[0], &p, &x, &xp, 0).unwrap();
        // (I - Δtλ₂ ∂²_{x'}) k via central differences of se_eval
        let h = 1e-4;
        let k = |b: f64| se_eval(&x, &[b], &p).unwrap();
        let d2 = (k(xp[0] + h) - 2.0 * k(xp[0]) + k(xp[0] - h)) / (h * h);
        let want = k(xp[0]) - 0.2 * 0.3 * d2;
        assert!((got - want).abs() / want.abs().max(1.0) < 1e-5);
    }

    #[test]
    fn left_right_reductions_and_transpose_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let prev: Vec<f64> = (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let row = burgers(0.1, [1.3, 0.2], &prev);
        let op = &row.pieces()[0];
        let ident = LinearizedOperator::identity(1, 0);
        let p = params1();
        for _ in 0..30 {
            let x = [rng.gen_range(-2.0..2.0)];
            let xp = [rng.gen_range(-2.0..2.0)];
            let i = rng.gen_range(0..10);
            let j = rng.gen_range(0..10);

            let one_sided = apply_left_right(&ident, op, &p, &x, &xp, i, j).unwrap();
            let direct = apply_right(op, &p, &x, &xp, j).unwrap();
            assert!((one_sided - direct).abs() < 1e-12 * direct.abs().max(1.0));

            let both = apply_left_right(op, op, &p, &x, &xp, i, j).unwrap();
            let swapped = apply_left_right(op, op, &p, &xp, &x, j, i).unwrap();
            assert!((both - swapped).abs() < 1e-11 * both.abs().max(1.0));
        }
    }

    #[test]
    fn operator_linearity_in_terms() {
        // splitting an operator into term subsets adds up exactly
        let p = params1();
        let t1 = OperatorTerm::constant(0.4, vec![1]).unwrap();
        let t2 = OperatorTerm::per_point(vec![0.3, -0.8], vec![2]).unwrap();
        let full = LinearizedOperator::new(0, vec![t1.clone(), t2.clone()]).unwrap();
        let only1 = LinearizedOperator::new(0, vec![t1]).unwrap();
        let only2 = LinearizedOperator::new(0, vec![t2]).unwrap();
        let (x, xp) = ([0.2], [0.5]);
        let whole = apply_right(&full, &p, &x, &xp, 1).unwrap();
        let parts = apply_right(&only1, &p, &x, &xp, 1).unwrap()
            + apply_right(&only2, &p, &x, &xp, 1).unwrap();
        assert!((whole - parts).abs() < 1e-15);
    }

    #[test]
    fn nls_rows_reproduce_manufactured_soliton() {
        // stationary soliton of i h_t + λ₁ h_xx + λ₂|h|²h = 0 with
        // λ = (0.5, 1): h = sech(x)·e^{it/2}. Applying the built rows to the
        // analytic (u^n, v^n) and their derivatives must reproduce
        // (u^{n-1}, v^{n-1}) up to the O(Δt²) backward-Euler defect.
        let (l1, l2) = (0.5, 1.0);
        let xs: Vec<f64> = (0..40).map(|i| -2.0 + 0.1 * i as f64).collect();
        let sech = |x: f64| 1.0 / x.cosh();
        // per output: value and second derivative at time t
        let fields = |t: f64| -> [Vec<f64>; 4] {
            let (c, s) = ((t / 2.0).cos(), (t / 2.0).sin());
            let val: Vec<f64> = xs.iter().map(|x| sech(*x)).collect();
            let d2: Vec<f64> = xs.iter().map(|x| sech(*x) - 2.0 * sech(*x).powi(3)).collect();
            [
                val.iter().map(|v| v * c).collect(),
                val.iter().map(|v| v * s).collect(),
                d2.iter().map(|v| v * c).collect(),
                d2.iter().map(|v| v * s).collect(),
            ]
        };
        let apply_row = |row: &OperatorRow, f: &[Vec<f64>; 4], i: usize| -> f64 {
            let mut acc = 0.0;
            for piece in row.pieces() {
                for term in piece.terms() {
                    let deriv = term.deriv_orders()[0];
                    let table = match (piece.output_index(), deriv) {
                        (o, 0) => &f[o],
                        (o, 2) => &f[o + 2],
                        other => panic!("unexpected term {other:?}"),
                    };
                    acc += term.coeff_at(i).unwrap() * table[i];
                }
            }
            acc
        };
        let mut errs = Vec::new();
        for dt in [0.01, 0.005] {
            let prev = fields(0.0);
            let cur = fields(dt);
            let model = ModelSpec::new(ModelFamily::Nls, vec![l1, l2]).unwrap();
            let rows = build_linearized(&model, dt, &[&prev[0], &prev[1]]).unwrap();
            let mut worst: f64 = 0.0;
            for i in 0..xs.len() {
                worst = worst.max((apply_row(&rows[0], &cur, i) - prev[0][i]).abs());
                worst = worst.max((apply_row(&rows[1], &cur, i) - prev[1][i]).abs());
            }
            errs.push(worst);
        }
        // halving Δt shrinks the backward-Euler defect by ~4
        assert!(errs[1] < errs[0] / 3.0, "errs {errs:?}");
        assert!(errs[0] < 1e-3);
    }

    #[test]
    fn row_validation_rejects_missing_identity() {
        let t = OperatorTerm::constant(0.4, vec![1]).unwrap();
        let op = LinearizedOperator::new(0, vec![t]).unwrap();
        assert!(OperatorRow::new(0, vec![op]).is_err());
    }

    #[test]
    fn fractional_families_have_no_operator_rows() {
        let model = ModelSpec::new(ModelFamily::FractionalRl, vec![0.5, 2.0]).unwrap();
        assert!(matches!(
            build_linearized(&model, 0.01, &[&[1.0]]),
            Err(CoreError::UnsupportedModel(_))
        ));
    }

    #[test]
    fn lambda_length_enforced() {
        assert!(ModelSpec::new(ModelFamily::Ks, vec![1.0, 1.0]).is_err());
        assert!(ModelSpec::new(ModelFamily::FractionalLaplacian, vec![1.5]).is_ok());
    }
}
