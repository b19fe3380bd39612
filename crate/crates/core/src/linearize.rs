//! Residual operators and their per-iteration linearizations.
//!
//! A PDE residual is a sum of linear terms (constant or spatially varying
//! coefficients times mixed partials) and the three supported nonlinearities:
//! integer powers `u^p`, self-advection `u·∂u/∂x_j`, and `|∇u|²`. Training
//! replaces each nonlinearity around the previous iterate by either
//! partial freezing (keep one factor at its previous value; no constant term
//! appears) or a Newton/first-order expansion (tangent to the true residual,
//! which adds a point-wise constant). Both agree with the true residual at
//! the expansion point; Newton is additionally first-order accurate, leaving
//! an `O(δ²)` remainder.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::factor::{
    collocation_weights, eval_batch, DerivativeMultiIndex, FactorModel, ModelError, WeightTable,
};
use crate::geometry::PointSet;

/// A scalar field sampled pointwise, used for coefficients, right-hand
/// sides, boundary data, and reference solutions.
pub type PointFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

#[derive(Debug, Error)]
pub enum LinearizeError {
    #[error("invalid residual term: {0}")]
    InvalidTerm(String),
    #[error("{got} right-hand-side values for {expected} points")]
    LengthMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Coefficient of a linear term.
#[derive(Clone)]
pub enum Coefficient {
    Constant(f64),
    Field(PointFn),
}

impl Coefficient {
    pub fn value(&self, x: &[f64]) -> f64 {
        match self {
            Coefficient::Constant(c) => *c,
            Coefficient::Field(f) => f(x),
        }
    }
}

impl fmt::Debug for Coefficient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Coefficient::Constant(c) => write!(f, "Constant({c})"),
            Coefficient::Field(_) => write!(f, "Field(..)"),
        }
    }
}

/// `coefficient(x) · D^α u(x)`.
#[derive(Clone, Debug)]
pub struct LinearTerm {
    pub coefficient: Coefficient,
    pub deriv: DerivativeMultiIndex,
}

impl LinearTerm {
    pub fn constant(c: f64, deriv: DerivativeMultiIndex) -> Self {
        LinearTerm {
            coefficient: Coefficient::Constant(c),
            deriv,
        }
    }

    pub fn field(f: PointFn, deriv: DerivativeMultiIndex) -> Self {
        LinearTerm {
            coefficient: Coefficient::Field(f),
            deriv,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NonlinearKind {
    /// `u^p`, `p ≥ 2`.
    Power(u32),
    /// `u · ∂u/∂x_dim`.
    ProductAdvection { dim: usize },
    /// `Σ_j (∂u/∂x_j)²`.
    GradSquared,
}

/// `coeff · N(u)` for one supported nonlinearity.
#[derive(Clone, Copy, Debug)]
pub struct NonlinearTerm {
    pub kind: NonlinearKind,
    pub coeff: f64,
}

impl NonlinearTerm {
    pub fn power(p: u32, coeff: f64) -> Result<Self, LinearizeError> {
        if p < 2 {
            return Err(LinearizeError::InvalidTerm(format!(
                "power nonlinearity needs p >= 2, got {p}; use a linear term instead"
            )));
        }
        Ok(NonlinearTerm {
            kind: NonlinearKind::Power(p),
            coeff,
        })
    }

    pub fn advection(dim: usize, coeff: f64) -> Self {
        NonlinearTerm {
            kind: NonlinearKind::ProductAdvection { dim },
            coeff,
        }
    }

    pub fn grad_squared(coeff: f64) -> Self {
        NonlinearTerm {
            kind: NonlinearKind::GradSquared,
            coeff,
        }
    }
}

/// The interior residual operator `N(u)`; the equation is `N(u) = rhs`.
#[derive(Clone, Debug)]
pub struct ResidualSpec {
    pub dim: usize,
    pub linear: Vec<LinearTerm>,
    pub nonlinear: Vec<NonlinearTerm>,
}

impl ResidualSpec {
    pub fn new(dim: usize) -> Self {
        ResidualSpec {
            dim,
            linear: Vec::new(),
            nonlinear: Vec::new(),
        }
    }

    pub fn with_linear(mut self, term: LinearTerm) -> Self {
        self.linear.push(term);
        self
    }

    pub fn with_nonlinear(mut self, term: NonlinearTerm) -> Self {
        self.nonlinear.push(term);
        self
    }

    fn validate(&self) -> Result<(), LinearizeError> {
        for term in &self.linear {
            if term.deriv.len() != self.dim {
                return Err(LinearizeError::InvalidTerm(format!(
                    "linear term derivative arity {} in a {}-dimensional residual",
                    term.deriv.len(),
                    self.dim
                )));
            }
        }
        for term in &self.nonlinear {
            match term.kind {
                NonlinearKind::Power(p) if p < 2 => {
                    return Err(LinearizeError::InvalidTerm(format!(
                        "power nonlinearity needs p >= 2, got {p}"
                    )));
                }
                NonlinearKind::ProductAdvection { dim } if dim >= self.dim => {
                    return Err(LinearizeError::InvalidTerm(format!(
                        "advection along dimension {dim} in a {}-dimensional residual",
                        self.dim
                    )));
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Derivative orders needed per dimension to evaluate the residual or any
    /// of its linearizations: linear-term orders plus value and first
    /// derivatives consumed by the nonlinearities.
    pub fn required_orders(&self) -> Vec<BTreeSet<usize>> {
        let mut orders = vec![BTreeSet::from([0usize]); self.dim];
        for term in &self.linear {
            for (i, &o) in term.deriv.orders().iter().enumerate() {
                orders[i].insert(o);
            }
        }
        for term in &self.nonlinear {
            match term.kind {
                NonlinearKind::Power(_) => {}
                NonlinearKind::ProductAdvection { dim } => {
                    orders[dim].insert(1);
                }
                NonlinearKind::GradSquared => {
                    for set in orders.iter_mut() {
                        set.insert(1);
                    }
                }
            }
        }
        orders
    }

    /// The multi-indices a linearization of this residual can touch.
    fn linearized_derivs(&self) -> Vec<DerivativeMultiIndex> {
        let mut keys: BTreeSet<Vec<usize>> = BTreeSet::new();
        keys.insert(vec![0; self.dim]);
        for term in &self.linear {
            keys.insert(term.deriv.orders().to_vec());
        }
        for term in &self.nonlinear {
            match term.kind {
                NonlinearKind::Power(_) => {}
                NonlinearKind::ProductAdvection { dim } => {
                    let mut k = vec![0; self.dim];
                    k[dim] = 1;
                    keys.insert(k);
                }
                NonlinearKind::GradSquared => {
                    for j in 0..self.dim {
                        let mut k = vec![0; self.dim];
                        k[j] = 1;
                        keys.insert(k);
                    }
                }
            }
        }
        keys.into_iter()
            .map(|orders| DerivativeMultiIndex::new(orders).expect("orders from valid terms"))
            .collect()
    }
}

/// Which factor of `u·∂u/∂x_j` partial freezing keeps at the previous
/// iterate: the value (`u_prev·∂u/∂x_j`) or the slope (`∂u_prev/∂x_j · u`).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvectionFreeze {
    #[default]
    Value,
    Slope,
}

/// One linear surrogate equation per point:
/// `Σ_k coeffs[k][m] · D^{derivs[k]} u(x_m) = target[m]`.
///
/// `target` already folds the linearization's constant part into the
/// right-hand side, so the surrogate residual is plain row dot minus target.
#[derive(Clone, Debug)]
pub struct LinearizedResidual {
    pub points: PointSet,
    pub derivs: Vec<DerivativeMultiIndex>,
    /// Indexed `[deriv][point]`.
    pub coeffs: Vec<Vec<f64>>,
    pub target: Vec<f64>,
}

impl LinearizedResidual {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// The boundary-condition surrogate: `u(x_m) = values[m]`.
    pub fn identity(points: PointSet, values: Vec<f64>) -> Result<Self, LinearizeError> {
        if values.len() != points.len() {
            return Err(LinearizeError::LengthMismatch {
                expected: points.len(),
                got: values.len(),
            });
        }
        let d = points.dim();
        Ok(LinearizedResidual {
            coeffs: vec![vec![1.0; points.len()]],
            derivs: vec![DerivativeMultiIndex::zero(d)],
            points,
            target: values,
        })
    }

    /// Orders per dimension needed to evaluate the surrogate.
    pub fn required_orders(&self) -> Vec<BTreeSet<usize>> {
        let d = self.points.dim();
        let mut orders = vec![BTreeSet::from([0usize]); d];
        for deriv in &self.derivs {
            for (i, &o) in deriv.orders().iter().enumerate() {
                orders[i].insert(o);
            }
        }
        orders
    }

    /// Surrogate residuals `Σ_k c_km D^k u(x_m) − target_m` at `model`,
    /// reusing a weight table cached for these points.
    pub fn surrogate_residuals_with(
        &self,
        model: &FactorModel,
        table: &WeightTable,
    ) -> Result<Vec<f64>, LinearizeError> {
        let mut out: Vec<f64> = self.target.iter().map(|g| -g).collect();
        for (k, deriv) in self.derivs.iter().enumerate() {
            let values = eval_batch(model, table, deriv)?;
            for (o, (v, c)) in out.iter_mut().zip(values.iter().zip(&self.coeffs[k])) {
                *o += c * v;
            }
        }
        Ok(out)
    }

    pub fn surrogate_residuals(&self, model: &FactorModel) -> Result<Vec<f64>, LinearizeError> {
        let table = collocation_weights(model, &self.points, &self.required_orders())?;
        self.surrogate_residuals_with(model, &table)
    }
}

struct PrevState {
    /// `u_prev` and its first derivatives at every point, per dimension.
    value: Vec<f64>,
    grad: Vec<Vec<f64>>,
}

fn prev_state(
    spec: &ResidualSpec,
    prev: &FactorModel,
    table: &WeightTable,
) -> Result<PrevState, LinearizeError> {
    let d = spec.dim;
    let value = eval_batch(prev, table, &DerivativeMultiIndex::zero(d))?;
    let mut grad = Vec::with_capacity(d);
    let needs_grad: Vec<bool> = (0..d)
        .map(|j| {
            spec.nonlinear.iter().any(|t| match t.kind {
                NonlinearKind::ProductAdvection { dim } => dim == j,
                NonlinearKind::GradSquared => true,
                NonlinearKind::Power(_) => false,
            })
        })
        .collect();
    for (j, needed) in needs_grad.iter().enumerate() {
        if *needed {
            let deriv = DerivativeMultiIndex::single(d, j, 1)?;
            grad.push(eval_batch(prev, table, &deriv)?);
        } else {
            grad.push(Vec::new());
        }
    }
    Ok(PrevState { value, grad })
}

struct Accumulator {
    dim: usize,
    coeffs: BTreeMap<Vec<usize>, Vec<f64>>,
    constant: Vec<f64>,
}

impl Accumulator {
    fn new(spec: &ResidualSpec, m: usize) -> Self {
        let mut coeffs = BTreeMap::new();
        for deriv in spec.linearized_derivs() {
            coeffs.insert(deriv.orders().to_vec(), vec![0.0; m]);
        }
        Accumulator {
            dim: spec.dim,
            coeffs,
            constant: vec![0.0; m],
        }
    }

    fn add(&mut self, orders: &[usize], point: usize, value: f64) {
        self.coeffs
            .get_mut(orders)
            .expect("all linearized derivatives pre-registered")[point] += value;
    }

    fn add_first(&mut self, dim: usize, point: usize, value: f64) {
        let mut orders = vec![0; self.dim];
        orders[dim] = 1;
        self.add(&orders, point, value);
    }

    fn finish(self, points: PointSet, rhs: &[f64]) -> LinearizedResidual {
        let mut derivs = Vec::with_capacity(self.coeffs.len());
        let mut coeffs = Vec::with_capacity(self.coeffs.len());
        for (orders, c) in self.coeffs {
            derivs.push(DerivativeMultiIndex::new(orders).expect("validated"));
            coeffs.push(c);
        }
        let target = rhs
            .iter()
            .zip(&self.constant)
            .map(|(r, c)| r - c)
            .collect();
        LinearizedResidual {
            points,
            derivs,
            coeffs,
            target,
        }
    }
}

fn linearize_common(
    spec: &ResidualSpec,
    prev: &FactorModel,
    points: &PointSet,
    rhs: &[f64],
    advection: Option<AdvectionFreeze>,
) -> Result<LinearizedResidual, LinearizeError> {
    spec.validate()?;
    if rhs.len() != points.len() {
        return Err(LinearizeError::LengthMismatch {
            expected: points.len(),
            got: rhs.len(),
        });
    }
    let table = collocation_weights(prev, points, &spec.required_orders())?;
    linearize_with_table(spec, prev, &table, rhs, advection)
}

/// Shared implementation; `advection = None` selects the Newton expansion.
pub(crate) fn linearize_with_table(
    spec: &ResidualSpec,
    prev: &FactorModel,
    table: &WeightTable,
    rhs: &[f64],
    advection: Option<AdvectionFreeze>,
) -> Result<LinearizedResidual, LinearizeError> {
    let points = table.points().clone();
    let m = points.len();
    let state = prev_state(spec, prev, table)?;
    let mut acc = Accumulator::new(spec, m);
    let zero = vec![0usize; spec.dim];
    for term in &spec.linear {
        let orders = term.deriv.orders().to_vec();
        for p in 0..m {
            acc.add(&orders, p, term.coefficient.value(points.point(p)));
        }
    }
    for term in &spec.nonlinear {
        let c = term.coeff;
        match (term.kind, advection) {
            (NonlinearKind::Power(p), Some(_)) => {
                for i in 0..m {
                    acc.add(&zero, i, c * state.value[i].powi(p as i32 - 1));
                }
            }
            (NonlinearKind::Power(p), None) => {
                for i in 0..m {
                    let up = state.value[i].powi(p as i32 - 1);
                    acc.add(&zero, i, c * p as f64 * up);
                    acc.constant[i] += c * (1.0 - p as f64) * up * state.value[i];
                }
            }
            (NonlinearKind::ProductAdvection { dim }, Some(AdvectionFreeze::Value)) => {
                for i in 0..m {
                    acc.add_first(dim, i, c * state.value[i]);
                }
            }
            (NonlinearKind::ProductAdvection { dim }, Some(AdvectionFreeze::Slope)) => {
                for i in 0..m {
                    acc.add(&zero, i, c * state.grad[dim][i]);
                }
            }
            (NonlinearKind::ProductAdvection { dim }, None) => {
                for i in 0..m {
                    acc.add_first(dim, i, c * state.value[i]);
                    acc.add(&zero, i, c * state.grad[dim][i]);
                    acc.constant[i] -= c * state.value[i] * state.grad[dim][i];
                }
            }
            (NonlinearKind::GradSquared, Some(_)) => {
                for (j, g) in state.grad.iter().enumerate() {
                    for (i, gi) in g.iter().enumerate() {
                        acc.add_first(j, i, c * gi);
                    }
                }
            }
            (NonlinearKind::GradSquared, None) => {
                for (j, g) in state.grad.iter().enumerate() {
                    for (i, gi) in g.iter().enumerate() {
                        acc.add_first(j, i, 2.0 * c * gi);
                        acc.constant[i] -= c * gi * gi;
                    }
                }
            }
        }
    }
    Ok(acc.finish(points, rhs))
}

/// Partial-freezing linearization around `prev`: one factor of each
/// nonlinearity is held at the previous iterate, so no constant term appears
/// and the target equals the right-hand side.
pub fn freeze(
    spec: &ResidualSpec,
    prev: &FactorModel,
    points: &PointSet,
    rhs: &[f64],
    advection: AdvectionFreeze,
) -> Result<LinearizedResidual, LinearizeError> {
    linearize_common(spec, prev, points, rhs, Some(advection))
}

/// Newton (first-order Taylor) linearization around `prev`; tangent to the
/// true residual, with the expansion constants folded into the target.
pub fn newton(
    spec: &ResidualSpec,
    prev: &FactorModel,
    points: &PointSet,
    rhs: &[f64],
) -> Result<LinearizedResidual, LinearizeError> {
    linearize_common(spec, prev, points, rhs, None)
}

/// The true nonlinear operator `N(u)` at one point.
pub fn residual_eval(
    model: &FactorModel,
    spec: &ResidualSpec,
    x: &[f64],
) -> Result<f64, LinearizeError> {
    spec.validate()?;
    let d = spec.dim;
    let mut total = 0.0;
    for term in &spec.linear {
        total += term.coefficient.value(x) * model.eval(x, &term.deriv)?;
    }
    if !spec.nonlinear.is_empty() {
        let u = model.eval(x, &DerivativeMultiIndex::zero(d))?;
        for term in &spec.nonlinear {
            total += term.coeff
                * match term.kind {
                    NonlinearKind::Power(p) => u.powi(p as i32),
                    NonlinearKind::ProductAdvection { dim } => {
                        u * model.eval(x, &DerivativeMultiIndex::single(d, dim, 1)?)?
                    }
                    NonlinearKind::GradSquared => {
                        let mut s = 0.0;
                        for j in 0..d {
                            let g = model.eval(x, &DerivativeMultiIndex::single(d, j, 1)?)?;
                            s += g * g;
                        }
                        s
                    }
                };
        }
    }
    Ok(total)
}

/// The true operator at every cached point.
pub fn residual_eval_batch(
    model: &FactorModel,
    spec: &ResidualSpec,
    table: &WeightTable,
) -> Result<Vec<f64>, LinearizeError> {
    spec.validate()?;
    let d = spec.dim;
    let m = table.len();
    let points = table.points();
    let mut total = vec![0.0; m];
    for term in &spec.linear {
        let values = eval_batch(model, table, &term.deriv)?;
        for (i, (t, v)) in total.iter_mut().zip(values).enumerate() {
            *t += term.coefficient.value(points.point(i)) * v;
        }
    }
    if !spec.nonlinear.is_empty() {
        let u = eval_batch(model, table, &DerivativeMultiIndex::zero(d))?;
        let mut grad: Vec<Option<Vec<f64>>> = vec![None; d];
        for term in &spec.nonlinear {
            match term.kind {
                NonlinearKind::ProductAdvection { dim } => {
                    if grad[dim].is_none() {
                        let deriv = DerivativeMultiIndex::single(d, dim, 1)?;
                        grad[dim] = Some(eval_batch(model, table, &deriv)?);
                    }
                }
                NonlinearKind::GradSquared => {
                    for (j, slot) in grad.iter_mut().enumerate() {
                        if slot.is_none() {
                            let deriv = DerivativeMultiIndex::single(d, j, 1)?;
                            *slot = Some(eval_batch(model, table, &deriv)?);
                        }
                    }
                }
                NonlinearKind::Power(_) => {}
            }
        }
        for term in &spec.nonlinear {
            let c = term.coeff;
            match term.kind {
                NonlinearKind::Power(p) => {
                    for (t, &ui) in total.iter_mut().zip(&u) {
                        *t += c * ui.powi(p as i32);
                    }
                }
                NonlinearKind::ProductAdvection { dim } => {
                    let g = grad[dim].as_ref().expect("precomputed");
                    for i in 0..m {
                        total[i] += c * u[i] * g[i];
                    }
                }
                NonlinearKind::GradSquared => {
                    for g in grad.iter().flatten() {
                        for i in 0..m {
                            total[i] += c * g[i] * g[i];
                        }
                    }
                }
            }
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factor::Decomposition;
    use crate::kernels::{KernelFamily, KernelSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model(seed: u64) -> FactorModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = KernelSpec::new(KernelFamily::SquaredExponential, 0.35)
            .unwrap()
            .with_nugget(1e-10);
        FactorModel::init_random(
            Decomposition::Cp { rank: 3 },
            &[spec; 2],
            &[14, 14],
            &[(0.0, 1.0), (0.0, 1.0)],
            &mut rng,
        )
        .unwrap()
    }

    fn composite_spec() -> ResidualSpec {
        ResidualSpec::new(2)
            .with_linear(LinearTerm::constant(
                -0.1,
                DerivativeMultiIndex::new(vec![2, 0]).unwrap(),
            ))
            .with_linear(LinearTerm::constant(
                -0.1,
                DerivativeMultiIndex::new(vec![0, 2]).unwrap(),
            ))
            .with_linear(LinearTerm::field(
                Arc::new(|x: &[f64]| (x[0] + 2.0 * x[1]).sin()),
                DerivativeMultiIndex::zero(2),
            ))
            .with_nonlinear(NonlinearTerm::power(3, 0.7).unwrap())
            .with_nonlinear(NonlinearTerm::advection(0, 1.3))
            .with_nonlinear(NonlinearTerm::grad_squared(0.5))
    }

    fn random_points(n: usize, seed: u64) -> PointSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut points = PointSet::new(2);
        for _ in 0..n {
            points.push(&[rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)]);
        }
        points
    }

    #[test]
    fn newton_power_three_around_two_gives_the_tangent_line() {
        // u³ at u_prev = 2 expands to 12u − 16.
        let spec = ResidualSpec::new(2).with_nonlinear(NonlinearTerm::power(3, 1.0).unwrap());
        let m = model(1);
        let points = random_points(5, 2);
        let rhs = vec![0.0; 5];
        let lin = newton(&spec, &m, &points, &rhs).unwrap();
        let zero_idx = lin
            .derivs
            .iter()
            .position(|d| d.orders() == [0, 0])
            .unwrap();
        let table = collocation_weights(&m, &points, &spec.required_orders()).unwrap();
        let u_prev = eval_batch(&m, &table, &DerivativeMultiIndex::zero(2)).unwrap();
        for (i, u) in u_prev.iter().enumerate() {
            let expected_coeff = 3.0 * u * u;
            let expected_const = -2.0 * u.powi(3);
            assert!((lin.coeffs[zero_idx][i] - expected_coeff).abs() <= 1e-12);
            // target = rhs − const.
            assert!((lin.target[i] + expected_const).abs() <= 1e-12);
        }
        // And the headline numbers for u_prev = 2.
        let coeff = |u: f64| 3.0 * u * u;
        let constant = |u: f64| -2.0 * u.powi(3);
        assert_eq!(coeff(2.0), 12.0);
        assert_eq!(constant(2.0), -16.0);
    }

    #[test]
    fn freeze_power_has_no_constant_part() {
        let spec = ResidualSpec::new(2).with_nonlinear(NonlinearTerm::power(3, 1.0).unwrap());
        let m = model(3);
        let points = random_points(7, 4);
        let rhs: Vec<f64> = (0..7).map(|i| i as f64).collect();
        let lin = freeze(&spec, &m, &points, &rhs, AdvectionFreeze::Value).unwrap();
        for (t, r) in lin.target.iter().zip(&rhs) {
            assert_eq!(t.to_bits(), r.to_bits());
        }
        let table = collocation_weights(&m, &points, &spec.required_orders()).unwrap();
        let u_prev = eval_batch(&m, &table, &DerivativeMultiIndex::zero(2)).unwrap();
        let zero_idx = lin
            .derivs
            .iter()
            .position(|d| d.orders() == [0, 0])
            .unwrap();
        for (i, u) in u_prev.iter().enumerate() {
            assert!((lin.coeffs[zero_idx][i] - u * u).abs() <= 1e-13);
        }
    }

    #[test]
    fn advection_freeze_side_selects_the_kept_factor() {
        let spec = ResidualSpec::new(2).with_nonlinear(NonlinearTerm::advection(1, 1.0));
        let m = model(5);
        let points = random_points(6, 6);
        let rhs = vec![0.0; 6];
        let table = collocation_weights(&m, &points, &spec.required_orders()).unwrap();
        let u_prev = eval_batch(&m, &table, &DerivativeMultiIndex::zero(2)).unwrap();
        let du_prev =
            eval_batch(&m, &table, &DerivativeMultiIndex::single(2, 1, 1).unwrap()).unwrap();

        let by_value = freeze(&spec, &m, &points, &rhs, AdvectionFreeze::Value).unwrap();
        let k = by_value
            .derivs
            .iter()
            .position(|d| d.orders() == [0, 1])
            .unwrap();
        for (i, u) in u_prev.iter().enumerate() {
            assert!((by_value.coeffs[k][i] - u).abs() <= 1e-13);
        }

        let by_slope = freeze(&spec, &m, &points, &rhs, AdvectionFreeze::Slope).unwrap();
        let k0 = by_slope
            .derivs
            .iter()
            .position(|d| d.orders() == [0, 0])
            .unwrap();
        for (i, du) in du_prev.iter().enumerate() {
            assert!((by_slope.coeffs[k0][i] - du).abs() <= 1e-13);
        }
    }

    #[test]
    fn both_linearizations_are_exact_at_the_expansion_point() {
        let spec = composite_spec();
        let m = model(7);
        let points = random_points(20, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rhs: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let true_resid: Vec<f64> = points
            .iter()
            .map(|p| residual_eval(&m, &spec, p).unwrap())
            .collect();
        for lin in [
            freeze(&spec, &m, &points, &rhs, AdvectionFreeze::Value).unwrap(),
            freeze(&spec, &m, &points, &rhs, AdvectionFreeze::Slope).unwrap(),
            newton(&spec, &m, &points, &rhs).unwrap(),
        ] {
            let surrogate = lin.surrogate_residuals(&m).unwrap();
            for i in 0..20 {
                let expected = true_resid[i] - rhs[i];
                assert!(
                    (surrogate[i] - expected).abs() <= 1e-10 * expected.abs().max(1.0),
                    "point {i}: surrogate {} vs true {expected}",
                    surrogate[i]
                );
            }
        }
    }

    #[test]
    fn newton_remainder_shrinks_quadratically_freeze_linearly() {
        let spec = composite_spec();
        let base = model(10);
        let mut direction = model(11);
        for bank in &mut direction.banks {
            bank.h /= bank.h.norm();
        }
        let points = random_points(15, 12);
        let rhs = vec![0.0; 15];
        let newton_lin = newton(&spec, &base, &points, &rhs).unwrap();
        let freeze_lin = freeze(&spec, &base, &points, &rhs, AdvectionFreeze::Value).unwrap();
        let gap = |lin: &LinearizedResidual, eps: f64| -> f64 {
            let mut perturbed = base.clone();
            for (bank, dir) in perturbed.banks.iter_mut().zip(&direction.banks) {
                bank.h += eps * &dir.h;
            }
            let surrogate = lin.surrogate_residuals(&perturbed).unwrap();
            points
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let truth = residual_eval(&perturbed, &spec, p).unwrap() - rhs[i];
                    (surrogate[i] - truth).abs()
                })
                .fold(0.0, f64::max)
        };
        let (n1, n2) = (gap(&newton_lin, 1e-2), gap(&newton_lin, 1e-3));
        assert!(n2 <= n1 / 25.0, "newton gaps {n1} -> {n2} not quadratic");
        let (f1, f2) = (gap(&freeze_lin, 1e-2), gap(&freeze_lin, 1e-3));
        let ratio = f1 / f2;
        assert!(
            (3.0..30.0).contains(&ratio),
            "freeze gaps {f1} -> {f2} should shrink linearly"
        );
    }

    #[test]
    fn linear_terms_pass_through_unchanged() {
        let spec = ResidualSpec::new(2)
            .with_linear(LinearTerm::field(
                Arc::new(|x: &[f64]| x[0] * x[1] + 0.5),
                DerivativeMultiIndex::new(vec![1, 0]).unwrap(),
            ))
            .with_linear(LinearTerm::constant(
                2.5,
                DerivativeMultiIndex::new(vec![0, 2]).unwrap(),
            ));
        let m = model(13);
        let points = random_points(9, 14);
        let rhs: Vec<f64> = (0..9).map(|i| 0.3 * i as f64).collect();
        let lin = newton(&spec, &m, &points, &rhs).unwrap();
        for (t, r) in lin.target.iter().zip(&rhs) {
            assert_eq!(t.to_bits(), r.to_bits());
        }
        let k10 = lin.derivs.iter().position(|d| d.orders() == [1, 0]).unwrap();
        let k02 = lin.derivs.iter().position(|d| d.orders() == [0, 2]).unwrap();
        for (i, p) in points.iter().enumerate() {
            assert!((lin.coeffs[k10][i] - (p[0] * p[1] + 0.5)).abs() <= 1e-15);
            assert_eq!(lin.coeffs[k02][i], 2.5);
        }
    }

    #[test]
    fn identity_rows_reproduce_boundary_data() {
        let m = model(15);
        let points = random_points(8, 16);
        let values: Vec<f64> = (0..8).map(|i| (i as f64).cos()).collect();
        let lin = LinearizedResidual::identity(points.clone(), values.clone()).unwrap();
        let surrogate = lin.surrogate_residuals(&m).unwrap();
        for (i, p) in points.iter().enumerate() {
            let u = m.eval(p, &DerivativeMultiIndex::zero(2)).unwrap();
            assert!((surrogate[i] - (u - values[i])).abs() <= 1e-13);
        }
    }

    #[test]
    fn required_orders_cover_all_terms() {
        let spec = composite_spec();
        let orders = spec.required_orders();
        assert!(orders[0].contains(&0) && orders[0].contains(&1) && orders[0].contains(&2));
        assert!(orders[1].contains(&0) && orders[1].contains(&1) && orders[1].contains(&2));
        let simple = ResidualSpec::new(2).with_nonlinear(NonlinearTerm::power(2, 1.0).unwrap());
        let orders = simple.required_orders();
        assert_eq!(orders[0], BTreeSet::from([0]));
        assert_eq!(orders[1], BTreeSet::from([0]));
    }

    #[test]
    fn invalid_terms_are_rejected() {
        assert!(NonlinearTerm::power(1, 1.0).is_err());
        let bad_dim = ResidualSpec::new(2).with_nonlinear(NonlinearTerm::advection(2, 1.0));
        let m = model(17);
        let points = random_points(3, 18);
        let err = newton(&bad_dim, &m, &points, &[0.0; 3]).unwrap_err();
        assert!(matches!(err, LinearizeError::InvalidTerm(_)));
        let err = newton(
            &ResidualSpec::new(2),
            &m,
            &points,
            &[0.0; 2],
        )
        .unwrap_err();
        assert!(matches!(err, LinearizeError::LengthMismatch { .. }));
    }

    #[test]
    fn batch_residual_matches_pointwise_residual() {
        let spec = composite_spec();
        let m = model(19);
        let points = random_points(25, 20);
        let table = collocation_weights(&m, &points, &spec.required_orders()).unwrap();
        let batch = residual_eval_batch(&m, &spec, &table).unwrap();
        for (i, p) in points.iter().enumerate() {
            let single = residual_eval(&m, &spec, p).unwrap();
            assert!((batch[i] - single).abs() <= 1e-12 * single.abs().max(1.0));
        }
    }
}
