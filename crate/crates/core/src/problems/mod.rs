//! The benchmark problem registry: five PDE families with source terms,
//! Dirichlet data, and reference solutions.
//!
//! Crafted-solution problems (elliptic, Allen–Cahn, Darcy) carry their exact
//! solution and its analytic derivatives; construction plugs those into the
//! residual spec at 1000 random interior points and refuses to register a
//! problem whose source term and operator disagree. The Burgers and Eikonal
//! references are oracle-computed (Cole–Hopf quadrature and a finite
//! difference solve); their consistency probes are finite-difference based
//! and run through [`PdeProblem::self_check`].

mod burgers_ref;
mod eikonal_ref;

pub use burgers_ref::{burgers_reference, burgers_reference_fixed};
pub use eikonal_ref::{fd_eikonal_oracle, EikonalGrid};

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::factor::DerivativeMultiIndex;
use crate::geometry::DomainShape;
use crate::linearize::{
    AdvectionFreeze, LinearTerm, NonlinearTerm, PointFn, ResidualSpec,
};

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("unknown problem `{key}`; available: {available}")]
    UnknownKey { key: String, available: String },
    #[error("invalid problem parameter: {0}")]
    InvalidParameter(String),
    #[error("finite-difference oracle failed to converge within {0} Newton steps")]
    NoConvergence(usize),
    #[error("self-check failed for `{key}`: {detail}")]
    SelfCheckFailed { key: String, detail: String },
}

/// Per-dimension derivative of a scalar field: `(x, i) ↦ ∂u/∂x_i` (or the
/// pure second derivative, depending on the slot).
type DimDerivFn = Arc<dyn Fn(&[f64], usize) -> f64 + Send + Sync>;

/// Exact solution with analytic first and pure-second derivatives, available
/// for the crafted benchmarks.
#[derive(Clone)]
pub(crate) struct Crafted {
    value: PointFn,
    /// `∂u/∂x_i`.
    first: DimDerivFn,
    /// `∂²u/∂x_i²`.
    second: DimDerivFn,
}

/// One registered benchmark.
#[derive(Clone)]
pub struct PdeProblem {
    pub key: String,
    pub name: String,
    pub dim: usize,
    pub domain: DomainShape,
    /// Interior operator `N`; the equation is `N(u) = rhs`.
    pub interior: ResidualSpec,
    pub rhs: PointFn,
    /// Boundary operator — the identity for every benchmark.
    pub boundary: ResidualSpec,
    /// Dirichlet data on the closed boundary faces.
    pub boundary_data: PointFn,
    pub reference: Option<PointFn>,
    /// Default partial-freezing side for advection terms.
    pub advection_freeze: AdvectionFreeze,
    pub(crate) crafted: Option<Crafted>,
}

impl std::fmt::Debug for PdeProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PdeProblem")
            .field("key", &self.key)
            .field("dim", &self.dim)
            .finish_non_exhaustive()
    }
}

fn identity_spec(d: usize) -> ResidualSpec {
    ResidualSpec::new(d).with_linear(LinearTerm::constant(1.0, DerivativeMultiIndex::zero(d)))
}

/// Evaluates one linear-term derivative of the crafted solution analytically.
fn crafted_derivative(
    crafted: &Crafted,
    x: &[f64],
    deriv: &DerivativeMultiIndex,
) -> Option<f64> {
    let orders = deriv.orders();
    let total: usize = orders.iter().sum();
    match total {
        0 => Some((crafted.value)(x)),
        1 => orders
            .iter()
            .position(|&o| o == 1)
            .map(|i| (crafted.first)(x, i)),
        2 => orders
            .iter()
            .position(|&o| o == 2)
            .map(|i| (crafted.second)(x, i)),
        _ => None,
    }
}

/// `N(u*)(x)` via the analytic derivatives, following the residual spec
/// term by term so any drift between the spec and the crafted source term
/// is caught.
fn crafted_residual(
    spec: &ResidualSpec,
    crafted: &Crafted,
    x: &[f64],
) -> Result<f64, String> {
    let mut total = 0.0;
    for term in &spec.linear {
        let v = crafted_derivative(crafted, x, &term.deriv)
            .ok_or_else(|| format!("no analytic derivative for {:?}", term.deriv.orders()))?;
        total += term.coefficient.value(x) * v;
    }
    let u = (crafted.value)(x);
    for term in &spec.nonlinear {
        total += term.coeff
            * match term.kind {
                crate::linearize::NonlinearKind::Power(p) => u.powi(p as i32),
                crate::linearize::NonlinearKind::ProductAdvection { dim } => {
                    u * (crafted.first)(x, dim)
                }
                crate::linearize::NonlinearKind::GradSquared => (0..spec.dim)
                    .map(|j| (crafted.first)(x, j))
                    .map(|g| g * g)
                    .sum(),
            };
    }
    Ok(total)
}

/// Registration gate: the crafted solution must satisfy the interior
/// equation at 1000 random interior points.
fn verify_crafted(
    key: &str,
    domain: &DomainShape,
    spec: &ResidualSpec,
    rhs: &PointFn,
    crafted: &Crafted,
) -> Result<(), ProblemError> {
    let bbox = domain.bounding_box();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE);
    let mut x = vec![0.0f64; bbox.len()];
    for _ in 0..1000 {
        for (slot, &(lo, hi)) in x.iter_mut().zip(&bbox) {
            *slot = rng.random_range(lo..hi);
        }
        if !domain.contains_interior(&x) {
            continue;
        }
        let n = crafted_residual(spec, crafted, &x).map_err(|detail| {
            ProblemError::SelfCheckFailed {
                key: key.into(),
                detail,
            }
        })?;
        let a = (rhs)(&x);
        let tol = 1e-8f64.max(1e-12 * a.abs());
        if (n - a).abs() > tol {
            return Err(ProblemError::SelfCheckFailed {
                key: key.into(),
                detail: format!(
                    "crafted solution violates the interior equation at {x:?}: N(u*) = {n}, rhs = {a}"
                ),
            });
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Burgers: u_t + u·u_x − ν·u_xx = 0 on (t,x) ∈ [0,1] × [−1,1].

/// Viscous Burgers with `u(0,x) = −sin(πx)` and zero lateral boundaries.
/// Time is an ordinary input dimension (dimension 0); the terminal face
/// `t = 1` is open, and the initial slice belongs to the boundary set.
pub fn burgers(nu: f64) -> Result<PdeProblem, ProblemError> {
    if !(nu.is_finite() && nu > 0.0) {
        return Err(ProblemError::InvalidParameter(format!(
            "viscosity must be positive, got {nu}"
        )));
    }
    let domain = DomainShape::axis_box(vec![(0.0, 1.0), (-1.0, 1.0)])
        .expect("static intervals")
        .with_open_face(0, true)
        .expect("axis 0 exists");
    let interior = ResidualSpec::new(2)
        .with_linear(LinearTerm::constant(
            1.0,
            DerivativeMultiIndex::new(vec![1, 0]).expect("valid"),
        ))
        .with_linear(LinearTerm::constant(
            -nu,
            DerivativeMultiIndex::new(vec![0, 2]).expect("valid"),
        ))
        .with_nonlinear(NonlinearTerm::advection(1, 1.0));
    let boundary_data: PointFn = Arc::new(|p: &[f64]| {
        if p[0] == 0.0 {
            -(PI * p[1]).sin()
        } else {
            0.0
        }
    });
    let reference: PointFn = Arc::new(move |p: &[f64]| burgers_reference(nu, p[0], p[1]));
    Ok(PdeProblem {
        key: format!("burgers-{nu}"),
        name: format!("viscous Burgers, nu = {nu}"),
        dim: 2,
        domain,
        interior,
        rhs: Arc::new(|_| 0.0),
        boundary: identity_spec(2),
        boundary_data,
        reference: Some(reference),
        advection_freeze: AdvectionFreeze::Value,
        crafted: None,
    })
}

// ---------------------------------------------------------------------------
// Nonlinear elliptic: −Δu + u³ = a on [0,1]².

fn elliptic_u(x: &[f64]) -> f64 {
    (PI * x[0]).sin() * (PI * x[1]).sin()
        + 4.0 * (4.0 * PI * x[0]).sin() * (4.0 * PI * x[1]).sin()
}

fn elliptic_du(x: &[f64], i: usize) -> f64 {
    let j = 1 - i;
    PI * (PI * x[i]).cos() * (PI * x[j]).sin()
        + 16.0 * PI * (4.0 * PI * x[i]).cos() * (4.0 * PI * x[j]).sin()
}

fn elliptic_d2u(x: &[f64], i: usize) -> f64 {
    let j = 1 - i;
    -PI * PI * (PI * x[i]).sin() * (PI * x[j]).sin()
        - 64.0 * PI * PI * (4.0 * PI * x[i]).sin() * (4.0 * PI * x[j]).sin()
}

/// `−Δu + u³ = a` with the two-frequency crafted solution and zero Dirichlet
/// data.
pub fn nonlinear_elliptic() -> Result<PdeProblem, ProblemError> {
    let domain = DomainShape::unit_box(2);
    let interior = ResidualSpec::new(2)
        .with_linear(LinearTerm::constant(
            -1.0,
            DerivativeMultiIndex::new(vec![2, 0]).expect("valid"),
        ))
        .with_linear(LinearTerm::constant(
            -1.0,
            DerivativeMultiIndex::new(vec![0, 2]).expect("valid"),
        ))
        .with_nonlinear(NonlinearTerm::power(3, 1.0).expect("p = 3"));
    let rhs: PointFn = Arc::new(|x: &[f64]| {
        let u = elliptic_u(x);
        -(elliptic_d2u(x, 0) + elliptic_d2u(x, 1)) + u * u * u
    });
    let crafted = Crafted {
        value: Arc::new(elliptic_u),
        first: Arc::new(elliptic_du),
        second: Arc::new(elliptic_d2u),
    };
    verify_crafted("elliptic", &domain, &interior, &rhs, &crafted)?;
    Ok(PdeProblem {
        key: "elliptic".into(),
        name: "nonlinear elliptic with two-frequency crafted solution".into(),
        dim: 2,
        domain,
        interior,
        rhs,
        boundary: identity_spec(2),
        // The crafted solution itself, so the problem stays well-posed on
        // irregular domains (where u* does not vanish on the boundary).
        boundary_data: Arc::new(elliptic_u),
        reference: Some(Arc::new(elliptic_u)),
        advection_freeze: AdvectionFreeze::Value,
        crafted: Some(crafted),
    })
}

// ---------------------------------------------------------------------------
// Eikonal: |∇u|² = 1 + εΔu on [0,1]², zero boundary.

/// Regularized Eikonal equation; the reference is the 401×401 FD oracle,
/// solved lazily on first use and cached for the process.
pub fn eikonal(eps: f64) -> Result<PdeProblem, ProblemError> {
    if !(eps.is_finite() && eps > 0.0) {
        return Err(ProblemError::InvalidParameter(format!(
            "regularization must be positive, got {eps}"
        )));
    }
    let interior = ResidualSpec::new(2)
        .with_linear(LinearTerm::constant(
            -eps,
            DerivativeMultiIndex::new(vec![2, 0]).expect("valid"),
        ))
        .with_linear(LinearTerm::constant(
            -eps,
            DerivativeMultiIndex::new(vec![0, 2]).expect("valid"),
        ))
        .with_nonlinear(NonlinearTerm::grad_squared(1.0));
    let reference: PointFn = Arc::new(move |p: &[f64]| {
        fd_eikonal_oracle(401, eps)
            .expect("the FD oracle converges for valid regularizations")
            .eval(p[0], p[1])
    });
    Ok(PdeProblem {
        key: "eikonal".into(),
        name: format!("regularized Eikonal, eps = {eps}"),
        dim: 2,
        domain: DomainShape::unit_box(2),
        interior,
        rhs: Arc::new(|_| 1.0),
        boundary: identity_spec(2),
        boundary_data: Arc::new(|_| 0.0),
        reference: Some(reference),
        advection_freeze: AdvectionFreeze::Value,
        crafted: None,
    })
}

// ---------------------------------------------------------------------------
// Allen–Cahn: Δu + γ(u³ − u) = a on [0,1]^d, γ = 1.

/// One crafted summand pair: value and derivatives of
/// `sin(a·x_i)cos(a·x_j)` for the two frequencies `a ∈ {2πβ, 2π}`.
fn ac_value(beta: f64, d: usize, x: &[f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..d {
        let j = (i + 1) % d;
        for a in [2.0 * PI * beta, 2.0 * PI] {
            total += (a * x[i]).sin() * (a * x[j]).cos();
        }
    }
    total
}

fn ac_first(beta: f64, d: usize, x: &[f64], k: usize) -> f64 {
    let mut total = 0.0;
    for i in 0..d {
        let j = (i + 1) % d;
        for a in [2.0 * PI * beta, 2.0 * PI] {
            if i == k {
                total += a * (a * x[i]).cos() * (a * x[j]).cos();
            }
            if j == k {
                total -= a * (a * x[i]).sin() * (a * x[j]).sin();
            }
        }
    }
    total
}

fn ac_second(beta: f64, d: usize, x: &[f64], k: usize) -> f64 {
    let mut total = 0.0;
    for i in 0..d {
        let j = (i + 1) % d;
        for a in [2.0 * PI * beta, 2.0 * PI] {
            if i == k || j == k {
                total -= a * a * (a * x[i]).sin() * (a * x[j]).cos();
            }
        }
    }
    total
}

/// Allen–Cahn with cyclic two-frequency crafted solution; `beta` is the high
/// frequency and `d ∈ {2, 4, 6}`.
pub fn allen_cahn(beta: f64, d: usize) -> Result<PdeProblem, ProblemError> {
    if ![2, 4, 6].contains(&d) {
        return Err(ProblemError::InvalidParameter(format!(
            "Allen–Cahn is registered for d in {{2, 4, 6}}, got {d}"
        )));
    }
    if !(beta.is_finite() && beta > 0.0) {
        return Err(ProblemError::InvalidParameter(format!(
            "frequency must be positive, got {beta}"
        )));
    }
    let gamma = 1.0;
    let domain = DomainShape::unit_box(d);
    let mut interior = ResidualSpec::new(d).with_linear(LinearTerm::constant(
        -gamma,
        DerivativeMultiIndex::zero(d),
    ));
    for i in 0..d {
        interior = interior.with_linear(LinearTerm::constant(
            1.0,
            DerivativeMultiIndex::single(d, i, 2).expect("valid"),
        ));
    }
    interior = interior.with_nonlinear(NonlinearTerm::power(3, gamma).expect("p = 3"));
    let rhs: PointFn = Arc::new(move |x: &[f64]| {
        let u = ac_value(beta, d, x);
        let lap: f64 = (0..d).map(|k| ac_second(beta, d, x, k)).sum();
        lap + gamma * (u * u * u - u)
    });
    let crafted = Crafted {
        value: Arc::new(move |x: &[f64]| ac_value(beta, d, x)),
        first: Arc::new(move |x: &[f64], k: usize| ac_first(beta, d, x, k)),
        second: Arc::new(move |x: &[f64], k: usize| ac_second(beta, d, x, k)),
    };
    let key = format!("allen-cahn-{d}d-{beta}");
    verify_crafted(&key, &domain, &interior, &rhs, &crafted)?;
    Ok(PdeProblem {
        key,
        name: format!("Allen–Cahn, d = {d}, frequency beta = {beta}"),
        dim: d,
        domain,
        interior,
        rhs,
        boundary: identity_spec(d),
        boundary_data: Arc::new(move |x: &[f64]| ac_value(beta, d, x)),
        reference: Some(Arc::new(move |x: &[f64]| ac_value(beta, d, x))),
        advection_freeze: AdvectionFreeze::Value,
        crafted: Some(crafted),
    })
}

// ---------------------------------------------------------------------------
// Darcy-type 6D: −∇·(c∇u) + u³ = a, expanded as −cΔu − ∇c·∇u + u³.

fn darcy_s(x: &[f64]) -> f64 {
    x.iter().map(|v| v.cos()).sum()
}

fn darcy_c(x: &[f64]) -> f64 {
    darcy_s(x).sin().exp()
}

fn darcy_dc(x: &[f64], i: usize) -> f64 {
    -darcy_c(x) * darcy_s(x).cos() * x[i].sin()
}

fn darcy_u(beta: f64, x: &[f64]) -> f64 {
    (beta * darcy_s(x)).sin().exp()
}

fn darcy_du(beta: f64, x: &[f64], i: usize) -> f64 {
    -beta * darcy_u(beta, x) * (beta * darcy_s(x)).cos() * x[i].sin()
}

fn darcy_d2u(beta: f64, x: &[f64], i: usize) -> f64 {
    let u = darcy_u(beta, x);
    let bs = beta * darcy_s(x);
    let (sin_i, cos_i) = x[i].sin_cos();
    beta * beta * u * sin_i * sin_i * (bs.cos() * bs.cos() - bs.sin())
        - beta * u * bs.cos() * cos_i
}

/// Six-dimensional Darcy-type equation with oscillatory conductivity; the
/// divergence form is expanded with the analytic `∇c`.
pub fn darcy6d(beta: f64) -> Result<PdeProblem, ProblemError> {
    if !(beta.is_finite() && beta > 0.0) {
        return Err(ProblemError::InvalidParameter(format!(
            "frequency must be positive, got {beta}"
        )));
    }
    let d = 6;
    let domain = DomainShape::unit_box(d);
    let mut interior = ResidualSpec::new(d);
    for i in 0..d {
        interior = interior
            .with_linear(LinearTerm::field(
                Arc::new(|x: &[f64]| -darcy_c(x)),
                DerivativeMultiIndex::single(d, i, 2).expect("valid"),
            ))
            .with_linear(LinearTerm::field(
                Arc::new(move |x: &[f64]| -darcy_dc(x, i)),
                DerivativeMultiIndex::single(d, i, 1).expect("valid"),
            ));
    }
    interior = interior.with_nonlinear(NonlinearTerm::power(3, 1.0).expect("p = 3"));
    let rhs: PointFn = Arc::new(move |x: &[f64]| {
        let c = darcy_c(x);
        let u = darcy_u(beta, x);
        let mut total = u * u * u;
        for i in 0..d {
            total -= c * darcy_d2u(beta, x, i) + darcy_dc(x, i) * darcy_du(beta, x, i);
        }
        total
    });
    let crafted = Crafted {
        value: Arc::new(move |x: &[f64]| darcy_u(beta, x)),
        first: Arc::new(move |x: &[f64], i: usize| darcy_du(beta, x, i)),
        second: Arc::new(move |x: &[f64], i: usize| darcy_d2u(beta, x, i)),
    };
    verify_crafted("darcy-6d", &domain, &interior, &rhs, &crafted)?;
    Ok(PdeProblem {
        key: "darcy-6d".into(),
        name: format!("6D Darcy-type with oscillatory conductivity, beta = {beta}"),
        dim: d,
        domain,
        interior,
        rhs,
        boundary: identity_spec(d),
        boundary_data: Arc::new(move |x: &[f64]| darcy_u(beta, x)),
        reference: Some(Arc::new(move |x: &[f64]| darcy_u(beta, x))),
        advection_freeze: AdvectionFreeze::Value,
        crafted: Some(crafted),
    })
}

// ---------------------------------------------------------------------------
// Registry.

pub const REGISTRY_KEYS: [&str; 9] = [
    "burgers-0.02",
    "burgers-0.001",
    "elliptic",
    "eikonal",
    "allen-cahn-2d-15",
    "allen-cahn-2d-20",
    "allen-cahn-4d-15",
    "allen-cahn-6d-15",
    "darcy-6d",
];

pub fn registry_keys() -> &'static [&'static str] {
    &REGISTRY_KEYS
}

/// Looks a benchmark up by its CLI key.
pub fn problem(key: &str) -> Result<PdeProblem, ProblemError> {
    let mut built = match key {
        "burgers-0.02" => burgers(0.02),
        "burgers-0.001" => burgers(0.001),
        "elliptic" => nonlinear_elliptic(),
        "eikonal" => eikonal(0.1),
        "allen-cahn-2d-15" => allen_cahn(15.0, 2),
        "allen-cahn-2d-20" => allen_cahn(20.0, 2),
        "allen-cahn-4d-15" => allen_cahn(15.0, 4),
        "allen-cahn-6d-15" => allen_cahn(15.0, 6),
        "darcy-6d" => darcy6d(6.0),
        _ => Err(ProblemError::UnknownKey {
            key: key.into(),
            available: REGISTRY_KEYS.join(", "),
        }),
    }?;
    // Normalize the key to the registry spelling (e.g. burgers' generic
    // constructor formats the viscosity).
    built.key = key.into();
    Ok(built)
}

impl PdeProblem {
    /// Full reference/residual consistency probe. Crafted solutions re-run
    /// the analytic 1000-point check; oracle-backed references are probed by
    /// finite differences (Burgers) or by re-evaluating the discrete
    /// residual at the oracle's own nodes (Eikonal).
    pub fn self_check(&self) -> Result<(), ProblemError> {
        if let Some(crafted) = &self.crafted {
            return verify_crafted(&self.key, &self.domain, &self.interior, &self.rhs, crafted);
        }
        if self.key.starts_with("burgers") {
            return self.burgers_fd_probe();
        }
        if self.key.starts_with("eikonal") {
            let eps = match &self.interior.linear.first() {
                Some(term) => -term.coefficient.value(&[0.0, 0.0]),
                None => 0.1,
            };
            let grid = fd_eikonal_oracle(401, eps)?;
            let worst = grid.max_interior_residual();
            if worst > 1e-10 {
                return Err(ProblemError::SelfCheckFailed {
                    key: self.key.clone(),
                    detail: format!("FD oracle nodal residual {worst} exceeds 1e-10"),
                });
            }
            return Ok(());
        }
        Ok(())
    }

    /// Finite-difference residual probe of the Cole–Hopf reference on a
    /// pre-shock window away from the steep region near x = 0.
    fn burgers_fd_probe(&self) -> Result<(), ProblemError> {
        let reference = self.reference.as_ref().expect("burgers has a reference");
        // Recover ν from the u_xx coefficient.
        let nu = self
            .interior
            .linear
            .iter()
            .find(|t| t.deriv.orders() == [0, 2])
            .map(|t| -t.coefficient.value(&[0.0, 0.0]))
            .expect("burgers has a viscosity term");
        let h = 1e-3;
        let mut worst = 0.0f64;
        for it in 0..10 {
            let t = 0.05 + 0.2 * (it as f64 / 9.0);
            for ix in 0..10 {
                let magnitude = 0.15 + 0.7 * (ix as f64 / 9.0);
                for sign in [-1.0, 1.0] {
                    let x = sign * magnitude;
                    let u = reference(&[t, x]);
                    let ut = (reference(&[t + h, x]) - reference(&[t - h, x])) / (2.0 * h);
                    let uxp = reference(&[t, x + h]);
                    let uxm = reference(&[t, x - h]);
                    let ux = (uxp - uxm) / (2.0 * h);
                    let uxx = (uxp - 2.0 * u + uxm) / (h * h);
                    let resid = ut + u * ux - nu * uxx;
                    let scale = 1.0f64
                        .max(ut.abs())
                        .max((u * ux).abs())
                        .max((nu * uxx).abs());
                    worst = worst.max(resid.abs() / scale);
                }
            }
        }
        if worst > 5e-3 {
            return Err(ProblemError::SelfCheckFailed {
                key: self.key.clone(),
                detail: format!("FD residual probe of the reference reached {worst} (> 5e-3)"),
            });
        }
        Ok(())
    }
}
