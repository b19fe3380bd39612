//! Cole–Hopf reference for viscous Burgers with `u(0,x) = −sin(πx)`.
//!
//! Writing `u = −2ν φ_x/φ` turns the equation into the heat equation for
//! `φ` with `φ(0,·) ∝ f`, `f(y) = exp(−cos(πy)/(2πν))`. Convolving with the
//! heat kernel and substituting `y = x − 2√(νt)·z` gives
//!
//! `u(t,x) = −Σ_k w_k sin(π y_k) f(y_k) / Σ_k w_k f(y_k)`,  `y_k = x − 2√(νt) z_k`
//!
//! over Gauss–Hermite nodes `z_k` (weight `e^{−z²}`). Node counts double from
//! 200 until two successive evaluations agree to 1e-8 (cap 1600). Exponents
//! are shifted by their maximum before exponentiating so small viscosities
//! stay in range.

use std::f64::consts::PI;
use std::sync::OnceLock;

use nalgebra::DMatrix;

/// Node counts tried in order by the adaptive evaluation.
const NODE_COUNTS: [usize; 4] = [200, 400, 800, 1600];

struct GhTable {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

static TABLES: [OnceLock<GhTable>; 4] = [const { OnceLock::new() }; 4];

fn table(idx: usize) -> &'static GhTable {
    TABLES[idx].get_or_init(|| gauss_hermite(NODE_COUNTS[idx]))
}

/// `(p̃_n(z), p̃_n′(z))` of the orthonormal Hermite polynomial (weight
/// `e^{−z²}`) by the three-term recurrence; `p̃_n′ = √(2n)·p̃_{n−1}`.
/// Beyond roughly `|z| = √(2·709)` the unweighted values overflow, which is
/// reported as infinity and handled by the callers.
fn hermite_pair(n: usize, z: f64) -> (f64, f64) {
    let mut p1 = 1.0 / PI.powf(0.25);
    let mut p2 = 0.0f64;
    for j in 1..=n {
        let p3 = p2;
        p2 = p1;
        p1 = z * (2.0 / j as f64).sqrt() * p2 - ((j as f64 - 1.0) / j as f64).sqrt() * p3;
        if !p1.is_finite() {
            return (f64::INFINITY, f64::INFINITY);
        }
    }
    (p1, (2.0 * n as f64).sqrt() * p2)
}

/// Gauss–Hermite weight at node `z` via the Christoffel identity
/// `w = 1/Σ_{j<n} p̃_j(z)²` (equivalently `√π` times the squared first
/// eigenvector component in Golub–Welsch). Far-tail nodes overflow the sum;
/// their true weights are below the denormal range, so zero is the correctly
/// rounded result.
fn christoffel_weight(n: usize, z: f64) -> f64 {
    let mut p1 = 1.0 / PI.powf(0.25);
    let mut p2 = 0.0f64;
    let mut sum = p1 * p1;
    for j in 1..n {
        let p3 = p2;
        p2 = p1;
        p1 = z * (2.0 / j as f64).sqrt() * p2 - ((j as f64 - 1.0) / j as f64).sqrt() * p3;
        if !p1.is_finite() {
            return 0.0;
        }
        sum += p1 * p1;
    }
    1.0 / sum
}

/// Gauss–Hermite nodes and weights for weight `e^{−z²}` by Golub–Welsch:
/// nodes are eigenvalues of the symmetric tridiagonal Jacobi matrix
/// (off-diagonal `√(j/2)`), polished by a few Newton steps on the recurrence
/// and mirrored into exact ± pairs.
fn gauss_hermite(n: usize) -> GhTable {
    let mut jacobi = DMatrix::<f64>::zeros(n, n);
    for j in 1..n {
        let b = (j as f64 / 2.0).sqrt();
        jacobi[(j, j - 1)] = b;
        jacobi[(j - 1, j)] = b;
    }
    let mut eigenvalues: Vec<f64> = jacobi.symmetric_eigenvalues().iter().copied().collect();
    eigenvalues.sort_by(f64::total_cmp);

    let mut nodes = vec![0.0f64; n];
    let mut weights = vec![0.0f64; n];
    for k in 0..n / 2 {
        let mut z = 0.5 * (eigenvalues[n - 1 - k] - eigenvalues[k]);
        for _ in 0..3 {
            let (p, pp) = hermite_pair(n, z);
            let dz = p / pp;
            if !dz.is_finite() {
                break;
            }
            z -= dz;
        }
        let w = christoffel_weight(n, z);
        nodes[n - 1 - k] = z;
        nodes[k] = -z;
        weights[n - 1 - k] = w;
        weights[k] = w;
    }
    if n % 2 == 1 {
        weights[n / 2] = christoffel_weight(n, 0.0);
    }
    GhTable { nodes, weights }
}

fn evaluate(nu: f64, t: f64, x: f64, table: &GhTable) -> f64 {
    let spread = 2.0 * (nu * t).sqrt();
    let scale = 1.0 / (2.0 * PI * nu);
    // Shift exponents by the maximum so the largest term is e^0.
    let mut max_a = f64::NEG_INFINITY;
    for &z in &table.nodes {
        let a = -(PI * (x - spread * z)).cos() * scale;
        if a > max_a {
            max_a = a;
        }
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (&z, &w) in table.nodes.iter().zip(&table.weights) {
        let y = x - spread * z;
        let f = (-(PI * y).cos() * scale - max_a).exp();
        num += w * (PI * y).sin() * f;
        den += w * f;
    }
    -num / den
}

/// The reference solution `u(t, x)` for viscosity `nu`.
pub fn burgers_reference(nu: f64, t: f64, x: f64) -> f64 {
    if t <= 1e-14 {
        return -(PI * x).sin();
    }
    let mut prev = evaluate(nu, t, x, table(0));
    for idx in 1..NODE_COUNTS.len() {
        let val = evaluate(nu, t, x, table(idx));
        if (val - prev).abs() <= 1e-8 * val.abs().max(1.0) {
            return val;
        }
        prev = val;
    }
    prev
}

/// Like [`burgers_reference`] but with a fixed node count; exposed for
/// quadrature-refinement checks.
pub fn burgers_reference_fixed(nu: f64, t: f64, x: f64, n_nodes: usize) -> Option<f64> {
    if t <= 1e-14 {
        return Some(-(PI * x).sin());
    }
    let idx = NODE_COUNTS.iter().position(|&n| n == n_nodes)?;
    Some(evaluate(nu, t, x, table(idx)))
}
