//! Finite-difference reference for the regularized Eikonal equation
//! `|∇u|² = 1 + ε Δu` on `[0,1]²` with zero Dirichlet boundary.
//!
//! Centered differences on a uniform grid, solved by Newton iteration with a
//! damped line search. Each Newton system is solved matrix-free by BiCGSTAB,
//! preconditioned with `(−εΔ_h)⁻¹` applied exactly through the sine transform
//! that diagonalizes the discrete Dirichlet Laplacian (dense symmetric
//! orthogonal DST-I factors, so an apply is four small matrix products).
//! Iterates are averaged over the square's symmetry group after every step;
//! the continuous problem is invariant under it, and this keeps the discrete
//! solution symmetric to rounding.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::DMatrix;

use super::ProblemError;

/// Converged FD solution on an `n × n` grid including the boundary ring.
#[derive(Clone, Debug)]
pub struct EikonalGrid {
    pub n: usize,
    pub eps: f64,
    /// Row-major `n × n`; `values[ix * n + iy]` is `u(ix·h, iy·h)`.
    values: Vec<f64>,
}

impl EikonalGrid {
    pub fn spacing(&self) -> f64 {
        1.0 / (self.n as f64 - 1.0)
    }

    pub fn node(&self, ix: usize, iy: usize) -> f64 {
        self.values[ix * self.n + iy]
    }

    /// Bilinear interpolation; queries are clamped to the unit square.
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        let h = self.spacing();
        let clamp = |v: f64| v.clamp(0.0, 1.0);
        let (x, y) = (clamp(x), clamp(y));
        let ix = ((x / h) as usize).min(self.n - 2);
        let iy = ((y / h) as usize).min(self.n - 2);
        let fx = (x - ix as f64 * h) / h;
        let fy = (y - iy as f64 * h) / h;
        let v00 = self.node(ix, iy);
        let v10 = self.node(ix + 1, iy);
        let v01 = self.node(ix, iy + 1);
        let v11 = self.node(ix + 1, iy + 1);
        v00 * (1.0 - fx) * (1.0 - fy)
            + v10 * fx * (1.0 - fy)
            + v01 * (1.0 - fx) * fy
            + v11 * fx * fy
    }

    /// Largest discrete residual over interior nodes, recomputed from the
    /// stored values.
    pub fn max_interior_residual(&self) -> f64 {
        let m = self.n - 2;
        let interior = DMatrix::from_fn(m, m, |a, b| self.node(a + 1, b + 1));
        residual(&interior, self.spacing(), self.eps)
            .iter()
            .fold(0.0f64, |acc, r| acc.max(r.abs()))
    }
}

fn shift_get(u: &DMatrix<f64>, a: isize, b: isize) -> f64 {
    let m = u.nrows() as isize;
    if a < 0 || b < 0 || a >= m || b >= m {
        0.0
    } else {
        u[(a as usize, b as usize)]
    }
}

fn residual(u: &DMatrix<f64>, h: f64, eps: f64) -> DMatrix<f64> {
    let m = u.nrows();
    let inv2h = 1.0 / (2.0 * h);
    let invh2 = 1.0 / (h * h);
    DMatrix::from_fn(m, m, |a, b| {
        let (a, b) = (a as isize, b as isize);
        let c = u[(a as usize, b as usize)];
        let xp = shift_get(u, a + 1, b);
        let xm = shift_get(u, a - 1, b);
        let yp = shift_get(u, a, b + 1);
        let ym = shift_get(u, a, b - 1);
        let dx = (xp - xm) * inv2h;
        let dy = (yp - ym) * inv2h;
        let lap = (xp + xm + yp + ym - 4.0 * c) * invh2;
        dx * dx + dy * dy - eps * lap - 1.0
    })
}

/// Linearization of the residual at the point where `dx`, `dy` were taken.
fn jacobian_apply(
    dx: &DMatrix<f64>,
    dy: &DMatrix<f64>,
    delta: &DMatrix<f64>,
    h: f64,
    eps: f64,
) -> DMatrix<f64> {
    let m = delta.nrows();
    let inv2h = 1.0 / (2.0 * h);
    let invh2 = 1.0 / (h * h);
    DMatrix::from_fn(m, m, |a, b| {
        let (ai, bi) = (a as isize, b as isize);
        let c = delta[(a, b)];
        let xp = shift_get(delta, ai + 1, bi);
        let xm = shift_get(delta, ai - 1, bi);
        let yp = shift_get(delta, ai, bi + 1);
        let ym = shift_get(delta, ai, bi - 1);
        2.0 * dx[(a, b)] * (xp - xm) * inv2h + 2.0 * dy[(a, b)] * (yp - ym) * inv2h
            - eps * (xp + xm + yp + ym - 4.0 * c) * invh2
    })
}

fn gradients(u: &DMatrix<f64>, h: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let m = u.nrows();
    let inv2h = 1.0 / (2.0 * h);
    let dx = DMatrix::from_fn(m, m, |a, b| {
        (shift_get(u, a as isize + 1, b as isize) - shift_get(u, a as isize - 1, b as isize))
            * inv2h
    });
    let dy = DMatrix::from_fn(m, m, |a, b| {
        (shift_get(u, a as isize, b as isize + 1) - shift_get(u, a as isize, b as isize - 1))
            * inv2h
    });
    (dx, dy)
}

struct Preconditioner {
    /// Symmetric orthogonal DST-I factor.
    s: DMatrix<f64>,
    /// 1D Dirichlet Laplacian eigenvalues scaled by ε.
    lambda: Vec<f64>,
}

impl Preconditioner {
    fn new(m: usize, h: f64, eps: f64) -> Self {
        let nm1 = (m + 1) as f64;
        let norm = (2.0 / nm1).sqrt();
        let s = DMatrix::from_fn(m, m, |k, i| {
            (std::f64::consts::PI * (k as f64 + 1.0) * (i as f64 + 1.0) / nm1).sin() * norm
        });
        let lambda = (0..m)
            .map(|k| {
                eps * (2.0 - 2.0 * (std::f64::consts::PI * (k as f64 + 1.0) / nm1).cos())
                    / (h * h)
            })
            .collect();
        Preconditioner { s, lambda }
    }

    /// Solves `−εΔ_h δ = r` exactly.
    fn solve(&self, r: &DMatrix<f64>) -> DMatrix<f64> {
        let mut t = &self.s * r * &self.s;
        for k in 0..t.nrows() {
            for l in 0..t.ncols() {
                t[(k, l)] /= self.lambda[k] + self.lambda[l];
            }
        }
        &self.s * t * &self.s
    }
}

fn dot(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
}

/// Preconditioned BiCGSTAB for `J δ = b`, matrix-free.
#[allow(clippy::too_many_arguments)]
fn bicgstab(
    dx: &DMatrix<f64>,
    dy: &DMatrix<f64>,
    b: &DMatrix<f64>,
    precond: &Preconditioner,
    h: f64,
    eps: f64,
    rel_tol: f64,
    max_iters: usize,
) -> DMatrix<f64> {
    let m = b.nrows();
    let mut x = DMatrix::zeros(m, m);
    let mut r = b.clone();
    let r_hat = r.clone();
    let b_norm = max_abs(b).max(f64::MIN_POSITIVE);
    let mut rho = 1.0f64;
    let mut alpha = 1.0f64;
    let mut omega = 1.0f64;
    let mut v = DMatrix::zeros(m, m);
    let mut p = DMatrix::zeros(m, m);
    for _ in 0..max_iters {
        let rho_next = dot(&r_hat, &r);
        if rho_next.abs() < 1e-300 {
            break;
        }
        let beta = (rho_next / rho) * (alpha / omega);
        rho = rho_next;
        p = &r + beta * (&p - omega * &v);
        let p_hat = precond.solve(&p);
        v = jacobian_apply(dx, dy, &p_hat, h, eps);
        alpha = rho / dot(&r_hat, &v);
        let s = &r - alpha * &v;
        if max_abs(&s) <= rel_tol * b_norm {
            x += alpha * &p_hat;
            break;
        }
        let s_hat = precond.solve(&s);
        let t = jacobian_apply(dx, dy, &s_hat, h, eps);
        let tt = dot(&t, &t);
        if tt == 0.0 {
            x += alpha * &p_hat;
            break;
        }
        omega = dot(&t, &s) / tt;
        x += alpha * &p_hat + omega * &s_hat;
        r = &s - omega * &t;
        if max_abs(&r) <= rel_tol * b_norm {
            break;
        }
    }
    x
}

/// Averages over the dihedral symmetry group of the square; the solution is
/// invariant, so this only removes rounding drift.
fn symmetrize(u: &DMatrix<f64>) -> DMatrix<f64> {
    let m = u.nrows();
    let last = m - 1;
    DMatrix::from_fn(m, m, |a, b| {
        let variants = [
            (a, b),
            (b, a),
            (last - a, b),
            (a, last - b),
            (last - b, a),
            (b, last - a),
            (last - a, last - b),
            (last - b, last - a),
        ];
        variants.iter().map(|&(i, j)| u[(i, j)]).sum::<f64>() / 8.0
    })
}

const NEWTON_LIMIT: usize = 500;

/// Newton stopping tolerance on the max-norm nodal residual. Rounding noise
/// in `εΔ_h u` alone is `O(ε·εmach·|u|/h²)`, so the achievable floor rises
/// with grid resolution; 5e-12 is comfortable at n = 101 and the h⁻² scaling
/// keeps the same safety margin on finer grids (8e-11 at n = 401, still
/// under the 1e-10 the oracle promises).
fn newton_tol(n: usize) -> f64 {
    let refinement = (n as f64 - 1.0) / 100.0;
    5e-12 * refinement * refinement
}

fn solve_grid(n: usize, eps: f64) -> Result<EikonalGrid, ProblemError> {
    let m = n - 2;
    let h = 1.0 / (n as f64 - 1.0);
    let precond = Preconditioner::new(m, h, eps);
    let mut u = DMatrix::zeros(m, m);
    let mut converged = false;
    let tol = newton_tol(n);
    for _ in 0..NEWTON_LIMIT {
        let r = residual(&u, h, eps);
        let r_norm = max_abs(&r);
        if r_norm <= tol {
            converged = true;
            break;
        }
        let (dx, dy) = gradients(&u, h);
        let delta = bicgstab(&dx, &dy, &(-&r), &precond, h, eps, 1e-6, 400);
        // Damped update: halve until the residual actually decreases.
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let trial = &u + step * &delta;
            if max_abs(&residual(&trial, h, eps)) < r_norm {
                u = symmetrize(&trial);
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            return Err(ProblemError::NoConvergence(NEWTON_LIMIT));
        }
    }
    if !converged {
        return Err(ProblemError::NoConvergence(NEWTON_LIMIT));
    }
    let mut values = vec![0.0f64; n * n];
    for a in 0..m {
        for b in 0..m {
            values[(a + 1) * n + (b + 1)] = u[(a, b)];
        }
    }
    Ok(EikonalGrid { n, eps, values })
}

/// Solutions keyed by `(n, eps.to_bits())`.
type OracleCache = Mutex<HashMap<(usize, u64), Arc<EikonalGrid>>>;

static CACHE: OnceLock<OracleCache> = OnceLock::new();

/// Solves (or fetches the cached) regularized Eikonal FD reference.
pub fn fd_eikonal_oracle(grid_n: usize, eps: f64) -> Result<Arc<EikonalGrid>, ProblemError> {
    if grid_n < 51 {
        return Err(ProblemError::InvalidParameter(format!(
            "FD oracle needs at least a 51-point grid, got {grid_n}"
        )));
    }
    if !(eps.is_finite() && eps > 0.0) {
        return Err(ProblemError::InvalidParameter(format!(
            "FD oracle regularization must be positive, got {eps}"
        )));
    }
    let key = (grid_n, eps.to_bits());
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(hit) = cache.lock().expect("oracle cache poisoned").get(&key) {
        return Ok(hit.clone());
    }
    let solved = Arc::new(solve_grid(grid_n, eps)?);
    cache
        .lock()
        .expect("oracle cache poisoned")
        .insert(key, solved.clone());
    Ok(solved)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_grid_solution_properties() {
        let grid = fd_eikonal_oracle(101, 0.1).unwrap();
        // Boundary exactly zero.
        for i in 0..101 {
            assert_eq!(grid.node(0, i), 0.0);
            assert_eq!(grid.node(100, i), 0.0);
            assert_eq!(grid.node(i, 0), 0.0);
            assert_eq!(grid.node(i, 100), 0.0);
        }
        // Converged discrete residual.
        assert!(grid.max_interior_residual() <= 1e-10);
        // Symmetry under coordinate swap and reflections.
        let mut max_asym = 0.0f64;
        for ix in 1..100 {
            for iy in 1..100 {
                let v = grid.node(ix, iy);
                max_asym = max_asym.max((v - grid.node(iy, ix)).abs());
                max_asym = max_asym.max((v - grid.node(100 - ix, iy)).abs());
            }
        }
        assert!(max_asym <= 1e-10, "asymmetry {max_asym}");
        // The center is the maximum and positive.
        let center = grid.node(50, 50);
        assert!(center > 0.0);
        let max = (0..101 * 101)
            .map(|k| grid.node(k / 101, k % 101))
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(center, max);
    }

    #[test]
    fn bilinear_eval_interpolates_nodes() {
        let grid = fd_eikonal_oracle(101, 0.1).unwrap();
        let h = grid.spacing();
        assert_eq!(grid.eval(50.0 * h, 50.0 * h), grid.node(50, 50));
        let mid = grid.eval(50.5 * h, 50.0 * h);
        let lo = grid.node(50, 50).min(grid.node(51, 50));
        let hi = grid.node(50, 50).max(grid.node(51, 50));
        assert!(mid >= lo && mid <= hi);
    }

    #[test]
    fn refinement_agrees_at_the_center() {
        let coarse = fd_eikonal_oracle(201, 0.1).unwrap();
        let fine = fd_eikonal_oracle(401, 0.1).unwrap();
        let a = coarse.eval(0.5, 0.5);
        let b = fine.eval(0.5, 0.5);
        assert!((a - b).abs() <= 1e-3 * b.abs(), "{a} vs {b}");
    }

    #[test]
    fn parameter_validation() {
        assert!(matches!(
            fd_eikonal_oracle(50, 0.1),
            Err(ProblemError::InvalidParameter(_))
        ));
        assert!(matches!(
            fd_eikonal_oracle(101, 0.0),
            Err(ProblemError::InvalidParameter(_))
        ));
    }
}
