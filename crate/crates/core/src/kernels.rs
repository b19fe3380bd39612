//! One-dimensional covariance functions with analytic derivatives, Gram
//! construction, and a cached triangular factorization for Gram solves.
//!
//! Every factor function along dimension `i` is a kernel interpolant
//! `f(x) = κ(x, γ)ᵀ K⁻¹ η` over fixed inducing locations `γ`, so the rest of
//! the crate only ever needs three things from a kernel: cross-covariance
//! values (with derivatives on the evaluation side), the inducing-point Gram
//! matrix `K = κ(γ, γ) + nugget·I`, and solves against its Cholesky factor.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Covariance families supported for factor functions.
///
/// Smoothness limits the derivative orders a family can serve: Matérn-3/2 is
/// `C²` as a covariance, so its cross-derivatives exist only up to total
/// order 2 (the second derivative at `x = y` is the one-sided `r → 0⁺` limit;
/// the third derivative jumps there). Squared-exponential and Matérn-5/2
/// support up to two derivatives per argument.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    SquaredExponential,
    Matern32,
    Matern52,
}

impl KernelFamily {
    /// Whether the family's smoothness admits `∂_x^dx ∂_y^dy k(x, y)`.
    pub fn supports(self, dx: usize, dy: usize) -> bool {
        match self {
            KernelFamily::SquaredExponential | KernelFamily::Matern52 => dx <= 2 && dy <= 2,
            KernelFamily::Matern32 => dx <= 2 && dy <= 2 && dx + dy <= 2,
        }
    }
}

impl std::fmt::Display for KernelFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            KernelFamily::SquaredExponential => "squared_exponential",
            KernelFamily::Matern32 => "matern32",
            KernelFamily::Matern52 => "matern52",
        };
        f.write_str(name)
    }
}

/// A 1-D covariance with its hyperparameters.
///
/// `nugget` is added to the diagonal of inducing-point Gram matrices only,
/// never to cross-covariances.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub length_scale: f64,
    #[serde(default = "default_variance")]
    pub variance: f64,
    #[serde(default = "default_nugget")]
    pub nugget: f64,
}

fn default_variance() -> f64 {
    1.0
}

/// Default Gram nugget; small enough not to disturb interpolation at the
/// targeted error levels, large enough to keep dense SE Grams factorizable.
fn default_nugget() -> f64 {
    1e-9
}

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("invalid kernel hyperparameter: {0}")]
    InvalidHyperparameter(String),
    #[error("{family} does not support derivative orders (dx={dx}, dy={dy})")]
    UnsupportedDerivativeOrder {
        family: KernelFamily,
        dx: usize,
        dy: usize,
    },
    #[error("inducing locations too close: minimum pairwise gap {gap:.3e} <= 1e-12")]
    DuplicateLocations { gap: f64 },
    #[error("Gram matrix is not positive definite (size {n}, nugget {nugget:.3e})")]
    FactorizationFailed { n: usize, nugget: f64 },
    #[error("at least one inducing location is required")]
    EmptyLocations,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, length_scale: f64) -> Result<Self, KernelError> {
        let spec = KernelSpec {
            family,
            length_scale,
            variance: default_variance(),
            nugget: default_nugget(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_variance(mut self, variance: f64) -> Self {
        self.variance = variance;
        self
    }

    pub fn with_nugget(mut self, nugget: f64) -> Self {
        self.nugget = nugget;
        self
    }

    pub fn validate(&self) -> Result<(), KernelError> {
        if !(self.length_scale > 0.0 && self.length_scale.is_finite()) {
            return Err(KernelError::InvalidHyperparameter(format!(
                "length_scale must be positive and finite, got {}",
                self.length_scale
            )));
        }
        if !(self.variance > 0.0 && self.variance.is_finite()) {
            return Err(KernelError::InvalidHyperparameter(format!(
                "variance must be positive and finite, got {}",
                self.variance
            )));
        }
        if !(self.nugget >= 0.0 && self.nugget.is_finite()) {
            return Err(KernelError::InvalidHyperparameter(format!(
                "nugget must be non-negative and finite, got {}",
                self.nugget
            )));
        }
        Ok(())
    }

    /// `∂_x^dx ∂_y^dy k(x, y)`.
    ///
    /// Stationarity reduces every cross-derivative to a 1-D derivative of the
    /// profile `k(s)` at `s = x − y`: `∂_x^dx ∂_y^dy k = (−1)^dy k^(dx+dy)(s)`.
    pub fn eval(&self, x: f64, y: f64, dx: usize, dy: usize) -> Result<f64, KernelError> {
        if !self.family.supports(dx, dy) {
            return Err(KernelError::UnsupportedDerivativeOrder {
                family: self.family,
                dx,
                dy,
            });
        }
        let value = self.profile_derivative(x - y, dx + dy);
        Ok(if dy % 2 == 1 { -value } else { value })
    }

    /// `dⁿ/dsⁿ k(s)` for the stationary profile of the family.
    fn profile_derivative(&self, s: f64, n: usize) -> f64 {
        let v = self.variance;
        let ell = self.length_scale;
        match self.family {
            KernelFamily::SquaredExponential => {
                // dⁿ/duⁿ e^{−u²/2} = (−1)ⁿ Heₙ(u) e^{−u²/2} (probabilists' Hermite).
                let u = s / ell;
                let he = match n {
                    0 => 1.0,
                    1 => u,
                    2 => u * u - 1.0,
                    3 => u * (u * u - 3.0),
                    4 => u * u * (u * u - 6.0) + 3.0,
                    _ => unreachable!("order limited by KernelFamily::supports"),
                };
                let sign = if n % 2 == 1 { -1.0 } else { 1.0 };
                sign * v * he * (-0.5 * u * u).exp() / ell.powi(n as i32)
            }
            KernelFamily::Matern32 => {
                let a = 3.0_f64.sqrt() / ell;
                let t = a * s.abs();
                let e = (-t).exp();
                match n {
                    0 => v * (1.0 + t) * e,
                    1 => -v * a * a * s * e,
                    // Continuous through s = 0; only the third derivative kinks.
                    2 => v * a * a * (t - 1.0) * e,
                    _ => unreachable!("order limited by KernelFamily::supports"),
                }
            }
            KernelFamily::Matern52 => {
                let a = 5.0_f64.sqrt() / ell;
                let t = a * s.abs();
                let e = (-t).exp();
                match n {
                    0 => v * (1.0 + t + t * t / 3.0) * e,
                    1 => -v * a * a / 3.0 * s * (1.0 + t) * e,
                    2 => -v * a * a / 3.0 * (1.0 + t - t * t) * e,
                    3 => v * a.powi(4) / 3.0 * s * (3.0 - t) * e,
                    4 => v * a.powi(4) / 3.0 * (3.0 - 5.0 * t + t * t) * e,
                    _ => unreachable!("order limited by KernelFamily::supports"),
                }
            }
        }
    }
}

/// Inducing locations with their factorized Gram matrix `K + nugget·I = L·Lᵀ`.
///
/// Built once per run (inducing points stay fixed during training) and shared
/// read-only afterwards; every `K⁻¹·v` goes through the cached factor.
#[derive(Clone, Debug)]
pub struct GramFactor {
    locations: Vec<f64>,
    matrix: DMatrix<f64>,
    l: DMatrix<f64>,
}

impl GramFactor {
    pub fn build(spec: &KernelSpec, locations: &[f64]) -> Result<Self, KernelError> {
        spec.validate()?;
        if locations.is_empty() {
            return Err(KernelError::EmptyLocations);
        }
        if locations.iter().any(|x| !x.is_finite()) {
            return Err(KernelError::InvalidHyperparameter(
                "inducing locations must be finite".into(),
            ));
        }
        if locations.len() > 1 {
            let mut sorted = locations.to_vec();
            sorted.sort_by(f64::total_cmp);
            let gap = sorted
                .windows(2)
                .map(|w| w[1] - w[0])
                .fold(f64::INFINITY, f64::min);
            if gap <= 1e-12 {
                return Err(KernelError::DuplicateLocations { gap });
            }
        }
        let n = locations.len();
        let mut matrix = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let k = spec
                    .eval(locations[i], locations[j], 0, 0)
                    .expect("order (0,0) is supported by every family");
                matrix[(i, j)] = k;
                matrix[(j, i)] = k;
            }
            matrix[(i, i)] += spec.nugget;
        }
        let chol = nalgebra::Cholesky::new(matrix.clone()).ok_or(
            KernelError::FactorizationFailed {
                n,
                nugget: spec.nugget,
            },
        )?;
        Ok(GramFactor {
            locations: locations.to_vec(),
            matrix,
            l: chol.unpack(),
        })
    }

    pub fn n(&self) -> usize {
        self.locations.len()
    }

    pub fn locations(&self) -> &[f64] {
        &self.locations
    }

    /// The regularized Gram `K + nugget·I`.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Lower Cholesky factor `L`.
    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    /// `K⁻¹ b` for each column of `b`.
    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let y = self
            .l
            .solve_lower_triangular(b)
            .expect("Cholesky factor has positive diagonal");
        self.l
            .tr_solve_lower_triangular(&y)
            .expect("Cholesky factor has positive diagonal")
    }

    /// `K⁻¹ v`.
    pub fn solve(&self, v: &DVector<f64>) -> DVector<f64> {
        let y = self
            .l
            .solve_lower_triangular(v)
            .expect("Cholesky factor has positive diagonal");
        self.l
            .tr_solve_lower_triangular(&y)
            .expect("Cholesky factor has positive diagonal")
    }

    /// `L⁻¹ b` for each column of `b` (whitening transform).
    pub fn forward_solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.l
            .solve_lower_triangular(b)
            .expect("Cholesky factor has positive diagonal")
    }

    /// `Trace(K⁻¹ H Hᵀ) = ‖L⁻¹H‖²_F`, the RKHS penalty of the columns of `H`.
    pub fn rkhs_penalty(&self, h: &DMatrix<f64>) -> f64 {
        self.forward_solve_matrix(h).norm_squared()
    }
}

/// Interpolation weights `w^(order)(x) = K⁻¹ ∂_x^order κ(γ, x)`.
///
/// Differentiation acts on the evaluation argument only; the Gram side is
/// untouched, so a factor value/derivative is always the plain inner product
/// `η ᵀ w^(order)(x)`.
pub fn interp_weights(
    gf: &GramFactor,
    spec: &KernelSpec,
    x: f64,
    order: usize,
) -> Result<DVector<f64>, KernelError> {
    let kappa = cross_covariance(gf, spec, x, order)?;
    Ok(gf.solve(&kappa))
}

/// `∂_x^order κ(γ, x)` as a dense vector over the inducing locations.
pub(crate) fn cross_covariance(
    gf: &GramFactor,
    spec: &KernelSpec,
    x: f64,
    order: usize,
) -> Result<DVector<f64>, KernelError> {
    let mut kappa = DVector::zeros(gf.n());
    for (j, &gamma) in gf.locations().iter().enumerate() {
        kappa[j] = spec.eval(gamma, x, 0, order)?;
    }
    Ok(kappa)
}

/// Equally spaced inducing locations over `[lo, hi]`, endpoints included.
pub fn equally_spaced(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (lo + hi)];
    }
    let h = (hi - lo) / (n - 1) as f64;
    (0..n)
        .map(|k| if k == n - 1 { hi } else { lo + k as f64 * h })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec(family: KernelFamily, ls: f64) -> KernelSpec {
        KernelSpec::new(family, ls).unwrap()
    }

    /// Central finite difference of `spec.eval(·, y, 0, 0)` in the first slot.
    fn fd_dx(spec: &KernelSpec, x: f64, y: f64, dx: usize, h: f64) -> f64 {
        let k = |x: f64| spec.eval(x, y, 0, 0).unwrap();
        match dx {
            1 => (k(x + h) - k(x - h)) / (2.0 * h),
            2 => (k(x + h) - 2.0 * k(x) + k(x - h)) / (h * h),
            _ => unreachable!(),
        }
    }

    #[test]
    fn se_value_at_coincident_points_is_variance() {
        let s = spec(KernelFamily::SquaredExponential, 1.0);
        assert_eq!(s.eval(0.3, 0.3, 0, 0).unwrap(), 1.0);
    }

    #[test]
    fn matern32_first_derivative_vanishes_at_coincident_points() {
        for ls in [0.05, 0.7, 3.0] {
            let s = spec(KernelFamily::Matern32, ls);
            assert_eq!(s.eval(0.42, 0.42, 1, 0).unwrap(), 0.0);
        }
    }

    #[test]
    fn se_second_derivative_matches_finite_difference() {
        let s = spec(KernelFamily::SquaredExponential, 0.5);
        // At |x − y| = ℓ the profile's second derivative crosses zero, so the
        // comparison is absolute.
        let exact = s.eval(0.2, 0.7, 2, 0).unwrap();
        let fd = fd_dx(&s, 0.2, 0.7, 2, 1e-4);
        assert!((exact - fd).abs() <= 1e-6, "exact {exact} vs fd {fd}");
    }

    #[test]
    fn derivatives_match_finite_differences_at_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let families = [
            (KernelFamily::SquaredExponential, 1e-5),
            (KernelFamily::Matern32, 1e-4),
            (KernelFamily::Matern52, 1e-4),
        ];
        let h = 1e-4;
        for (family, tol) in families {
            for _ in 0..100 {
                let ls = rng.random_range(0.3..2.0);
                let var = rng.random_range(0.5..2.0);
                let s = spec(family, ls).with_variance(var);
                let x: f64 = rng.random_range(-1.0..1.0);
                let mut y: f64 = rng.random_range(-1.0..1.0);
                // Matérn profiles kink at x = y; keep FD stencils clear of it.
                if (x - y).abs() < 10.0 * h {
                    y += 20.0 * h;
                }
                for dx in 1..=2usize {
                    if !family.supports(dx, 0) {
                        continue;
                    }
                    let exact = s.eval(x, y, dx, 0).unwrap();
                    let fd = fd_dx(&s, x, y, dx, h);
                    let scale = exact.abs().max(0.05 * var / ls.powi(dx as i32));
                    assert!(
                        (exact - fd).abs() <= tol * scale,
                        "{family} dx={dx}: exact {exact} vs fd {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn cross_derivative_sign_follows_argument_side() {
        // ∂_y k = −∂_x k for stationary kernels.
        let s = spec(KernelFamily::Matern52, 0.8);
        let dxk = s.eval(0.1, 0.6, 1, 0).unwrap();
        let dyk = s.eval(0.1, 0.6, 0, 1).unwrap();
        assert_eq!(dxk, -dyk);
        // Symmetric in (x, y) when dx = dy.
        let a = s.eval(0.1, 0.6, 1, 1).unwrap();
        let b = s.eval(0.6, 0.1, 1, 1).unwrap();
        assert!((a - b).abs() <= 1e-15 * a.abs());
    }

    #[test]
    fn unsupported_orders_are_rejected() {
        let m32 = spec(KernelFamily::Matern32, 1.0);
        assert!(matches!(
            m32.eval(0.0, 0.5, 2, 1),
            Err(KernelError::UnsupportedDerivativeOrder { .. })
        ));
        let se = spec(KernelFamily::SquaredExponential, 1.0);
        assert!(se.eval(0.0, 0.5, 2, 2).is_ok());
        assert!(matches!(
            se.eval(0.0, 0.5, 3, 0),
            Err(KernelError::UnsupportedDerivativeOrder { .. })
        ));
    }

    #[test]
    fn build_gram_single_location_is_variance() {
        let s = spec(KernelFamily::SquaredExponential, 1.0).with_nugget(0.0);
        let gf = GramFactor::build(&s, &[0.5]).unwrap();
        assert_eq!(gf.matrix()[(0, 0)], 1.0);
    }

    #[test]
    fn build_gram_equally_spaced_factorizes() {
        let s = spec(KernelFamily::SquaredExponential, 0.2).with_nugget(1e-9);
        let gf = GramFactor::build(&s, &equally_spaced(0.0, 1.0, 20)).unwrap();
        for i in 0..20 {
            assert!(gf.l()[(i, i)] > 0.0);
        }
    }

    #[test]
    fn build_gram_rejects_duplicate_locations() {
        let s = spec(KernelFamily::SquaredExponential, 1.0);
        assert!(matches!(
            GramFactor::build(&s, &[0.1, 0.1]),
            Err(KernelError::DuplicateLocations { .. })
        ));
    }

    #[test]
    fn gram_solve_inverts_to_working_precision() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = spec(KernelFamily::Matern52, 0.4).with_nugget(1e-9);
        let gf = GramFactor::build(&s, &equally_spaced(-1.0, 1.0, 30)).unwrap();
        let v = DVector::from_fn(30, |_, _| rng.random_range(-1.0..1.0));
        let residual = gf.matrix() * gf.solve(&v) - &v;
        assert!(residual.norm() <= 1e-8 * v.norm());
    }

    #[test]
    fn interp_weights_reproduce_basis_at_inducing_points() {
        let s = spec(KernelFamily::SquaredExponential, 0.3).with_nugget(0.0);
        let locations = equally_spaced(0.0, 1.0, 12);
        let gf = GramFactor::build(&s, &locations).unwrap();
        let w = interp_weights(&gf, &s, locations[0], 0).unwrap();
        for j in 0..12 {
            let expected = if j == 0 { 1.0 } else { 0.0 };
            assert!((w[j] - expected).abs() <= 1e-8, "w[{j}] = {}", w[j]);
        }
    }

    #[test]
    fn interp_weights_order_one_matches_finite_difference() {
        // Individual weight components oscillate too sharply for stable
        // differencing; the well-conditioned statement is that the derivative
        // weights differentiate the interpolant of smooth data.
        let s = spec(KernelFamily::SquaredExponential, 0.25).with_nugget(1e-10);
        let locations = equally_spaced(0.0, 1.0, 24);
        let gf = GramFactor::build(&s, &locations).unwrap();
        let eta = DVector::from_iterator(24, locations.iter().map(|&g| (3.0 * g).sin()));
        let x = 0.37;
        let h = 1e-4;
        let df = interp_weights(&gf, &s, x, 1).unwrap().dot(&eta);
        let fp = interp_weights(&gf, &s, x + h, 0).unwrap().dot(&eta);
        let fm = interp_weights(&gf, &s, x - h, 0).unwrap().dot(&eta);
        let fd = (fp - fm) / (2.0 * h);
        assert!((df - fd).abs() <= 1e-5 * df.abs(), "{df} vs {fd}");
    }

    #[test]
    fn interp_weights_single_point() {
        let s = spec(KernelFamily::SquaredExponential, 1.0).with_nugget(0.0);
        let gf = GramFactor::build(&s, &[0.0]).unwrap();
        let w = interp_weights(&gf, &s, 0.0, 0).unwrap();
        assert_eq!(w.len(), 1);
        assert!((w[0] - 1.0).abs() <= 1e-14);
    }

    #[test]
    fn interpolant_reproduces_arbitrary_data_at_nodes() {
        let s = spec(KernelFamily::Matern32, 0.5).with_nugget(0.0);
        let locations = equally_spaced(0.0, 2.0, 9);
        let gf = GramFactor::build(&s, &locations).unwrap();
        let data: Vec<f64> = locations.iter().map(|x| (3.1 * x).sin() + 0.2).collect();
        for (k, &gamma) in locations.iter().enumerate() {
            let w = interp_weights(&gf, &s, gamma, 0).unwrap();
            let value: f64 = w.iter().zip(&data).map(|(wi, fi)| wi * fi).sum();
            assert!(
                (value - data[k]).abs() <= 1e-7,
                "node {k}: {value} vs {}",
                data[k]
            );
        }
    }

    #[test]
    fn rkhs_penalty_matches_columnwise_quadratic_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = spec(KernelFamily::SquaredExponential, 0.6).with_nugget(1e-8);
        let gf = GramFactor::build(&s, &equally_spaced(0.0, 1.0, 15)).unwrap();
        let h = DMatrix::from_fn(15, 4, |_, _| rng.random_range(-1.0..1.0));
        let mut by_column = 0.0;
        for c in 0..4 {
            let eta = DVector::from_column_slice(h.column(c).as_slice());
            by_column += eta.dot(&gf.solve(&eta));
        }
        let fast = gf.rkhs_penalty(&h);
        assert!((fast - by_column).abs() <= 1e-10 * by_column.abs());
    }
}
