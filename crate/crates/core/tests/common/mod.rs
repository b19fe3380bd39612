//! Deterministic check routines shared by the property and acceptance
//! suites. Each returns `Err(description)` on the first violated case so the
//! acceptance runner can aggregate them into a single verdict while the
//! property suite gets precise failure messages.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tensolve_core::{
    adam_fit, als_fit, collocation_weights, freeze, grid_sample, interp_weights, newton, problems,
    random_sample, residual_eval, rkhs_norms, solve_dimension, tensor_rkhs_norm_sq,
    training_gradients, training_objective, Decomposition, DerivativeMultiIndex, DesignRow,
    FactorModel, GramFactor, KernelFamily, KernelSpec, SolverConfig,
};

pub fn se_spec(ls: f64) -> KernelSpec {
    KernelSpec::new(KernelFamily::SquaredExponential, ls).unwrap()
}

/// Random CP model on `[0,1]^d` with squared-exponential factors.
pub fn cp_model(d: usize, rank: usize, n: usize, ls: f64, seed: u64) -> FactorModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FactorModel::init_random(
        Decomposition::Cp { rank },
        &vec![se_spec(ls); d],
        &vec![n; d],
        &vec![(0.0, 1.0); d],
        &mut rng,
    )
    .unwrap()
}

/// Random tensor-ring model on `[0,1]^d`.
pub fn tr_model(d: usize, ranks: &[usize], n: usize, ls: f64, seed: u64) -> FactorModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FactorModel::init_random(
        Decomposition::TensorRing {
            ranks: ranks.to_vec(),
        },
        &vec![se_spec(ls); d],
        &vec![n; d],
        &vec![(0.0, 1.0); d],
        &mut rng,
    )
    .unwrap()
}

fn err(message: String) -> Result<(), String> {
    Err(message)
}

/// Analytic kernel derivatives vs central finite differences, every family
/// and supported order pair, at seeded random points and hyperparameters.
pub fn check_kernel_derivatives() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let families = [
        (KernelFamily::SquaredExponential, 1e-5),
        (KernelFamily::Matern32, 1e-4),
        (KernelFamily::Matern52, 1e-4),
    ];
    let h = 1e-4;
    for (family, tol) in families {
        for _ in 0..60 {
            let ls = rng.random_range(0.3..2.0);
            let variance = rng.random_range(0.5..2.0);
            let spec = KernelSpec::new(family, ls).unwrap().with_variance(variance);
            let x: f64 = rng.random_range(-1.0..1.0);
            let mut y: f64 = rng.random_range(-1.0..1.0);
            // Matérn profiles kink at x = y; keep the stencil clear of it.
            if (x - y).abs() < 10.0 * h {
                y += 20.0 * h;
            }
            for dx in 0..=2usize {
                for dy in 0..=2usize {
                    if dx + dy == 0 || !family.supports(dx, dy) {
                        continue;
                    }
                    // Differentiate the next-lower analytic order once.
                    let exact = spec.eval(x, y, dx, dy).unwrap();
                    let fd = if dx > 0 {
                        (spec.eval(x + h, y, dx - 1, dy).unwrap()
                            - spec.eval(x - h, y, dx - 1, dy).unwrap())
                            / (2.0 * h)
                    } else {
                        (spec.eval(x, y + h, dx, dy - 1).unwrap()
                            - spec.eval(x, y - h, dx, dy - 1).unwrap())
                            / (2.0 * h)
                    };
                    let order = (dx + dy) as i32;
                    let scale = exact.abs().max(0.05 * variance / ls.powi(order));
                    if (exact - fd).abs() > tol * scale {
                        return err(format!(
                            "kernel {family} d({dx},{dy}) at ({x:.4},{y:.4}) ls={ls:.3}: \
                             analytic {exact:.6e} vs fd {fd:.6e}"
                        ));
                    }
                }
            }
        }
    }
    Ok(())
}

/// Evaluation is multilinear in each coefficient block: replacing `H_i` by
/// `αA + βB` evaluates to the same linear combination, for CP and TR.
pub fn check_multilinearity(trials: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for trial in 0..trials {
        let d = rng.random_range(2..=3usize);
        let seed = 1000 + trial as u64;
        let models: [FactorModel; 2] = if trial % 2 == 0 {
            let rank = rng.random_range(1..=4usize);
            [
                cp_model(d, rank, 7, 0.6, seed),
                cp_model(d, rank, 7, 0.6, seed + 500),
            ]
        } else {
            let ranks: Vec<usize> = (0..d).map(|_| rng.random_range(1..=3)).collect();
            [
                tr_model(d, &ranks, 7, 0.6, seed),
                tr_model(d, &ranks, 7, 0.6, seed + 500),
            ]
        };
        let [base, other] = models;
        let i = rng.random_range(0..d);
        let alpha: f64 = rng.random_range(-2.0..2.0);
        let beta: f64 = rng.random_range(-2.0..2.0);

        let ma = base.clone();
        let mut mb = base.clone();
        let mut mix = base.clone();
        mb.banks[i].h = other.banks[i].h.clone();
        mix.banks[i].h = alpha * &ma.banks[i].h + beta * &mb.banks[i].h;

        let x: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..1.0)).collect();
        let orders: Vec<usize> = (0..d).map(|_| rng.random_range(0..=1)).collect();
        let deriv = DerivativeMultiIndex::new(orders).unwrap();
        let va = ma.eval(&x, &deriv).unwrap();
        let vb = mb.eval(&x, &deriv).unwrap();
        let vmix = mix.eval(&x, &deriv).unwrap();
        let expected = alpha * va + beta * vb;
        let scale = va.abs().max(vb.abs()).max(1.0);
        if (vmix - expected).abs() > 1e-12 * scale {
            return err(format!(
                "multilinearity trial {trial}: mixed eval {vmix:.15e} vs \
                 combination {expected:.15e}"
            ));
        }
    }
    Ok(())
}

/// Derivatives keep the factorized structure: in d=2,
/// `∂²₁u(x) = w₁''(x₁)ᵀ H₁ H₂ᵀ w₂(x₂)` assembled independently.
pub fn check_derivative_structure() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    for trial in 0..40 {
        let rank = rng.random_range(1..=4usize);
        let model = cp_model(2, rank, 9, 0.5, 2000 + trial);
        let x1: f64 = rng.random_range(0.0..1.0);
        let x2: f64 = rng.random_range(0.0..1.0);

        let b1 = &model.banks[0];
        let b2 = &model.banks[1];
        let w1 = interp_weights(&b1.gram, &b1.spec, x1, 2).unwrap();
        let w2 = interp_weights(&b2.gram, &b2.spec, x2, 0).unwrap();
        let manual = (b1.h.tr_mul(&w1)).dot(&b2.h.tr_mul(&w2));

        let deriv = DerivativeMultiIndex::new(vec![2, 0]).unwrap();
        let direct = model.eval(&[x1, x2], &deriv).unwrap();
        if (direct - manual).abs() > 1e-12 * manual.abs().max(1.0) {
            return err(format!(
                "derivative structure trial {trial}: eval {direct:.15e} vs \
                 manual assembly {manual:.15e}"
            ));
        }
    }
    Ok(())
}

/// Tensor-norm bound: `‖u‖_⊗ ≤ [(1/d)·Σ_i Trace(K_i⁻¹H_iH_iᵀ)]^{d/2}` over
/// random CP models.
pub fn check_rkhs_bound(models: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    for trial in 0..models {
        let d = rng.random_range(2..=3usize);
        let rank = rng.random_range(1..=4usize);
        let n = rng.random_range(4..=10usize);
        let ls = rng.random_range(0.2..1.0);
        let model = cp_model(d, rank, n, ls, 3000 + trial as u64);
        let tensor_norm = tensor_rkhs_norm_sq(&model).unwrap().max(0.0).sqrt();
        let mean_penalty = rkhs_norms(&model).iter().sum::<f64>() / d as f64;
        let bound = mean_penalty.powf(d as f64 / 2.0);
        if tensor_norm > bound + 1e-9 {
            return err(format!(
                "rkhs bound trial {trial} (d={d}, R={rank}): tensor norm \
                 {tensor_norm:.12e} exceeds bound {bound:.12e}"
            ));
        }
    }
    Ok(())
}

/// `solve_dimension` against dense brute-force regularized least squares on
/// random small systems.
pub fn check_dense_oracle(systems: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(45);
    for trial in 0..systems {
        let n = rng.random_range(3..=8usize);
        let c = rng.random_range(1..=4usize);
        let m = rng.random_range(5..=25usize);
        let nc = n * c;

        let ls = rng.random_range(0.3..1.5);
        let spec = se_spec(ls).with_nugget(1e-9);
        // Distinct, jittered locations on [0, 1].
        let locations: Vec<f64> = (0..n)
            .map(|i| (i as f64 + rng.random_range(0.05..0.45)) / n as f64)
            .collect();
        let gram = GramFactor::build(&spec, &locations).unwrap();

        let rows: Vec<DesignRow> = (0..m)
            .map(|_| DesignRow {
                b: DVector::from_fn(nc, |_, _| rng.random_range(-1.0..1.0)),
                g: rng.random_range(-1.0..1.0),
                weight: rng.random_range(0.1..10.0),
            })
            .collect();

        let solved = solve_dimension(&rows, &gram, c).unwrap();

        // Dense normal equations: (blockdiag(K⁻¹) + Σ w bbᵀ) h = Σ w g b.
        let k_inv = gram.solve_matrix(&DMatrix::identity(n, n));
        let mut a = DMatrix::zeros(nc, nc);
        for block in 0..c {
            a.view_mut((block * n, block * n), (n, n)).copy_from(&k_inv);
        }
        let mut rhs = DVector::zeros(nc);
        for row in &rows {
            a.ger(row.weight, &row.b, &row.b, 1.0);
            rhs.axpy(row.weight * row.g, &row.b, 1.0);
        }
        let dense = a
            .cholesky()
            .ok_or_else(|| format!("dense oracle system {trial} not SPD"))?
            .solve(&rhs);

        let fast = DVector::from_column_slice(solved.as_slice());
        let diff = (&fast - &dense).norm();
        if diff > 1e-8 * dense.norm().max(1.0) {
            return err(format!(
                "dense oracle trial {trial} (n={n}, c={c}, m={m}): \
                 ‖fast − dense‖ = {diff:.3e}"
            ));
        }
    }
    Ok(())
}

/// Both linearizers are tangent: the surrogate residual at the expansion
/// point equals the true nonlinear residual, on every benchmark family.
pub fn check_tangency() -> Result<(), String> {
    for key in ["elliptic", "burgers-0.02", "eikonal", "allen-cahn-2d-15"] {
        let problem = problems::problem(key).unwrap();
        let d = problem.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(4001);
        let model = FactorModel::init_random(
            Decomposition::Cp { rank: 3 },
            &vec![se_spec(0.5); d],
            &vec![8; d],
            &problem.domain.bounding_box(),
            &mut rng,
        )
        .unwrap();
        let colloc = random_sample(&problem.domain, 30, 10, 46).unwrap();
        let points = colloc.interior;
        let rhs: Vec<f64> = points.iter().map(|p| (problem.rhs)(p)).collect();

        let frozen = freeze(
            &problem.interior,
            &model,
            &points,
            &rhs,
            problem.advection_freeze,
        )
        .unwrap();
        let tangent = newton(&problem.interior, &model, &points, &rhs).unwrap();
        for (name, lr) in [("freeze", &frozen), ("newton", &tangent)] {
            let table = collocation_weights(&model, &points, &lr.required_orders()).unwrap();
            let surrogate = lr.surrogate_residuals_with(&model, &table).unwrap();
            for (i, s) in surrogate.iter().enumerate() {
                let p = points.point(i);
                let truth = residual_eval(&model, &problem.interior, p).unwrap() - rhs[i];
                if (s - truth).abs() > 1e-10 * truth.abs().max(1.0) {
                    return err(format!(
                        "{key} {name} tangency at point {i}: surrogate {s:.12e} \
                         vs true residual {truth:.12e}"
                    ));
                }
            }
        }
    }
    Ok(())
}

/// The analytic training gradient matches central finite differences of the
/// training objective to 1e-4 relative.
pub fn check_adam_gradient() -> Result<(), String> {
    let problem = problems::problem("elliptic").unwrap();
    let colloc = grid_sample(&problem.domain, &[7, 7]).unwrap();
    let model = cp_model(2, 2, 8, 0.4, 5000);
    let cfg = SolverConfig {
        alpha_interior: 1e4,
        alpha_boundary: 1e4,
        ..SolverConfig::default()
    };
    let (_, grads) = training_gradients(&model, &problem, &colloc, &cfg)
        .map_err(|e| format!("gradient computation failed: {e}"))?;
    let grad_scale = grads
        .iter()
        .flat_map(|g| g.iter())
        .fold(0.0f64, |acc, g| acc.max(g.abs()));

    let mut rng = ChaCha8Rng::seed_from_u64(46);
    for _ in 0..12 {
        let bank = rng.random_range(0..2usize);
        let slot = rng.random_range(0..model.banks[bank].h.len());
        let h = 1e-6;
        let mut plus = model.clone();
        let mut minus = model.clone();
        plus.banks[bank].h.as_mut_slice()[slot] += h;
        minus.banks[bank].h.as_mut_slice()[slot] -= h;
        let op = training_objective(&plus, &problem, &colloc, &cfg)
            .map_err(|e| format!("objective failed: {e}"))?;
        let om = training_objective(&minus, &problem, &colloc, &cfg)
            .map_err(|e| format!("objective failed: {e}"))?;
        let fd = (op - om) / (2.0 * h);
        let analytic = grads[bank].as_slice()[slot];
        let tol = 1e-4 * analytic.abs().max(fd.abs()).max(1e-6 * grad_scale);
        if (fd - analytic).abs() > tol {
            return err(format!(
                "gradient check bank {bank} slot {slot}: analytic \
                 {analytic:.9e} vs fd {fd:.9e}"
            ));
        }
    }
    Ok(())
}

fn tiny_solver() -> SolverConfig {
    SolverConfig {
        alpha_interior: 1e6,
        alpha_boundary: 1e6,
        outer_iters: 4,
        ..SolverConfig::default()
    }
}

/// Same seed, same machine state → bit-identical traces and coefficients,
/// for both trainers.
pub fn check_bit_identical_rerun() -> Result<(), String> {
    let problem = problems::problem("elliptic").unwrap();
    let colloc = grid_sample(&problem.domain, &[9, 9]).unwrap();
    let cfg = tiny_solver();

    let fit = |trainer: &str| {
        let model = cp_model(2, 3, 10, 0.3, 77);
        match trainer {
            "als" => als_fit(model, &problem, &colloc, &cfg).unwrap(),
            _ => {
                let params = tensolve_core::AdamParams {
                    steps: 25,
                    ..Default::default()
                };
                adam_fit(model, &problem, &colloc, &cfg, &params).unwrap()
            }
        }
    };
    for trainer in ["als", "adam"] {
        let (model_a, trace_a) = fit(trainer);
        let (model_b, trace_b) = fit(trainer);
        for (i, (ra, rb)) in trace_a.records.iter().zip(&trace_b.records).enumerate() {
            if ra.objective.to_bits() != rb.objective.to_bits() {
                return err(format!(
                    "{trainer} rerun diverges at record {i}: {:.17e} vs {:.17e}",
                    ra.objective, rb.objective
                ));
            }
        }
        for (i, (ba, bb)) in model_a.banks.iter().zip(&model_b.banks).enumerate() {
            if ba.h.as_slice() != bb.h.as_slice() {
                return err(format!("{trainer} rerun coefficients differ in bank {i}"));
            }
        }
    }
    Ok(())
}
