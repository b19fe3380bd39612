//! Alternating least squares over factor banks, plus the full-gradient Adam
//! baseline on the identical objective.
//!
//! With every nonlinearity replaced by its linearization around the previous
//! outer iterate, the loss restricted to one dimension's inducing values
//! `H_i` is a ridge-regularized least-squares problem: each collocation
//! point contributes one design row `b_m` with `⟨b_m, vec(H_i)⟩ − g_m` equal
//! to the surrogate residual, and the RKHS penalty contributes the Tikhonov
//! block `I_{C_i} ⊗ K_i⁻¹`. [`assemble_dimension`] builds the rows,
//! [`solve_dimension`] solves the normal equations in a whitened basis
//! (substituting `vec(H_i) = (I ⊗ L_i) z` turns the penalty into `‖z‖²` and
//! bounds the system matrix below by the identity), and [`als_fit`] cycles
//! dimensions under a once-per-outer-iteration re-linearization.
//!
//! Loss traces always record the objective of the *true* nonlinear residual,
//! so values are comparable across re-linearizations and between trainers.

use std::collections::hash_map::Entry;
use std::collections::HashMap;
use std::io::{self, Write};
use std::path::Path;
use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec;
use crate::factor::{
    collocation_weights, eval_batch, reshape_factor, DerivativeMultiIndex, FactorModel,
    ModelError, WeightTable,
};
use crate::geometry::CollocationSet;
use crate::kernels::{GramFactor, KernelError};
use crate::linearize::{
    linearize_with_table, AdvectionFreeze, LinearizeError, LinearizedResidual,
};
use crate::problems::PdeProblem;

/// Largest per-dimension system `N_i·C_i` the closed-form solve will accept.
pub const MAX_SYSTEM: usize = 20_000;

#[derive(Debug, Error)]
pub enum AlsError {
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error("per-dimension system of size {size} exceeds the closed-form limit {MAX_SYSTEM}")]
    SystemTooLarge { size: usize },
    #[error("normal equations remained ill-conditioned after the diagonal bump retry")]
    IllConditioned,
    #[error("objective diverged to {objective:.6e} from an initial value of {initial:.6e}")]
    Diverged {
        objective: f64,
        initial: f64,
        trace: LossTrace,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Linearize(#[from] LinearizeError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("loss trace export failed: {0}")]
    TraceIo(#[from] io::Error),
}

/// Which linearization drives the per-outer-iteration surrogates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Linearizer {
    /// Hold one factor of each nonlinearity at the previous iterate.
    PartialFreeze,
    /// First-order Taylor expansion (tangent) around the previous iterate.
    #[default]
    Newton,
}

/// Solver hyperparameters shared by the ALS and Adam trainers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// α₁: interior residual weight.
    pub alpha_interior: f64,
    /// α₂: boundary residual weight.
    pub alpha_boundary: f64,
    pub outer_iters: usize,
    /// ALS cycles per re-linearization.
    #[serde(default = "default_inner_sweeps")]
    pub inner_sweeps: usize,
    #[serde(default)]
    pub linearizer: Linearizer,
    /// Freezing side for advection products under partial freezing.
    #[serde(default)]
    pub advection_freeze: AdvectionFreeze,
    /// Stop once the relative objective change stays below this for three
    /// consecutive outer iterations.
    #[serde(default = "default_convergence_tol")]
    pub convergence_tol: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_inner_sweeps() -> usize {
    1
}

fn default_convergence_tol() -> f64 {
    1e-8
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            alpha_interior: 1e8,
            alpha_boundary: 1e8,
            outer_iters: 50,
            inner_sweeps: default_inner_sweeps(),
            linearizer: Linearizer::default(),
            advection_freeze: AdvectionFreeze::default(),
            convergence_tol: default_convergence_tol(),
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), AlsError> {
        for (name, alpha) in [
            ("alpha_interior", self.alpha_interior),
            ("alpha_boundary", self.alpha_boundary),
        ] {
            if !(1.0..=1e10).contains(&alpha) {
                return Err(AlsError::InvalidConfig(format!(
                    "{name} must lie in [1, 1e10], got {alpha}"
                )));
            }
        }
        if self.inner_sweeps == 0 {
            return Err(AlsError::InvalidConfig(
                "inner_sweeps must be at least 1".into(),
            ));
        }
        if !(self.convergence_tol.is_finite() && self.convergence_tol >= 0.0) {
            return Err(AlsError::InvalidConfig(format!(
                "convergence_tol must be a non-negative real, got {}",
                self.convergence_tol
            )));
        }
        Ok(())
    }
}

/// One collocation point's contribution to the dimension-`i` least squares
/// problem: the residual there equals `⟨b, vec(H_i)⟩ − g`.
#[derive(Clone, Debug)]
pub struct DesignRow {
    /// Vectorized `B_m`, column-major over the `C_i` factor columns.
    pub b: DVector<f64>,
    /// Target (right-hand side minus the linearization constant).
    pub g: f64,
    /// `α₁/M_Ω` for interior rows, `α₂/M_∂` for boundary rows.
    pub weight: f64,
}

/// A linearized residual block paired with its weight table and row weight.
#[derive(Clone, Copy)]
pub struct DesignBlock<'a> {
    pub residual: &'a LinearizedResidual,
    pub cache: &'a WeightTable,
    pub weight: f64,
}

/// One loss-trace entry. `seconds` is cumulative wall-clock since the fit
/// started; `objective` always uses the true nonlinear residual.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iter: usize,
    pub objective: f64,
    pub interior_mse: f64,
    pub boundary_mse: f64,
    pub rkhs_penalty: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct LossTrace {
    pub records: Vec<TraceRecord>,
}

impl LossTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn final_objective(&self) -> Option<f64> {
        self.records.last().map(|r| r.objective)
    }

    /// CSV export with the columns
    /// `iter,objective,interior_mse,boundary_mse,rkhs_penalty,seconds`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(
            out,
            "iter,objective,interior_mse,boundary_mse,rkhs_penalty,seconds"
        )?;
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.iter, r.objective, r.interior_mse, r.boundary_mse, r.rkhs_penalty, r.seconds
            )?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> io::Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(io::BufWriter::new(file))
    }
}

/// Assembled design block in matrix form: `data` is the row-major `m × nc`
/// design matrix, `g` the targets, `w` the row weights.
struct Assembled {
    data: Vec<f64>,
    g: Vec<f64>,
    w: Vec<f64>,
    m: usize,
    nc: usize,
}

/// `β_m` columns for one linearized term: the cross-dimension factor
/// products multiplying `H_dim`'s contribution (CP: Hadamard of the other
/// dimensions' factor values; TR: the transposed trailing-product matrix).
fn beta_matrix(
    model: &FactorModel,
    dim: usize,
    deriv: &DerivativeMultiIndex,
    phi: &HashMap<(usize, usize), DMatrix<f64>>,
    m: usize,
) -> DMatrix<f64> {
    let d = model.dim();
    match &model.decomposition {
        crate::factor::Decomposition::Cp { rank } => {
            let mut acc = DMatrix::from_element(m, *rank, 1.0);
            for j in 0..d {
                if j != dim {
                    acc.component_mul_assign(&phi[&(j, deriv.order(j))]);
                }
            }
            acc
        }
        decomposition @ crate::factor::Decomposition::TensorRing { .. } => {
            let row_rank = decomposition.row_rank(dim, d);
            let col_rank = decomposition.col_rank(dim, d);
            let c = row_rank * col_rank;
            let data = exec::build_rows(m, c, |mm, out| {
                // u = Tr(A·F^dim·B) with A the prefix and B the suffix
                // product; folding gives β = vec((B·A)ᵀ) in F's column-major
                // layout.
                let mut prefix = DMatrix::<f64>::identity(row_rank, row_rank);
                for j in 0..dim {
                    prefix = if j == 0 {
                        factor_at(model, j, deriv, phi, mm)
                    } else {
                        prefix * factor_at(model, j, deriv, phi, mm)
                    };
                }
                let mut suffix = DMatrix::<f64>::identity(col_rank, col_rank);
                for j in dim + 1..d {
                    suffix = if j == dim + 1 {
                        factor_at(model, j, deriv, phi, mm)
                    } else {
                        suffix * factor_at(model, j, deriv, phi, mm)
                    };
                }
                let g = suffix * prefix;
                for t in 0..col_rank {
                    for s in 0..row_rank {
                        out[t * row_rank + s] = g[(t, s)];
                    }
                }
            });
            DMatrix::from_row_slice(m, c, &data)
        }
    }
}

/// `F^j(x_{mj})` under the term's derivative order for dimension `j`.
fn factor_at(
    model: &FactorModel,
    j: usize,
    deriv: &DerivativeMultiIndex,
    phi: &HashMap<(usize, usize), DMatrix<f64>>,
    m: usize,
) -> DMatrix<f64> {
    let values = &phi[&(j, deriv.order(j))];
    let row = DVector::from_iterator(values.ncols(), values.row(m).iter().copied());
    reshape_factor(&model.decomposition, j, model.dim(), &row)
}

fn assemble_raw(
    model: &FactorModel,
    dim: usize,
    blocks: &[DesignBlock<'_>],
) -> Result<Assembled, AlsError> {
    let d = model.dim();
    if dim >= d {
        return Err(AlsError::InvalidConfig(format!(
            "dimension index {dim} out of range for a {d}-dimensional model"
        )));
    }
    let n = model.banks[dim].gram.n();
    let c = model.decomposition.columns(dim, d);
    let nc = n * c;
    let m_total: usize = blocks.iter().map(|b| b.residual.len()).sum();
    let mut data = Vec::with_capacity(m_total * nc);
    let mut g = Vec::with_capacity(m_total);
    let mut w = Vec::with_capacity(m_total);
    for block in blocks {
        let lin = block.residual;
        let m = lin.len();
        if m == 0 {
            continue;
        }
        // Cross-dimension factor values Φ_j^{(o)} = T_j^{(o)} H_j for every
        // (dimension, order) pair any term touches.
        let mut phi: HashMap<(usize, usize), DMatrix<f64>> = HashMap::new();
        for deriv in &lin.derivs {
            for j in (0..d).filter(|&j| j != dim) {
                if let Entry::Vacant(e) = phi.entry((j, deriv.order(j))) {
                    e.insert(block.cache.weights(j, deriv.order(j))? * &model.banks[j].h);
                }
            }
        }
        let betas: Vec<DMatrix<f64>> = lin
            .derivs
            .iter()
            .map(|deriv| beta_matrix(model, dim, deriv, &phi, m))
            .collect();
        let self_tables: Vec<&DMatrix<f64>> = lin
            .derivs
            .iter()
            .map(|deriv| block.cache.weights(dim, deriv.order(dim)))
            .collect::<Result<_, _>>()?;
        let rows = exec::build_rows(m, nc, |mm, out| {
            for (t, beta) in betas.iter().enumerate() {
                let coeff = block.residual.coeffs[t][mm];
                if coeff == 0.0 {
                    continue;
                }
                let table = self_tables[t];
                for cc in 0..c {
                    let scale = coeff * beta[(mm, cc)];
                    if scale == 0.0 {
                        continue;
                    }
                    let slot = &mut out[cc * n..(cc + 1) * n];
                    for (k, s) in slot.iter_mut().enumerate() {
                        *s += scale * table[(mm, k)];
                    }
                }
            }
        });
        data.extend_from_slice(&rows);
        g.extend_from_slice(&lin.target);
        w.extend(std::iter::repeat_n(block.weight, m));
    }
    Ok(Assembled {
        data,
        g,
        w,
        m: m_total,
        nc,
    })
}

/// Builds the design rows of the dimension-`dim` least squares problem from
/// one or more linearized residual blocks (typically interior + boundary).
/// Row `m` satisfies `⟨b_m, vec(H_dim)⟩ − g_m =` surrogate residual at point
/// `m` for the current model.
pub fn assemble_dimension(
    model: &FactorModel,
    dim: usize,
    blocks: &[DesignBlock<'_>],
) -> Result<Vec<DesignRow>, AlsError> {
    let asm = assemble_raw(model, dim, blocks)?;
    Ok((0..asm.m)
        .map(|mm| DesignRow {
            b: DVector::from_column_slice(&asm.data[mm * asm.nc..(mm + 1) * asm.nc]),
            g: asm.g[mm],
            weight: asm.w[mm],
        })
        .collect())
}

/// Closed-form ridge solve for one dimension:
/// `vec(H) = argmin Σ_m w_m (⟨b_m, h⟩ − g_m)² + hᵀ (I_C ⊗ K⁻¹) h`.
///
/// Solved in the whitened basis `h = (I ⊗ L) z` (with `K = LLᵀ`), where the
/// normal matrix becomes `I + D̃ᵀW D̃ ⪰ I`; one diagonal-bump retry of
/// `1e-12·trace(A)/dim(A)` is attempted before giving up.
pub fn solve_dimension(
    rows: &[DesignRow],
    gram: &GramFactor,
    columns: usize,
) -> Result<DMatrix<f64>, AlsError> {
    let n = gram.n();
    let nc = n * columns;
    if nc > MAX_SYSTEM {
        return Err(AlsError::SystemTooLarge { size: nc });
    }
    let m = rows.len();
    let mut data = Vec::with_capacity(m * nc);
    let mut g = Vec::with_capacity(m);
    let mut w = Vec::with_capacity(m);
    for row in rows {
        if row.b.len() != nc {
            return Err(AlsError::InvalidConfig(format!(
                "design row length {} does not match N·C = {nc}",
                row.b.len()
            )));
        }
        data.extend_from_slice(row.b.as_slice());
        g.push(row.g);
        w.push(row.weight);
    }
    solve_core(
        &Assembled {
            data,
            g,
            w,
            m,
            nc,
        },
        gram,
        columns,
    )
}

fn solve_core(
    asm: &Assembled,
    gram: &GramFactor,
    columns: usize,
) -> Result<DMatrix<f64>, AlsError> {
    let n = gram.n();
    let nc = n * columns;
    if nc > MAX_SYSTEM {
        return Err(AlsError::SystemTooLarge { size: nc });
    }
    debug_assert_eq!(asm.nc, nc);
    // √W-scaled design matrix.
    let mut d = DMatrix::from_row_slice(asm.m, nc, &asm.data);
    let mut gt = DVector::from_column_slice(&asm.g);
    for mm in 0..asm.m {
        let sw = asm.w[mm].sqrt();
        d.row_mut(mm).scale_mut(sw);
        gt[mm] *= sw;
    }
    // Whiten per column block: D̃_c = D_c L.
    let l = gram.l();
    let mut dt = DMatrix::zeros(asm.m, nc);
    for cc in 0..columns {
        let block = d.columns(cc * n, n) * l;
        dt.columns_mut(cc * n, n).copy_from(&block);
    }
    let mut a = dt.tr_mul(&dt);
    for k in 0..nc {
        a[(k, k)] += 1.0;
    }
    let y = dt.tr_mul(&gt);
    let chol = match Cholesky::new(a.clone()) {
        Some(c) => c,
        None => {
            let bump = 1e-12 * a.trace() / nc as f64;
            for k in 0..nc {
                a[(k, k)] += bump;
            }
            Cholesky::new(a).ok_or(AlsError::IllConditioned)?
        }
    };
    let z = chol.solve(&y);
    let zm = DMatrix::from_column_slice(n, columns, z.as_slice());
    Ok(l * zm)
}

/// The objective decomposition at one model state, on the true residual.
#[derive(Clone, Copy, Debug)]
pub(crate) struct LossParts {
    pub objective: f64,
    pub interior_mse: f64,
    pub boundary_mse: f64,
    pub rkhs: f64,
}

/// Everything about a fit that stays fixed across iterations: cached weight
/// tables, targets, and row weights.
pub(crate) struct FitContext<'a> {
    problem: &'a PdeProblem,
    interior_table: WeightTable,
    boundary_table: WeightTable,
    rhs: Vec<f64>,
    boundary: LinearizedResidual,
    weight_interior: f64,
    weight_boundary: f64,
    alpha_interior: f64,
    alpha_boundary: f64,
}

impl<'a> FitContext<'a> {
    pub(crate) fn new(
        model: &FactorModel,
        problem: &'a PdeProblem,
        colloc: &CollocationSet,
        cfg: &SolverConfig,
    ) -> Result<Self, AlsError> {
        if model.dim() != problem.dim {
            return Err(AlsError::InvalidConfig(format!(
                "model dimension {} does not match problem dimension {}",
                model.dim(),
                problem.dim
            )));
        }
        if colloc.interior.is_empty() || colloc.boundary.is_empty() {
            return Err(AlsError::InvalidConfig(
                "collocation set needs interior and boundary points".into(),
            ));
        }
        let interior_table = collocation_weights(
            model,
            &colloc.interior,
            &problem.interior.required_orders(),
        )?;
        let rhs: Vec<f64> = colloc.interior.iter().map(|p| (problem.rhs)(p)).collect();
        let boundary_values: Vec<f64> = colloc
            .boundary
            .iter()
            .map(|p| (problem.boundary_data)(p))
            .collect();
        let boundary = LinearizedResidual::identity(colloc.boundary.clone(), boundary_values)?;
        let boundary_table =
            collocation_weights(model, &colloc.boundary, &boundary.required_orders())?;
        Ok(FitContext {
            problem,
            interior_table,
            boundary_table,
            rhs,
            boundary,
            weight_interior: cfg.alpha_interior / colloc.interior.len() as f64,
            weight_boundary: cfg.alpha_boundary / colloc.boundary.len() as f64,
            alpha_interior: cfg.alpha_interior,
            alpha_boundary: cfg.alpha_boundary,
        })
    }

    /// Linearizes the interior residual around `model` per the config.
    fn linearize(
        &self,
        model: &FactorModel,
        cfg: &SolverConfig,
    ) -> Result<LinearizedResidual, AlsError> {
        let advection = match cfg.linearizer {
            Linearizer::PartialFreeze => Some(cfg.advection_freeze),
            Linearizer::Newton => None,
        };
        Ok(linearize_with_table(
            &self.problem.interior,
            model,
            &self.interior_table,
            &self.rhs,
            advection,
        )?)
    }

    fn blocks<'b>(&'b self, interior: &'b LinearizedResidual) -> [DesignBlock<'b>; 2] {
        [
            DesignBlock {
                residual: interior,
                cache: &self.interior_table,
                weight: self.weight_interior,
            },
            DesignBlock {
                residual: &self.boundary,
                cache: &self.boundary_table,
                weight: self.weight_boundary,
            },
        ]
    }

    /// Objective of the true nonlinear residual at `model`.
    pub(crate) fn loss(&self, model: &FactorModel) -> Result<LossParts, AlsError> {
        let interior =
            crate::linearize::residual_eval_batch(model, &self.problem.interior, &self.interior_table)?;
        let m = interior.len();
        let interior_mse = exec::chunked_sum(m, |i| {
            let r = interior[i] - self.rhs[i];
            r * r
        }) / m as f64;
        let values = eval_batch(model, &self.boundary_table, &DerivativeMultiIndex::zero(model.dim()))?;
        let mb = values.len();
        let boundary_mse = exec::chunked_sum(mb, |i| {
            let r = values[i] - self.boundary.target[i];
            r * r
        }) / mb as f64;
        let rkhs: f64 = model
            .banks
            .iter()
            .map(|bank| bank.gram.rkhs_penalty(&bank.h))
            .sum();
        Ok(LossParts {
            objective: rkhs + self.alpha_interior * interior_mse + self.alpha_boundary * boundary_mse,
            interior_mse,
            boundary_mse,
            rkhs,
        })
    }
}

fn record(trace: &mut LossTrace, iter: usize, parts: LossParts, start: Instant) {
    trace.records.push(TraceRecord {
        iter,
        objective: parts.objective,
        interior_mse: parts.interior_mse,
        boundary_mse: parts.boundary_mse,
        rkhs_penalty: parts.rkhs,
        seconds: start.elapsed().as_secs_f64(),
    });
}

fn diverged(parts: LossParts, initial: f64) -> bool {
    !parts.objective.is_finite() || parts.objective > 1e6 * initial
}

/// Alternating-least-squares training: re-linearize once per outer
/// iteration, then update every dimension in ascending order by the
/// closed-form ridge solve. Stops early once the relative objective change
/// stays below `convergence_tol` for three consecutive outer iterations.
pub fn als_fit(
    model: FactorModel,
    problem: &PdeProblem,
    colloc: &CollocationSet,
    cfg: &SolverConfig,
) -> Result<(FactorModel, LossTrace), AlsError> {
    cfg.validate()?;
    let start = Instant::now();
    let ctx = FitContext::new(&model, problem, colloc, cfg)?;
    let mut current = model;
    let mut trace = LossTrace::default();
    let initial = ctx.loss(&current)?;
    record(&mut trace, 0, initial, start);
    if diverged(initial, initial.objective) {
        return Err(AlsError::Diverged {
            objective: initial.objective,
            initial: initial.objective,
            trace,
        });
    }
    let mut previous = initial.objective;
    let mut streak = 0usize;
    for iter in 1..=cfg.outer_iters {
        let interior = ctx.linearize(&current, cfg)?;
        for _ in 0..cfg.inner_sweeps {
            for i in 0..current.dim() {
                let asm = assemble_raw(&current, i, &ctx.blocks(&interior))?;
                let columns = current.decomposition.columns(i, current.dim());
                current.banks[i].h = solve_core(&asm, &current.banks[i].gram, columns)?;
            }
        }
        let parts = ctx.loss(&current)?;
        record(&mut trace, iter, parts, start);
        if diverged(parts, initial.objective) {
            return Err(AlsError::Diverged {
                objective: parts.objective,
                initial: initial.objective,
                trace,
            });
        }
        let change = (parts.objective - previous).abs() / previous.abs().max(f64::MIN_POSITIVE);
        streak = if change < cfg.convergence_tol {
            streak + 1
        } else {
            0
        };
        previous = parts.objective;
        if streak >= 3 {
            break;
        }
    }
    Ok((current, trace))
}

/// Adam hyperparameters for the baseline trainer. Missing config fields fall
/// back to the defaults, so `{"steps": 400}` is a complete override.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamParams {
    pub steps: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            steps: 1000,
            learning_rate: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// The training objective at `model`, evaluated on the true nonlinear
/// residual: RKHS penalties plus weighted interior and boundary mean-square
/// residuals. This is the quantity both trainers report in their traces.
pub fn training_objective(
    model: &FactorModel,
    problem: &PdeProblem,
    colloc: &CollocationSet,
    cfg: &SolverConfig,
) -> Result<f64, AlsError> {
    let ctx = FitContext::new(model, problem, colloc, cfg)?;
    Ok(ctx.loss(model)?.objective)
}

/// The objective and its analytic gradient with respect to every factor
/// coefficient matrix `H_i` — the full-batch gradient the Adam baseline
/// steps on.
pub fn training_gradients(
    model: &FactorModel,
    problem: &PdeProblem,
    colloc: &CollocationSet,
    cfg: &SolverConfig,
) -> Result<(f64, Vec<DMatrix<f64>>), AlsError> {
    let ctx = FitContext::new(model, problem, colloc, cfg)?;
    let (grads, parts) = objective_gradients(model, &ctx, cfg)?;
    Ok((parts.objective, grads))
}

/// Analytic full-batch gradient of the objective with respect to every
/// `vec(H_i)`, exploiting that the Newton-linearized design rows at the
/// current model are exactly the residual Jacobian.
pub(crate) fn objective_gradients(
    model: &FactorModel,
    ctx: &FitContext<'_>,
    cfg: &SolverConfig,
) -> Result<(Vec<DMatrix<f64>>, LossParts), AlsError> {
    let newton_cfg = SolverConfig {
        linearizer: Linearizer::Newton,
        ..cfg.clone()
    };
    let interior = ctx.linearize(model, &newton_cfg)?;
    // Tangency makes the surrogate residual at the expansion point the true
    // residual, so the loss parts come along for free.
    let r_int = interior.surrogate_residuals_with(model, &ctx.interior_table)?;
    let r_bnd = ctx
        .boundary
        .surrogate_residuals_with(model, &ctx.boundary_table)?;
    let mi = r_int.len();
    let mb = r_bnd.len();
    let interior_mse = exec::chunked_sum(mi, |i| r_int[i] * r_int[i]) / mi as f64;
    let boundary_mse = exec::chunked_sum(mb, |i| r_bnd[i] * r_bnd[i]) / mb as f64;
    let mut rkhs = 0.0;
    let mut grads = Vec::with_capacity(model.dim());
    for i in 0..model.dim() {
        let asm = assemble_raw(model, i, &ctx.blocks(&interior))?;
        let d = DMatrix::from_row_slice(asm.m, asm.nc, &asm.data);
        let wr = DVector::from_iterator(
            asm.m,
            r_int
                .iter()
                .map(|r| r * ctx.weight_interior)
                .chain(r_bnd.iter().map(|r| r * ctx.weight_boundary)),
        );
        let gv = d.tr_mul(&wr) * 2.0;
        let bank = &model.banks[i];
        let n = bank.gram.n();
        let columns = model.decomposition.columns(i, model.dim());
        let mut gm = DMatrix::from_column_slice(n, columns, gv.as_slice());
        gm += 2.0 * bank.gram.solve_matrix(&bank.h);
        rkhs += bank.gram.rkhs_penalty(&bank.h);
        grads.push(gm);
    }
    let parts = LossParts {
        objective: rkhs + ctx.alpha_interior * interior_mse + ctx.alpha_boundary * boundary_mse,
        interior_mse,
        boundary_mse,
        rkhs,
    };
    Ok((grads, parts))
}

/// Full-gradient Adam on the identical objective, as the paper's baseline:
/// full batch, analytic gradients, no early stopping (the trace always has
/// `steps` post-initialization records unless the objective diverges).
pub fn adam_fit(
    model: FactorModel,
    problem: &PdeProblem,
    colloc: &CollocationSet,
    cfg: &SolverConfig,
    params: &AdamParams,
) -> Result<(FactorModel, LossTrace), AlsError> {
    cfg.validate()?;
    let start = Instant::now();
    let ctx = FitContext::new(&model, problem, colloc, cfg)?;
    let mut current = model;
    let mut trace = LossTrace::default();
    let initial = ctx.loss(&current)?;
    record(&mut trace, 0, initial, start);
    if diverged(initial, initial.objective) {
        return Err(AlsError::Diverged {
            objective: initial.objective,
            initial: initial.objective,
            trace,
        });
    }
    let mut first: Vec<DMatrix<f64>> = current
        .banks
        .iter()
        .map(|b| DMatrix::zeros(b.h.nrows(), b.h.ncols()))
        .collect();
    let mut second = first.clone();
    for step in 1..=params.steps {
        let (grads, _) = objective_gradients(&current, &ctx, cfg)?;
        let bias1 = 1.0 - params.beta1.powi(step as i32);
        let bias2 = 1.0 - params.beta2.powi(step as i32);
        for (i, grad) in grads.iter().enumerate() {
            let m = &mut first[i];
            let v = &mut second[i];
            let h = &mut current.banks[i].h;
            for ((h_e, m_e), (v_e, g_e)) in h
                .iter_mut()
                .zip(m.iter_mut())
                .zip(v.iter_mut().zip(grad.iter()))
            {
                *m_e = params.beta1 * *m_e + (1.0 - params.beta1) * g_e;
                *v_e = params.beta2 * *v_e + (1.0 - params.beta2) * g_e * g_e;
                let m_hat = *m_e / bias1;
                let v_hat = *v_e / bias2;
                *h_e -= params.learning_rate * m_hat / (v_hat.sqrt() + params.epsilon);
            }
        }
        let parts = ctx.loss(&current)?;
        record(&mut trace, step, parts, start);
        if diverged(parts, initial.objective) {
            return Err(AlsError::Diverged {
                objective: parts.objective,
                initial: initial.objective,
                trace,
            });
        }
    }
    Ok((current, trace))
}
