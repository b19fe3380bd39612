//! The tensor-decomposed solution representation.
//!
//! A model is a set of per-dimension factor banks. Bank `i` stores inducing
//! values `H_i` (one column per factor function) over a fixed Gram
//! factorization, so factor values and derivatives are inner products
//! `H_iᵀ ŵ_i(x_i)` with interpolation weights from [`crate::kernels`].
//! CP models combine the per-dimension vectors by an elementwise product and
//! a sum; tensor-ring models reshape them into matrices and take the trace of
//! the cyclic product. Any mixed partial derivative keeps the same multilinear
//! structure — only the weight vectors change — which is what makes the
//! per-dimension least-squares updates closed-form.

use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec;
use crate::geometry::PointSet;
use crate::kernels::{equally_spaced, interp_weights, GramFactor, KernelError, KernelSpec};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("expected a {expected} decomposition, found {found}")]
    DecompositionMismatch {
        expected: &'static str,
        found: &'static str,
    },
    #[error("coordinate {value} along dimension {dim} is outside the domain box [{lo}, {hi}]")]
    PointOutsideBox {
        dim: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid derivative multi-index: {0}")]
    InvalidDerivative(String),
    #[error("derivative order {order} along dimension {dim} is not cached in the weight table")]
    MissingWeightOrder { dim: usize, order: usize },
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("checkpoint I/O failed: {0}")]
    CheckpointIo(String),
    #[error("checkpoint format invalid: {0}")]
    CheckpointFormat(String),
}

/// How the per-dimension factors combine into `u`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Decomposition {
    /// `u(x) = Σ_r Π_i f^i_r(x_i)`; every bank has `rank` columns.
    Cp { rank: usize },
    /// `u(x) = Trace(F¹(x₁)···F^d(x_d))` with `F^i ∈ R^{R_{i−1}×R_i}`.
    ///
    /// `ranks[i]` is the bond `R_{i+1}` between dimensions `i` and `i+1`
    /// (0-based), so bank `i` reshapes to `ranks[(i+d−1) mod d] × ranks[i]`
    /// and the cyclic closure `R_0 = R_d` holds by construction.
    TensorRing { ranks: Vec<usize> },
}

impl Decomposition {
    pub fn name(&self) -> &'static str {
        match self {
            Decomposition::Cp { .. } => "CP",
            Decomposition::TensorRing { .. } => "tensor-ring",
        }
    }

    fn validate(&self, d: usize) -> Result<(), ModelError> {
        if d < 2 {
            return Err(ModelError::ShapeMismatch(format!(
                "models require d >= 2 dimensions, got {d}"
            )));
        }
        match self {
            Decomposition::Cp { rank } if *rank == 0 => Err(ModelError::ShapeMismatch(
                "CP rank must be positive".into(),
            )),
            Decomposition::TensorRing { ranks } if ranks.len() != d => {
                Err(ModelError::ShapeMismatch(format!(
                    "tensor-ring needs one bond rank per dimension ({d}), got {}",
                    ranks.len()
                )))
            }
            Decomposition::TensorRing { ranks } if ranks.contains(&0) => Err(
                ModelError::ShapeMismatch("tensor-ring bond ranks must be positive".into()),
            ),
            _ => Ok(()),
        }
    }

    /// Rows of the reshaped factor matrix along dimension `i` (TR: `R_{i−1}`).
    pub fn row_rank(&self, i: usize, d: usize) -> usize {
        match self {
            Decomposition::Cp { rank } => *rank,
            Decomposition::TensorRing { ranks } => ranks[(i + d - 1) % d],
        }
    }

    /// Columns of the reshaped factor matrix along dimension `i` (TR: `R_i`).
    pub fn col_rank(&self, i: usize, _d: usize) -> usize {
        match self {
            Decomposition::Cp { rank } => *rank,
            Decomposition::TensorRing { ranks } => ranks[i],
        }
    }

    /// Number of factor functions (columns of `H_i`) along dimension `i`.
    pub fn columns(&self, i: usize, d: usize) -> usize {
        match self {
            Decomposition::Cp { rank } => *rank,
            Decomposition::TensorRing { .. } => self.row_rank(i, d) * self.col_rank(i, d),
        }
    }
}

/// Per-dimension derivative orders for one evaluation of `u`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct DerivativeMultiIndex {
    orders: Vec<usize>,
}

impl DerivativeMultiIndex {
    pub fn new(orders: Vec<usize>) -> Result<Self, ModelError> {
        if orders.iter().any(|&o| o > 2) {
            return Err(ModelError::InvalidDerivative(format!(
                "per-dimension order must be <= 2, got {orders:?}"
            )));
        }
        if orders.iter().sum::<usize>() > 4 {
            return Err(ModelError::InvalidDerivative(format!(
                "total order must be <= 4, got {orders:?}"
            )));
        }
        Ok(DerivativeMultiIndex { orders })
    }

    /// No differentiation: plain evaluation of `u`.
    pub fn zero(d: usize) -> Self {
        DerivativeMultiIndex {
            orders: vec![0; d],
        }
    }

    /// `order`-th derivative along `dim` only.
    pub fn single(d: usize, dim: usize, order: usize) -> Result<Self, ModelError> {
        if dim >= d {
            return Err(ModelError::InvalidDerivative(format!(
                "dimension {dim} out of range for d={d}"
            )));
        }
        let mut orders = vec![0; d];
        orders[dim] = order;
        Self::new(orders)
    }

    pub fn orders(&self) -> &[usize] {
        &self.orders
    }

    pub fn order(&self, dim: usize) -> usize {
        self.orders[dim]
    }

    pub fn len(&self) -> usize {
        self.orders.len()
    }

    pub fn is_empty(&self) -> bool {
        self.orders.is_empty()
    }
}

/// One dimension's factor functions: inducing values over a Gram factor.
#[derive(Clone, Debug)]
pub struct FactorBank {
    /// 0-based input dimension this bank belongs to.
    pub dim_index: usize,
    pub spec: KernelSpec,
    pub gram: GramFactor,
    /// `N_i × C_i`; column `c` holds the inducing values of factor `c`.
    pub h: DMatrix<f64>,
}

impl FactorBank {
    /// `H_iᵀ ŵ_i(x)`: all factor values (or derivatives) at one coordinate.
    fn factor_values(&self, x: f64, order: usize) -> Result<DVector<f64>, ModelError> {
        let w = interp_weights(&self.gram, &self.spec, x, order)?;
        Ok(self.h.tr_mul(&w))
    }
}

/// A complete solution candidate.
#[derive(Clone, Debug)]
pub struct FactorModel {
    pub decomposition: Decomposition,
    pub banks: Vec<FactorBank>,
    /// Axis-aligned box containing the domain closure; inducing locations
    /// span it per dimension.
    pub domain_box: Vec<(f64, f64)>,
}

impl FactorModel {
    /// Builds a model with equally spaced inducing locations spanning the
    /// domain box and `H` entries i.i.d. normal with standard deviation 0.1.
    pub fn init_random<R: Rng>(
        decomposition: Decomposition,
        specs: &[KernelSpec],
        inducing_counts: &[usize],
        domain_box: &[(f64, f64)],
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        let d = domain_box.len();
        decomposition.validate(d)?;
        if specs.len() != d || inducing_counts.len() != d {
            return Err(ModelError::ShapeMismatch(format!(
                "need one kernel spec and inducing count per dimension ({d}), got {} and {}",
                specs.len(),
                inducing_counts.len()
            )));
        }
        for &(lo, hi) in domain_box {
            if !(lo < hi && lo.is_finite() && hi.is_finite()) {
                return Err(ModelError::ShapeMismatch(format!(
                    "domain box interval [{lo}, {hi}] is not a proper interval"
                )));
            }
        }
        let mut banks = Vec::with_capacity(d);
        for i in 0..d {
            let (lo, hi) = domain_box[i];
            let locations = equally_spaced(lo, hi, inducing_counts[i]);
            let gram = GramFactor::build(&specs[i], &locations)?;
            let cols = decomposition.columns(i, d);
            let h = DMatrix::from_fn(inducing_counts[i], cols, |_, _| {
                let z: f64 = StandardNormal.sample(rng);
                0.1 * z
            });
            banks.push(FactorBank {
                dim_index: i,
                spec: specs[i],
                gram,
                h,
            });
        }
        Ok(FactorModel {
            decomposition,
            banks,
            domain_box: domain_box.to_vec(),
        })
    }

    pub fn dim(&self) -> usize {
        self.banks.len()
    }

    /// Evaluates `u` (or a mixed partial) at one point, dispatching on the
    /// decomposition.
    pub fn eval(&self, x: &[f64], deriv: &DerivativeMultiIndex) -> Result<f64, ModelError> {
        match self.decomposition {
            Decomposition::Cp { .. } => eval_cp(self, x, deriv),
            Decomposition::TensorRing { .. } => eval_tr(self, x, deriv),
        }
    }

    fn check_point(&self, x: &[f64], deriv: &DerivativeMultiIndex) -> Result<(), ModelError> {
        if x.len() != self.dim() || deriv.len() != self.dim() {
            return Err(ModelError::ShapeMismatch(format!(
                "point/derivative arity {} / {} does not match model dimension {}",
                x.len(),
                deriv.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// Writes the model as a JSON checkpoint. JSON float formatting is
    /// shortest-round-trip, so reloading reproduces every `H` entry and
    /// inducing location bit-exactly.
    pub fn save_checkpoint(&self, path: &Path) -> Result<(), ModelError> {
        let data = CheckpointData::from_model(self);
        let file = std::fs::File::create(path)
            .map_err(|e| ModelError::CheckpointIo(format!("{}: {e}", path.display())))?;
        serde_json::to_writer(std::io::BufWriter::new(file), &data)
            .map_err(|e| ModelError::CheckpointFormat(e.to_string()))
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self, ModelError> {
        let file = std::fs::File::open(path)
            .map_err(|e| ModelError::CheckpointIo(format!("{}: {e}", path.display())))?;
        let data: CheckpointData = serde_json::from_reader(std::io::BufReader::new(file))
            .map_err(|e| ModelError::CheckpointFormat(e.to_string()))?;
        data.into_model()
    }
}

/// CP evaluation: `⟨∘_i H_iᵀ ŵ_i(x_i), 1⟩` with order-`deriv_i` weights.
pub fn eval_cp(
    model: &FactorModel,
    x: &[f64],
    deriv: &DerivativeMultiIndex,
) -> Result<f64, ModelError> {
    let Decomposition::Cp { rank } = model.decomposition else {
        return Err(ModelError::DecompositionMismatch {
            expected: "CP",
            found: model.decomposition.name(),
        });
    };
    model.check_point(x, deriv)?;
    let mut acc = DVector::from_element(rank, 1.0);
    for (i, bank) in model.banks.iter().enumerate() {
        let f = bank.factor_values(x[i], deriv.order(i))?;
        acc.component_mul_assign(&f);
    }
    Ok(acc.sum())
}

/// Tensor-ring evaluation: trace of the ordered product of the reshaped
/// per-dimension factor matrices.
pub fn eval_tr(
    model: &FactorModel,
    x: &[f64],
    deriv: &DerivativeMultiIndex,
) -> Result<f64, ModelError> {
    if !matches!(model.decomposition, Decomposition::TensorRing { .. }) {
        return Err(ModelError::DecompositionMismatch {
            expected: "tensor-ring",
            found: model.decomposition.name(),
        });
    }
    model.check_point(x, deriv)?;
    let d = model.dim();
    let mut product: Option<DMatrix<f64>> = None;
    for (i, bank) in model.banks.iter().enumerate() {
        let v = bank.factor_values(x[i], deriv.order(i))?;
        let f = reshape_factor(&model.decomposition, i, d, &v);
        product = Some(match product {
            None => f,
            Some(p) => p * f,
        });
    }
    Ok(product.expect("d >= 2").trace())
}

/// Columns of `H_i` are the column-major entries of `F^i`.
pub(crate) fn reshape_factor(
    decomposition: &Decomposition,
    i: usize,
    d: usize,
    values: &DVector<f64>,
) -> DMatrix<f64> {
    let rows = decomposition.row_rank(i, d);
    let cols = decomposition.col_rank(i, d);
    DMatrix::from_column_slice(rows, cols, values.as_slice())
}

/// Per-dimension RKHS penalties `Trace(K_i⁻¹ H_i H_iᵀ) = Σ_c η_cᵀ K_i⁻¹ η_c`.
pub fn rkhs_norms(model: &FactorModel) -> Vec<f64> {
    model
        .banks
        .iter()
        .map(|bank| bank.gram.rkhs_penalty(&bank.h))
        .collect()
}

/// Squared RKHS-tensor norm of a CP model:
/// `Σ_{r,l} Π_i (H_iᵀ K_i⁻¹ H_i)_{rl}`. Used to property-check the bound
/// relating it to the per-dimension penalties.
pub fn tensor_rkhs_norm_sq(model: &FactorModel) -> Result<f64, ModelError> {
    let Decomposition::Cp { rank } = model.decomposition else {
        return Err(ModelError::DecompositionMismatch {
            expected: "CP",
            found: model.decomposition.name(),
        });
    };
    let mut prod = DMatrix::from_element(rank, rank, 1.0);
    for bank in &model.banks {
        let a = bank.h.tr_mul(&bank.gram.solve_matrix(&bank.h));
        prod.component_mul_assign(&a);
    }
    Ok(prod.sum())
}

/// Cached interpolation-weight tables for a fixed point list.
///
/// `tables[dim][order]` is `M × N_dim` with row `m` holding `ŵ^(order)(x_m)ᵀ`.
/// The cache depends only on the points, inducing locations, and kernels —
/// `H` updates never invalidate it.
#[derive(Clone, Debug)]
pub struct WeightTable {
    points: PointSet,
    tables: Vec<Vec<(usize, DMatrix<f64>)>>,
}

impl WeightTable {
    pub fn points(&self) -> &PointSet {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.len() == 0
    }

    pub fn weights(&self, dim: usize, order: usize) -> Result<&DMatrix<f64>, ModelError> {
        self.tables
            .get(dim)
            .and_then(|per_dim| {
                per_dim
                    .iter()
                    .find(|(o, _)| *o == order)
                    .map(|(_, t)| t)
            })
            .ok_or(ModelError::MissingWeightOrder { dim, order })
    }

    /// Orders cached along `dim`.
    pub fn orders(&self, dim: usize) -> impl Iterator<Item = usize> + '_ {
        self.tables[dim].iter().map(|(o, _)| *o)
    }
}

/// Builds the weight tables for every dimension and every requested order.
///
/// `needed_orders[i]` lists the derivative orders required along dimension
/// `i`; order 0 is always added since plain evaluation is ubiquitous.
pub fn collocation_weights(
    model: &FactorModel,
    points: &PointSet,
    needed_orders: &[BTreeSet<usize>],
) -> Result<WeightTable, ModelError> {
    let d = model.dim();
    if points.dim() != d || needed_orders.len() != d {
        return Err(ModelError::ShapeMismatch(format!(
            "points of dimension {} and {} order sets for a model of dimension {d}",
            points.dim(),
            needed_orders.len()
        )));
    }
    let m = points.len();
    for i in 0..d {
        let (lo, hi) = model.domain_box[i];
        let tol = 1e-9 * (hi - lo).max(1.0);
        for p in points.iter() {
            if p[i] < lo - tol || p[i] > hi + tol {
                return Err(ModelError::PointOutsideBox {
                    dim: i,
                    value: p[i],
                    lo,
                    hi,
                });
            }
        }
    }
    let mut tables = Vec::with_capacity(d);
    for (i, bank) in model.banks.iter().enumerate() {
        let n = bank.gram.n();
        let mut orders: BTreeSet<usize> = needed_orders[i].clone();
        orders.insert(0);
        let mut per_dim = Vec::with_capacity(orders.len());
        for order in orders {
            // Validate once so the parallel fill below cannot fail.
            bank.spec.eval(0.0, 0.0, 0, order)?;
            // Column m of `kappa` is ∂^order κ(γ, x_m); a column-major
            // N × M matrix is exactly an M-rows-of-N buffer.
            let data = exec::build_rows(m, n, |row, out| {
                let x = points.point(row)[i];
                for (j, &gamma) in bank.gram.locations().iter().enumerate() {
                    out[j] = bank
                        .spec
                        .eval(gamma, x, 0, order)
                        .expect("order validated above");
                }
            });
            let kappa = DMatrix::from_vec(n, m, data);
            let table = bank.gram.solve_matrix(&kappa).transpose();
            per_dim.push((order, table));
        }
        tables.push(per_dim);
    }
    Ok(WeightTable {
        points: points.clone(),
        tables,
    })
}

/// Evaluates `u` (or a mixed partial) at every cached point in one pass.
pub fn eval_batch(
    model: &FactorModel,
    table: &WeightTable,
    deriv: &DerivativeMultiIndex,
) -> Result<Vec<f64>, ModelError> {
    if deriv.len() != model.dim() {
        return Err(ModelError::ShapeMismatch(format!(
            "derivative arity {} does not match model dimension {}",
            deriv.len(),
            model.dim()
        )));
    }
    match model.decomposition {
        Decomposition::Cp { rank } => {
            let mut acc = DMatrix::from_element(table.len(), rank, 1.0);
            for (i, bank) in model.banks.iter().enumerate() {
                let phi = table.weights(i, deriv.order(i))? * &bank.h;
                acc.component_mul_assign(&phi);
            }
            Ok(acc.column_sum().iter().copied().collect())
        }
        Decomposition::TensorRing { .. } => {
            let d = model.dim();
            let mut values = Vec::with_capacity(d);
            for (i, bank) in model.banks.iter().enumerate() {
                values.push(table.weights(i, deriv.order(i))? * &bank.h);
            }
            let decomposition = &model.decomposition;
            Ok(exec::map_collect(table.len(), |m| {
                let mut product: Option<DMatrix<f64>> = None;
                for (i, v) in values.iter().enumerate() {
                    let row = DVector::from_iterator(v.ncols(), v.row(m).iter().copied());
                    let f = reshape_factor(decomposition, i, d, &row);
                    product = Some(match product {
                        None => f,
                        Some(p) => p * f,
                    });
                }
                product.expect("d >= 2").trace()
            }))
        }
    }
}

#[derive(Serialize, Deserialize)]
struct BankData {
    dim_index: usize,
    spec: KernelSpec,
    locations: Vec<f64>,
    h: DMatrix<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointData {
    decomposition: Decomposition,
    domain_box: Vec<(f64, f64)>,
    banks: Vec<BankData>,
}

impl CheckpointData {
    fn from_model(model: &FactorModel) -> Self {
        CheckpointData {
            decomposition: model.decomposition.clone(),
            domain_box: model.domain_box.clone(),
            banks: model
                .banks
                .iter()
                .map(|b| BankData {
                    dim_index: b.dim_index,
                    spec: b.spec,
                    locations: b.gram.locations().to_vec(),
                    h: b.h.clone(),
                })
                .collect(),
        }
    }

    fn into_model(self) -> Result<FactorModel, ModelError> {
        let d = self.banks.len();
        self.decomposition.validate(d)?;
        if self.domain_box.len() != d {
            return Err(ModelError::CheckpointFormat(format!(
                "domain box has {} intervals for {d} banks",
                self.domain_box.len()
            )));
        }
        let mut banks = Vec::with_capacity(d);
        for (i, bank) in self.banks.into_iter().enumerate() {
            let gram = GramFactor::build(&bank.spec, &bank.locations)?;
            if bank.h.nrows() != gram.n() || bank.h.ncols() != self.decomposition.columns(i, d) {
                return Err(ModelError::CheckpointFormat(format!(
                    "bank {i} has H of shape {}x{}, expected {}x{}",
                    bank.h.nrows(),
                    bank.h.ncols(),
                    gram.n(),
                    self.decomposition.columns(i, d)
                )));
            }
            banks.push(FactorBank {
                dim_index: bank.dim_index,
                spec: bank.spec,
                gram,
                h: bank.h,
            });
        }
        Ok(FactorModel {
            decomposition: self.decomposition,
            banks,
            domain_box: self.domain_box,
        })
    }
}
