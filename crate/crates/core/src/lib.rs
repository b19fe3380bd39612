//! Tensor-decomposed Gaussian-process collocation solver for nonlinear PDEs.
//!
//! A solution candidate is a low-rank tensor decomposition (CP or tensor ring)
//! whose one-dimensional factor functions are kernel interpolants anchored at
//! fixed inducing locations. Nonlinear PDE terms are linearized around the
//! current iterate (partial freezing or a first-order Newton expansion), after
//! which an alternating least-squares pass updates one dimension at a time by
//! solving a regularized linear system in closed form. A full-gradient Adam
//! trainer over the same objective is included as a baseline.
//!
//! Modules follow the pipeline order:
//!
//! - [`kernels`]: 1-D covariance families, Gram factorizations, interpolation
//!   weights and their derivatives.
//! - [`geometry`]: domains, collocation sampling, evaluation grids, error norms.
//! - [`factor`]: factor banks, CP / tensor-ring evaluation, RKHS norms,
//!   checkpoints.
//! - [`linearize`]: residual specifications and the two linearization rules.
//! - [`als`]: per-dimension assembly and closed-form updates, the outer ALS
//!   loop, the Adam baseline, loss traces.
//! - [`problems`]: the benchmark catalogue with crafted or quadrature/finite-
//!   difference reference solutions.
//! - [`runner`]: config-driven runs, sweeps, trainer comparisons, CSV exports.
//!
//! Parallelism (the `parallel` feature, on by default) only changes how work
//! is scheduled, never results: reductions are chunked in a fixed order, so a
//! run is bit-identical whether it executes on one thread or many. See
//! [`exec`] for the runtime switch.

pub mod als;
pub mod exec;
pub mod factor;
pub mod geometry;
pub mod kernels;
pub mod linearize;
pub mod problems;
pub mod runner;

pub use als::{
    adam_fit, als_fit, assemble_dimension, solve_dimension, training_gradients,
    training_objective, AdamParams, AlsError, DesignBlock, DesignRow, Linearizer, LossTrace,
    SolverConfig, TraceRecord,
};
pub use exec::{current_exec, set_exec, Exec};
pub use factor::{
    collocation_weights, rkhs_norms, tensor_rkhs_norm_sq, Decomposition, DerivativeMultiIndex,
    FactorBank, FactorModel, ModelError, WeightTable,
};
pub use geometry::{
    eval_grid, grid_sample, random_sample, relative_l2, CollocationSet, DomainShape,
    GeometryError, PointSet,
};
pub use kernels::{interp_weights, GramFactor, KernelError, KernelFamily, KernelSpec};
pub use linearize::{
    freeze, newton, residual_eval, AdvectionFreeze, LinearTerm, LinearizedResidual, NonlinearKind,
    NonlinearTerm, PointFn, ResidualSpec,
};
pub use problems::{PdeProblem, ProblemError};
pub use runner::{
    apply_override, compare_trainers, config_from_value, load_config, parse_config,
    pointwise_error_export, recommended, reference_export, run, sweep, CollocationSpec,
    KernelEntry, RunConfig, RunError, SolveReport, SweepAxis, SweepTable, Trainer,
    TrainerComparison,
};
