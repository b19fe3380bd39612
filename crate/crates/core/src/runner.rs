//! Config-driven experiment pipeline: single solves, hyperparameter sweeps,
//! the ALS-vs-Adam comparison, and CSV exports.
//!
//! A [`RunConfig`] names a registered problem and pins every hyperparameter;
//! [`run`] executes sample → fit → evaluate → persist and returns a
//! [`SolveReport`]. All randomness flows from the single root seed in
//! `solver.seed`, split deterministically into a sampling seed and an
//! initialization seed, so reruns are bit-identical and either consumer can
//! be replayed in isolation.
//!
//! Hyperparameters are validated against the published search menus
//! (length-scale grids, rank sets, nugget range, power-of-ten penalty
//! weights) unless the config sets `custom: true`. Sweeps explore off-menu
//! values by design, so sweep-derived configs are marked custom
//! automatically.

use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::als::{adam_fit, als_fit, AdamParams, AlsError, Linearizer, LossTrace, SolverConfig};
use crate::factor::{Decomposition, FactorModel, ModelError};
use crate::geometry::{
    eval_grid, grid_sample, random_sample, relative_l2, CollocationSet, GeometryError, PointSet,
};
use crate::kernels::{KernelFamily, KernelSpec};
use crate::linearize::LinearizeError;
use crate::problems::{self, PdeProblem, ProblemError};

#[derive(Debug, Error)]
pub enum RunError {
    /// A config field is missing, unparsable, or outside the allowed menus.
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },
    /// The objective blew up; the partial loss trace was saved first.
    #[error(
        "run diverged: objective {objective:.6e} from initial {initial:.6e}; \
         partial trace at {trace_path}"
    )]
    Diverged {
        objective: f64,
        initial: f64,
        trace_path: PathBuf,
    },
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Linearize(#[from] LinearizeError),
    #[error("solver failed: {0}")]
    Solver(AlsError),
    #[error("I/O failed at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("report serialization failed: {0}")]
    Json(#[from] serde_json::Error),
}

impl RunError {
    fn config(path: impl Into<String>, message: impl fmt::Display) -> Self {
        RunError::Config {
            path: path.into(),
            message: message.to_string(),
        }
    }

    fn io(path: &Path, source: io::Error) -> Self {
        RunError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Which trainer optimizes the objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trainer {
    #[default]
    Als,
    Adam,
}

/// One dimension's kernel plus its inducing-point count.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelEntry {
    #[serde(flatten)]
    pub spec: KernelSpec,
    #[serde(default = "default_inducing")]
    pub inducing: usize,
}

fn default_inducing() -> usize {
    64
}

/// Where the collocation points come from. Random sampling splits off its
/// seed from the root seed unless one is pinned explicitly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum CollocationSpec {
    Grid { shape: Vec<usize> },
    Random {
        interior: usize,
        boundary: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
}

impl CollocationSpec {
    pub fn total(&self) -> usize {
        match self {
            CollocationSpec::Grid { shape } => shape.iter().product(),
            CollocationSpec::Random {
                interior, boundary, ..
            } => interior + boundary,
        }
    }
}

fn default_schema_version() -> u32 {
    1
}

/// A fully pinned experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default = "default_schema_version")]
    pub schema_version: u32,
    /// Registry key, e.g. `elliptic` or `burgers-0.02`.
    pub problem: String,
    pub decomposition: Decomposition,
    /// One entry per input dimension.
    pub kernels: Vec<KernelEntry>,
    pub collocation: CollocationSpec,
    pub solver: SolverConfig,
    #[serde(default)]
    pub trainer: Trainer,
    /// Adam hyperparameters; only consulted when `trainer` is `adam`.
    #[serde(default)]
    pub adam: AdamParams,
    /// Allows hyperparameters outside the published search menus.
    #[serde(default)]
    pub custom: bool,
    pub output_dir: PathBuf,
}

/// The published length-scale search menu:
/// {0.005:0.001:0.009, 0.01:0.01:0.1, 0.1:0.1:1.0, 1:1:8}.
fn length_scale_menu() -> Vec<f64> {
    let mut menu: Vec<f64> = Vec::new();
    menu.extend((5..=9).map(|i| i as f64 * 0.001));
    menu.extend((1..=10).map(|i| i as f64 * 0.01));
    menu.extend((1..=10).map(|i| i as f64 * 0.1));
    menu.extend((1..=8).map(|i| i as f64));
    menu
}

fn in_menu(value: f64, menu: &[f64]) -> bool {
    menu.iter().any(|&m| (value - m).abs() <= 1e-9 * m.max(1.0))
}

fn is_power_of_ten(value: f64) -> bool {
    if value <= 0.0 {
        return false;
    }
    let exp = value.log10().round();
    (value - 10f64.powi(exp as i32)).abs() <= 1e-9 * value
}

const CP_RANK_MENU: [usize; 7] = [5, 10, 12, 15, 18, 20, 25];
const TR_RANK_MENU: [usize; 5] = [3, 4, 5, 6, 7];

impl RunConfig {
    /// Resolves the problem and checks every cross-field invariant, including
    /// menu membership unless `custom` is set. Returns the problem so callers
    /// do not pay for reference-oracle construction twice.
    pub fn validate(&self) -> Result<PdeProblem, RunError> {
        if self.schema_version != 1 {
            return Err(RunError::config(
                "schema_version",
                format!("unsupported schema version {}", self.schema_version),
            ));
        }
        let problem = problems::problem(&self.problem)
            .map_err(|e| RunError::config("problem", e))?;
        let d = problem.dim;
        if self.kernels.len() != d {
            return Err(RunError::config(
                "kernels",
                format!(
                    "{} kernel entries for the {d}-dimensional problem `{}`",
                    self.kernels.len(),
                    self.problem
                ),
            ));
        }
        match &self.decomposition {
            Decomposition::Cp { rank } => {
                if *rank == 0 {
                    return Err(RunError::config("decomposition.rank", "rank must be positive"));
                }
                if !self.custom && !CP_RANK_MENU.contains(rank) {
                    return Err(RunError::config(
                        "decomposition.rank",
                        format!("{rank} is outside the CP menu {CP_RANK_MENU:?}; set custom: true to allow"),
                    ));
                }
            }
            Decomposition::TensorRing { ranks } => {
                if ranks.len() != d {
                    return Err(RunError::config(
                        "decomposition.ranks",
                        format!("{} bond ranks for dimension {d}", ranks.len()),
                    ));
                }
                if !self.custom {
                    if let Some(r) = ranks.iter().find(|r| !TR_RANK_MENU.contains(r)) {
                        return Err(RunError::config(
                            "decomposition.ranks",
                            format!("{r} is outside the TR menu {TR_RANK_MENU:?}; set custom: true to allow"),
                        ));
                    }
                }
            }
        }
        let ls_menu = length_scale_menu();
        for (i, entry) in self.kernels.iter().enumerate() {
            entry
                .spec
                .validate()
                .map_err(|e| RunError::config(format!("kernels[{i}]"), e))?;
            if !self.custom {
                if !in_menu(entry.spec.length_scale, &ls_menu) {
                    return Err(RunError::config(
                        format!("kernels[{i}].length_scale"),
                        format!(
                            "{} is outside the search menu; set custom: true to allow",
                            entry.spec.length_scale
                        ),
                    ));
                }
                if !(1e-13..=5e-5).contains(&entry.spec.nugget) {
                    return Err(RunError::config(
                        format!("kernels[{i}].nugget"),
                        format!(
                            "{} is outside [1e-13, 5e-5]; set custom: true to allow",
                            entry.spec.nugget
                        ),
                    ));
                }
                if !(20..=720).contains(&entry.inducing) {
                    return Err(RunError::config(
                        format!("kernels[{i}].inducing"),
                        format!(
                            "{} is outside the 20–720 range; set custom: true to allow",
                            entry.inducing
                        ),
                    ));
                }
            } else if entry.inducing == 0 {
                return Err(RunError::config(
                    format!("kernels[{i}].inducing"),
                    "at least one inducing point is required",
                ));
            }
        }
        match &self.collocation {
            CollocationSpec::Grid { shape } => {
                if shape.len() != d {
                    return Err(RunError::config(
                        "collocation.shape",
                        format!("{} axis counts for dimension {d}", shape.len()),
                    ));
                }
                if shape.iter().any(|&n| n < 2) {
                    return Err(RunError::config(
                        "collocation.shape",
                        "every axis needs at least 2 points",
                    ));
                }
            }
            CollocationSpec::Random {
                interior, boundary, ..
            } => {
                if *interior == 0 || *boundary == 0 {
                    return Err(RunError::config(
                        "collocation",
                        "interior and boundary counts must be positive",
                    ));
                }
            }
        }
        self.solver
            .validate()
            .map_err(|e| RunError::config("solver", e))?;
        if !self.custom {
            for (name, alpha) in [
                ("solver.alpha_interior", self.solver.alpha_interior),
                ("solver.alpha_boundary", self.solver.alpha_boundary),
            ] {
                if !is_power_of_ten(alpha) {
                    return Err(RunError::config(
                        name,
                        format!("{alpha} is not in {{1e0, 1e1, …, 1e10}}; set custom: true to allow"),
                    ));
                }
            }
        }
        if self.trainer == Trainer::Adam && self.adam.steps == 0 {
            return Err(RunError::config("adam.steps", "must be positive"));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(RunError::config("output_dir", "must not be empty"));
        }
        Ok(problem)
    }

    /// Sampling and initialization seeds split from the root seed.
    fn split_seeds(&self) -> (u64, u64) {
        let mut root = ChaCha8Rng::seed_from_u64(self.solver.seed);
        let sample = root.next_u64();
        let init = root.next_u64();
        (sample, init)
    }

    fn sample(&self, problem: &PdeProblem) -> Result<CollocationSet, RunError> {
        match &self.collocation {
            CollocationSpec::Grid { shape } => Ok(grid_sample(&problem.domain, shape)?),
            CollocationSpec::Random {
                interior,
                boundary,
                seed,
            } => {
                let seed = seed.unwrap_or_else(|| self.split_seeds().0);
                Ok(random_sample(&problem.domain, *interior, *boundary, seed)?)
            }
        }
    }

    fn init_model(&self, problem: &PdeProblem) -> Result<FactorModel, RunError> {
        let specs: Vec<KernelSpec> = self.kernels.iter().map(|k| k.spec).collect();
        let counts: Vec<usize> = self.kernels.iter().map(|k| k.inducing).collect();
        let domain_box = problem.domain.bounding_box();
        let mut rng = ChaCha8Rng::seed_from_u64(self.split_seeds().1);
        Ok(FactorModel::init_random(
            self.decomposition.clone(),
            &specs,
            &counts,
            &domain_box,
            &mut rng,
        )?)
    }
}

/// Loads a config file, reporting parse failures with the offending field
/// path.
pub fn load_config(path: &Path) -> Result<RunConfig, RunError> {
    let text = fs::read_to_string(path).map_err(|e| RunError::io(path, e))?;
    parse_config(&text)
}

/// Parses config JSON, reporting failures with the offending field path.
pub fn parse_config(text: &str) -> Result<RunConfig, RunError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| RunError::Config {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })
}

/// Converts already-parsed JSON (e.g. after `--set` overrides) into a config,
/// reporting failures with the offending field path.
pub fn config_from_value(value: serde_json::Value) -> Result<RunConfig, RunError> {
    serde_path_to_error::deserialize(value).map_err(|e| RunError::Config {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })
}

/// Applies one `path=value` override to config JSON. Paths are dotted and may
/// index arrays either way: `kernels.0.length_scale` or
/// `kernels[0].length_scale`. The value parses as JSON when possible and
/// falls back to a string, so `--set problem=elliptic` needs no quoting.
/// Setting a key that is absent (an elided default) inserts it.
pub fn apply_override(config: &mut serde_json::Value, spec: &str) -> Result<(), RunError> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| RunError::config("--set", format!("`{spec}` is not of the form path=value")))?;
    let leaf: serde_json::Value =
        serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let normalized = path.replace('[', ".").replace(']', "");
    let segments: Vec<&str> = normalized.split('.').filter(|s| !s.is_empty()).collect();
    if segments.is_empty() {
        return Err(RunError::config("--set", "empty override path"));
    }
    let mut cursor = config;
    for (i, segment) in segments.iter().enumerate() {
        let last = i + 1 == segments.len();
        let walked = segments[..i].join(".");
        if let Ok(index) = segment.parse::<usize>() {
            let arr = cursor.as_array_mut().ok_or_else(|| {
                RunError::config(path, format!("`{walked}` is not an array"))
            })?;
            let slot = arr.get_mut(index).ok_or_else(|| {
                RunError::config(path, format!("index {index} is out of bounds in `{walked}`"))
            })?;
            if last {
                *slot = leaf;
                return Ok(());
            }
            cursor = slot;
        } else {
            let obj = cursor.as_object_mut().ok_or_else(|| {
                RunError::config(path, format!("`{walked}` is not an object"))
            })?;
            if last {
                obj.insert(segment.to_string(), leaf);
                return Ok(());
            }
            cursor = obj
                .entry(segment.to_string())
                .or_insert_with(|| serde_json::Value::Object(Default::default()));
        }
    }
    unreachable!("loop always returns on the last segment")
}

/// The outcome of one [`run`], serialized alongside the trace and checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub config: RunConfig,
    pub relative_l2: f64,
    pub final_objective: f64,
    pub final_interior_mse: f64,
    pub final_boundary_mse: f64,
    pub final_rkhs_penalty: f64,
    /// Outer iterations (ALS) or steps (Adam) actually executed.
    pub iterations: usize,
    pub seconds: f64,
    pub diverged: bool,
    pub checkpoint_path: PathBuf,
    pub trace_path: PathBuf,
}

impl SolveReport {
    pub fn save(&self, path: &Path) -> Result<(), RunError> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| RunError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = fs::read_to_string(path).map_err(|e| RunError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn create_output_dir(dir: &Path) -> Result<(), RunError> {
    fs::create_dir_all(dir).map_err(|e| RunError::io(dir, e))
}

/// Executes one config end to end: sample → fit → evaluate → persist.
/// Deterministic given the seed. On divergence the partial trace is saved
/// before the error propagates.
pub fn run(cfg: &RunConfig) -> Result<SolveReport, RunError> {
    let problem = cfg.validate()?;
    create_output_dir(&cfg.output_dir)?;
    let trace_path = cfg.output_dir.join("trace.csv");
    let checkpoint_path = cfg.output_dir.join("checkpoint.json");

    let started = Instant::now();
    let colloc = cfg.sample(&problem)?;
    let model = cfg.init_model(&problem)?;
    let fitted = match cfg.trainer {
        Trainer::Als => als_fit(model, &problem, &colloc, &cfg.solver),
        Trainer::Adam => adam_fit(model, &problem, &colloc, &cfg.solver, &cfg.adam),
    };
    let (fitted, trace) = match fitted {
        Ok(pair) => pair,
        Err(AlsError::Diverged {
            objective,
            initial,
            trace,
        }) => {
            trace
                .save_csv(&trace_path)
                .map_err(|e| RunError::io(&trace_path, e))?;
            return Err(RunError::Diverged {
                objective,
                initial,
                trace_path,
            });
        }
        Err(other) => return Err(RunError::Solver(other)),
    };

    let grid = eval_grid(&problem.domain, None)?;
    let relative_l2 = relative_l2(&fitted, &problem, &grid)?;
    let seconds = started.elapsed().as_secs_f64();

    trace
        .save_csv(&trace_path)
        .map_err(|e| RunError::io(&trace_path, e))?;
    fitted.save_checkpoint(&checkpoint_path)?;
    let last = trace
        .records
        .last()
        .expect("fit always records the initial objective");
    let report = SolveReport {
        config: cfg.clone(),
        relative_l2,
        final_objective: last.objective,
        final_interior_mse: last.interior_mse,
        final_boundary_mse: last.boundary_mse,
        final_rkhs_penalty: last.rkhs_penalty,
        iterations: trace.len() - 1,
        seconds,
        diverged: false,
        checkpoint_path: checkpoint_path.clone(),
        trace_path,
    };
    report.save(&cfg.output_dir.join("report.json"))?;
    Ok(report)
}

/// Which hyperparameter a sweep varies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Every dimension's kernel length scale.
    LengthScale,
    /// CP rank, or every TR bond rank.
    Rank,
    /// Total collocation count; grids become per-axis `round(v^(1/d))`,
    /// random specs split 90/10 interior/boundary.
    CollocationCount,
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::LengthScale => "length_scale",
            SweepAxis::Rank => "rank",
            SweepAxis::CollocationCount => "collocation_count",
        })
    }
}

/// One sweep entry: either a finished report or the recorded error.
#[derive(Debug)]
pub struct SweepRow {
    pub value: f64,
    pub report: Result<SolveReport, RunError>,
}

#[derive(Debug, Default)]
pub struct SweepTable {
    pub axis: Option<SweepAxis>,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    /// CSV with columns `value,relative_l2,seconds`; failed runs leave the
    /// metrics empty (the error stays in the table).
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "value,relative_l2,seconds")?;
        for row in &self.rows {
            match &row.report {
                Ok(report) => writeln!(
                    out,
                    "{},{},{}",
                    row.value, report.relative_l2, report.seconds
                )?,
                Err(_) => writeln!(out, "{},,", row.value)?,
            }
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<(), RunError> {
        let file = fs::File::create(path).map_err(|e| RunError::io(path, e))?;
        self.write_csv(io::BufWriter::new(file))
            .map_err(|e| RunError::io(path, e))
    }
}

fn apply_axis(cfg: &mut RunConfig, axis: SweepAxis, value: f64) -> Result<(), RunError> {
    match axis {
        SweepAxis::LengthScale => {
            for entry in &mut cfg.kernels {
                entry.spec.length_scale = value;
            }
        }
        SweepAxis::Rank => {
            let rank = value.round() as usize;
            if rank == 0 || (value - rank as f64).abs() > 1e-9 {
                return Err(RunError::config(
                    "sweep.values",
                    format!("rank value {value} is not a positive integer"),
                ));
            }
            match &mut cfg.decomposition {
                Decomposition::Cp { rank: r } => *r = rank,
                Decomposition::TensorRing { ranks } => ranks.fill(rank),
            }
        }
        SweepAxis::CollocationCount => {
            let total = value.round();
            if total < 2.0 || (value - total).abs() > 1e-9 {
                return Err(RunError::config(
                    "sweep.values",
                    format!("collocation count {value} is not a positive integer"),
                ));
            }
            match &mut cfg.collocation {
                CollocationSpec::Grid { shape } => {
                    let d = shape.len() as f64;
                    let per_axis = total.powf(1.0 / d).round().max(2.0) as usize;
                    shape.fill(per_axis);
                }
                CollocationSpec::Random {
                    interior, boundary, ..
                } => {
                    let b = ((total * 0.1).round() as usize).max(1);
                    *interior = (total as usize).saturating_sub(b).max(1);
                    *boundary = b;
                }
            }
        }
    }
    Ok(())
}

/// Runs the base config once per value, sharing the seed. Every derived
/// config is marked `custom` (sweeps explore off-menu values by design) and
/// owns the subdirectory `<output_dir>/<axis>-<value>`. Per-run errors are
/// recorded and the sweep continues.
pub fn sweep(base: &RunConfig, axis: SweepAxis, values: &[f64]) -> SweepTable {
    let mut table = SweepTable {
        axis: Some(axis),
        rows: Vec::with_capacity(values.len()),
    };
    for &value in values {
        let mut cfg = base.clone();
        cfg.custom = true;
        cfg.output_dir = base.output_dir.join(format!("{axis}-{value}"));
        let report = apply_axis(&mut cfg, axis, value).and_then(|()| run(&cfg));
        table.rows.push(SweepRow { value, report });
    }
    table
}

/// Paired traces from the two trainers started from the identical model.
#[derive(Debug)]
pub struct TrainerComparison {
    pub als: LossTrace,
    pub adam: LossTrace,
    pub als_model: FactorModel,
    pub adam_model: FactorModel,
}

/// Fits the same initialization with ALS and with Adam. Both runs share the
/// collocation set and the initial model, so the iteration-0 objectives are
/// bit-identical; the traces land in `als_trace.csv` / `adam_trace.csv`.
pub fn compare_trainers(cfg: &RunConfig) -> Result<TrainerComparison, RunError> {
    let problem = cfg.validate()?;
    create_output_dir(&cfg.output_dir)?;
    let colloc = cfg.sample(&problem)?;
    let init = cfg.init_model(&problem)?;

    let run_one = |trainer: Trainer, name: &str| -> Result<(FactorModel, LossTrace), RunError> {
        let fitted = match trainer {
            Trainer::Als => als_fit(init.clone(), &problem, &colloc, &cfg.solver),
            Trainer::Adam => adam_fit(init.clone(), &problem, &colloc, &cfg.solver, &cfg.adam),
        };
        let path = cfg.output_dir.join(format!("{name}_trace.csv"));
        match fitted {
            Ok((model, trace)) => {
                trace.save_csv(&path).map_err(|e| RunError::io(&path, e))?;
                Ok((model, trace))
            }
            Err(AlsError::Diverged {
                objective,
                initial,
                trace,
            }) => {
                trace.save_csv(&path).map_err(|e| RunError::io(&path, e))?;
                Err(RunError::Diverged {
                    objective,
                    initial,
                    trace_path: path,
                })
            }
            Err(other) => Err(RunError::Solver(other)),
        }
    };

    let (als_model, als) = run_one(Trainer::Als, "als")?;
    let (adam_model, adam) = run_one(Trainer::Adam, "adam")?;
    Ok(TrainerComparison {
        als,
        adam,
        als_model,
        adam_model,
    })
}

/// CSV of `x0,…,x{d−1},abs_error` over `points`; returns the row count.
pub fn pointwise_error_export<W: Write>(
    model: &FactorModel,
    problem: &PdeProblem,
    points: &PointSet,
    mut out: W,
) -> Result<usize, RunError> {
    let reference = problem.reference.as_ref().ok_or_else(|| {
        RunError::config("problem", format!("`{}` has no reference solution", problem.key))
    })?;
    let d = points.dim();
    write_coord_header(&mut out, d, "abs_error").map_err(|e| RunError::Io {
        path: PathBuf::from("<writer>"),
        source: e,
    })?;
    let zero = crate::factor::DerivativeMultiIndex::zero(d);
    let mut rows = 0usize;
    for p in points.iter() {
        let u = model.eval(p, &zero)?;
        let err = (u - reference(p)).abs();
        write_point_row(&mut out, p, err).map_err(|e| RunError::Io {
            path: PathBuf::from("<writer>"),
            source: e,
        })?;
        rows += 1;
    }
    Ok(rows)
}

/// CSV of `x0,…,x{d−1},u_ref` over `points`; returns the row count.
pub fn reference_export<W: Write>(
    problem: &PdeProblem,
    points: &PointSet,
    mut out: W,
) -> Result<usize, RunError> {
    let reference = problem.reference.as_ref().ok_or_else(|| {
        RunError::config("problem", format!("`{}` has no reference solution", problem.key))
    })?;
    let d = points.dim();
    write_coord_header(&mut out, d, "u_ref").map_err(|e| RunError::Io {
        path: PathBuf::from("<writer>"),
        source: e,
    })?;
    let mut rows = 0usize;
    for p in points.iter() {
        write_point_row(&mut out, p, reference(p)).map_err(|e| RunError::Io {
            path: PathBuf::from("<writer>"),
            source: e,
        })?;
        rows += 1;
    }
    Ok(rows)
}

fn write_coord_header<W: Write>(out: &mut W, d: usize, last: &str) -> io::Result<()> {
    for i in 0..d {
        write!(out, "x{i},")?;
    }
    writeln!(out, "{last}")
}

fn write_point_row<W: Write>(out: &mut W, p: &[f64], value: f64) -> io::Result<()> {
    for c in p {
        write!(out, "{c},")?;
    }
    writeln!(out, "{value}")
}

/// Tuned starting configuration for a registered problem, matching the
/// published per-problem hyperparameter choices. The caller still picks the
/// output directory.
pub fn recommended(problem_key: &str) -> Result<RunConfig, RunError> {
    let problem = problems::problem(problem_key)?;
    let d = problem.dim;
    let se = |ls: f64, nugget: f64, inducing: usize| KernelEntry {
        spec: KernelSpec::new(KernelFamily::SquaredExponential, ls)
            .expect("menu length scales are valid")
            .with_nugget(nugget),
        inducing,
    };
    let solver = |alpha: f64, outers: usize| SolverConfig {
        alpha_interior: alpha,
        alpha_boundary: alpha,
        outer_iters: outers,
        linearizer: Linearizer::Newton,
        convergence_tol: 1e-9,
        ..SolverConfig::default()
    };
    let (decomposition, kernels, collocation, solver) = match problem_key {
        "elliptic" => (
            Decomposition::Cp { rank: 10 },
            vec![se(0.2, 1e-10, 64); 2],
            CollocationSpec::Grid { shape: vec![25, 25] },
            solver(1e10, 100),
        ),
        "burgers-0.02" => (
            Decomposition::Cp { rank: 10 },
            vec![se(0.4, 1e-10, 56), se(0.04, 1e-10, 144)],
            CollocationSpec::Random {
                interior: 2160,
                boundary: 240,
                seed: None,
            },
            solver(1e9, 100),
        ),
        "burgers-0.001" => (
            Decomposition::Cp { rank: 12 },
            vec![se(0.4, 1e-10, 64), se(0.01, 1e-10, 320)],
            CollocationSpec::Random {
                interior: 4320,
                boundary: 480,
                seed: None,
            },
            solver(1e9, 100),
        ),
        "eikonal" => (
            Decomposition::Cp { rank: 10 },
            vec![se(0.1, 1e-10, 64); 2],
            CollocationSpec::Grid { shape: vec![49, 49] },
            solver(1e9, 100),
        ),
        "allen-cahn-2d-15" => (
            Decomposition::Cp { rank: 10 },
            vec![se(0.05, 1e-10, 128); 2],
            CollocationSpec::Random {
                interior: 4320,
                boundary: 480,
                seed: None,
            },
            solver(1e9, 100),
        ),
        "allen-cahn-2d-20" => (
            Decomposition::Cp { rank: 10 },
            vec![se(0.04, 1e-10, 160); 2],
            CollocationSpec::Random {
                interior: 4320,
                boundary: 480,
                seed: None,
            },
            solver(1e9, 100),
        ),
        "allen-cahn-4d-15" => (
            Decomposition::TensorRing { ranks: vec![3; 4] },
            vec![se(0.05, 1e-10, 96); 4],
            CollocationSpec::Random {
                interior: 7200,
                boundary: 800,
                seed: None,
            },
            solver(1e9, 60),
        ),
        "allen-cahn-6d-15" => (
            Decomposition::TensorRing { ranks: vec![3; 6] },
            vec![se(0.05, 1e-10, 64); 6],
            CollocationSpec::Random {
                interior: 14400,
                boundary: 1600,
                seed: None,
            },
            solver(1e9, 40),
        ),
        "darcy-6d" => (
            Decomposition::Cp { rank: 10 },
            vec![se(0.3, 1e-9, 48); 6],
            CollocationSpec::Random {
                interior: 14400,
                boundary: 1600,
                seed: None,
            },
            solver(1e9, 40),
        ),
        other => {
            return Err(RunError::config(
                "problem",
                format!("no recommended configuration for `{other}`"),
            ))
        }
    };
    debug_assert_eq!(kernels.len(), d);
    Ok(RunConfig {
        schema_version: 1,
        problem: problem_key.into(),
        decomposition,
        kernels,
        collocation,
        solver,
        trainer: Trainer::Als,
        adam: AdamParams::default(),
        custom: false,
        output_dir: PathBuf::from("runs").join(problem_key),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn tiny_config(dir: &Path) -> RunConfig {
        RunConfig {
            schema_version: 1,
            problem: "elliptic".into(),
            decomposition: Decomposition::Cp { rank: 5 },
            kernels: vec![
                KernelEntry {
                    spec: KernelSpec::new(KernelFamily::SquaredExponential, 0.2)
                        .unwrap()
                        .with_nugget(1e-9),
                    inducing: 20,
                };
                2
            ],
            collocation: CollocationSpec::Grid { shape: vec![9, 9] },
            solver: SolverConfig {
                alpha_interior: 1e6,
                alpha_boundary: 1e6,
                outer_iters: 5,
                ..SolverConfig::default()
            },
            trainer: Trainer::Als,
            adam: AdamParams::default(),
            custom: false,
            output_dir: dir.to_path_buf(),
        }
    }

    #[test]
    fn config_json_round_trips_with_defaults() {
        let text = r#"{
            "problem": "elliptic",
            "decomposition": {"type": "cp", "rank": 10},
            "kernels": [
                {"family": "squared_exponential", "length_scale": 0.2, "nugget": 1e-10},
                {"family": "squared_exponential", "length_scale": 0.2, "nugget": 1e-10}
            ],
            "collocation": {"type": "grid", "shape": [25, 25]},
            "solver": {"alpha_interior": 1e10, "alpha_boundary": 1e10, "outer_iters": 100},
            "output_dir": "runs/elliptic"
        }"#;
        let cfg = parse_config(text).unwrap();
        assert_eq!(cfg.schema_version, 1);
        assert_eq!(cfg.trainer, Trainer::Als);
        assert_eq!(cfg.kernels[0].inducing, 64);
        assert!(!cfg.custom);
        let echo: RunConfig =
            serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(echo, cfg);
    }

    #[test]
    fn missing_problem_field_is_reported_by_path() {
        let text = r#"{
            "decomposition": {"type": "cp", "rank": 10},
            "kernels": [],
            "collocation": {"type": "grid", "shape": [25, 25]},
            "solver": {"alpha_interior": 1e10, "alpha_boundary": 1e10, "outer_iters": 100},
            "output_dir": "runs"
        }"#;
        match parse_config(text) {
            Err(RunError::Config { message, .. }) => {
                assert!(message.contains("problem"), "message: {message}");
            }
            other => panic!("expected ConfigError, got {:?}", other.err()),
        }
    }

    #[test]
    fn bad_nested_field_reports_its_path() {
        let text = r#"{
            "problem": "elliptic",
            "decomposition": {"type": "cp", "rank": 10},
            "kernels": [
                {"family": "squared_exponential", "length_scale": 0.2},
                {"family": "squared_exponential", "length_scale": "wide"}
            ],
            "collocation": {"type": "grid", "shape": [25, 25]},
            "solver": {"alpha_interior": 1e10, "alpha_boundary": 1e10, "outer_iters": 100},
            "output_dir": "runs"
        }"#;
        match parse_config(text) {
            Err(RunError::Config { path, .. }) => {
                assert!(path.contains("kernels[1]"), "path: {path}");
            }
            other => panic!("expected ConfigError, got {:?}", other.err()),
        }
    }

    #[test]
    fn menu_validation_flags_off_menu_values() {
        let dir = tempdir().unwrap();
        let mut cfg = tiny_config(dir.path());

        cfg.kernels[0].spec.length_scale = 0.15;
        match cfg.validate() {
            Err(RunError::Config { path, .. }) => assert_eq!(path, "kernels[0].length_scale"),
            other => panic!("expected ConfigError, got {:?}", other.err()),
        }
        cfg.custom = true;
        assert!(cfg.validate().is_ok(), "custom flag lifts menu checks");

        let mut cfg = tiny_config(dir.path());
        cfg.decomposition = Decomposition::Cp { rank: 3 };
        match cfg.validate() {
            Err(RunError::Config { path, .. }) => assert_eq!(path, "decomposition.rank"),
            other => panic!("expected ConfigError, got {:?}", other.err()),
        }

        let mut cfg = tiny_config(dir.path());
        cfg.kernels[1].spec.nugget = 1e-3;
        match cfg.validate() {
            Err(RunError::Config { path, .. }) => assert_eq!(path, "kernels[1].nugget"),
            other => panic!("expected ConfigError, got {:?}", other.err()),
        }

        let mut cfg = tiny_config(dir.path());
        cfg.kernels[0].inducing = 10;
        match cfg.validate() {
            Err(RunError::Config { path, .. }) => assert_eq!(path, "kernels[0].inducing"),
            other => panic!("expected ConfigError, got {:?}", other.err()),
        }

        let mut cfg = tiny_config(dir.path());
        cfg.solver.alpha_interior = 5e3;
        match cfg.validate() {
            Err(RunError::Config { path, .. }) => assert_eq!(path, "solver.alpha_interior"),
            other => panic!("expected ConfigError, got {:?}", other.err()),
        }
    }

    #[test]
    fn overrides_walk_objects_arrays_and_insert_missing_keys() {
        let mut value = serde_json::json!({
            "solver": {"seed": 0},
            "kernels": [{"length_scale": 0.2}, {"length_scale": 0.2}]
        });
        apply_override(&mut value, "solver.seed=7").unwrap();
        apply_override(&mut value, "kernels[1].length_scale=0.05").unwrap();
        apply_override(&mut value, "kernels.0.inducing=32").unwrap();
        apply_override(&mut value, "custom=true").unwrap();
        apply_override(&mut value, "problem=elliptic").unwrap();
        assert_eq!(value["solver"]["seed"], 7);
        assert_eq!(value["kernels"][1]["length_scale"], 0.05);
        assert_eq!(value["kernels"][0]["inducing"], 32);
        assert_eq!(value["custom"], true);
        assert_eq!(value["problem"], "elliptic");

        let err = apply_override(&mut value, "kernels[9].inducing=32").unwrap_err();
        assert!(matches!(err, RunError::Config { .. }), "{err}");
        let err = apply_override(&mut value, "no-equals-sign").unwrap_err();
        assert!(matches!(err, RunError::Config { .. }), "{err}");
        let err = apply_override(&mut value, "solver.seed.deeper=1").unwrap_err();
        assert!(matches!(err, RunError::Config { .. }), "{err}");
    }

    #[test]
    fn overridden_value_deserializes_with_field_paths() {
        let mut value = serde_json::json!({
            "problem": "elliptic",
            "decomposition": {"type": "cp", "rank": 10},
            "kernels": [
                {"family": "squared_exponential", "length_scale": 0.2},
                {"family": "squared_exponential", "length_scale": 0.2}
            ],
            "collocation": {"type": "grid", "shape": [9, 9]},
            "solver": {"alpha_interior": 1e6, "alpha_boundary": 1e6, "outer_iters": 2},
            "output_dir": "runs"
        });
        apply_override(&mut value, "solver.seed=3").unwrap();
        let cfg = config_from_value(value.clone()).unwrap();
        assert_eq!(cfg.solver.seed, 3);

        apply_override(&mut value, "solver.outer_iters=lots").unwrap();
        match config_from_value(value) {
            Err(RunError::Config { path, .. }) => assert_eq!(path, "solver.outer_iters"),
            other => panic!("expected ConfigError, got {:?}", other.err()),
        }
    }

    #[test]
    fn unknown_problem_key_is_a_config_error() {
        let dir = tempdir().unwrap();
        let mut cfg = tiny_config(dir.path());
        cfg.problem = "heat-death".into();
        match cfg.validate() {
            Err(RunError::Config { path, message }) => {
                assert_eq!(path, "problem");
                assert!(message.contains("heat-death"));
            }
            other => panic!("expected ConfigError, got {:?}", other.err()),
        }
    }

    #[test]
    fn kernel_count_must_match_problem_dimension() {
        let dir = tempdir().unwrap();
        let mut cfg = tiny_config(dir.path());
        cfg.kernels.pop();
        match cfg.validate() {
            Err(RunError::Config { path, .. }) => assert_eq!(path, "kernels"),
            other => panic!("expected ConfigError, got {:?}", other.err()),
        }
    }

    #[test]
    fn run_produces_report_and_artifacts() {
        let dir = tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let report = run(&cfg).unwrap();
        assert!(report.relative_l2 >= 0.0);
        assert_eq!(report.iterations, 5);
        assert!(!report.diverged);
        assert!(report.checkpoint_path.exists());
        assert!(report.trace_path.exists());
        assert!(dir.path().join("report.json").exists());

        let loaded = SolveReport::load(&dir.path().join("report.json")).unwrap();
        assert_eq!(loaded, report);
    }

    #[test]
    fn reruns_are_bit_identical() {
        let dir_a = tempdir().unwrap();
        let dir_b = tempdir().unwrap();
        let a = run(&tiny_config(dir_a.path())).unwrap();
        let b = run(&tiny_config(dir_b.path())).unwrap();
        assert_eq!(a.relative_l2.to_bits(), b.relative_l2.to_bits());
        assert_eq!(a.final_objective.to_bits(), b.final_objective.to_bits());
    }

    #[test]
    fn random_collocation_derives_its_seed_from_the_root() {
        let dir = tempdir().unwrap();
        let mut cfg = tiny_config(dir.path());
        cfg.collocation = CollocationSpec::Random {
            interior: 60,
            boundary: 20,
            seed: None,
        };
        let problem = cfg.validate().unwrap();
        let a = cfg.sample(&problem).unwrap();
        let b = cfg.sample(&problem).unwrap();
        assert_eq!(a.interior.point(0), b.interior.point(0));
        cfg.solver.seed = 1;
        let c = cfg.sample(&problem).unwrap();
        assert_ne!(a.interior.point(0), c.interior.point(0));
    }

    #[test]
    fn sweep_continues_past_failures_and_writes_csv() {
        let dir = tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        // Rank 0 fails apply_axis; the others run.
        let table = sweep(&cfg, SweepAxis::Rank, &[2.0, 0.0, 3.0]);
        assert_eq!(table.rows.len(), 3);
        assert!(table.rows[0].report.is_ok());
        assert!(table.rows[1].report.is_err());
        assert!(table.rows[2].report.is_ok());

        let mut buf = Vec::new();
        table.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "value,relative_l2,seconds");
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[2], "0,,");
    }

    #[test]
    fn empty_sweep_yields_empty_table() {
        let dir = tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let table = sweep(&cfg, SweepAxis::LengthScale, &[]);
        assert!(table.rows.is_empty());
    }

    #[test]
    fn sweep_collocation_axis_rescales_grid_and_random_specs() {
        let dir = tempdir().unwrap();
        let mut cfg = tiny_config(dir.path());
        apply_axis(&mut cfg, SweepAxis::CollocationCount, 625.0).unwrap();
        assert_eq!(cfg.collocation, CollocationSpec::Grid { shape: vec![25, 25] });

        cfg.collocation = CollocationSpec::Random {
            interior: 1,
            boundary: 1,
            seed: None,
        };
        apply_axis(&mut cfg, SweepAxis::CollocationCount, 1000.0).unwrap();
        assert_eq!(
            cfg.collocation,
            CollocationSpec::Random {
                interior: 900,
                boundary: 100,
                seed: None,
            }
        );
    }

    #[test]
    fn compare_trainers_shares_the_initial_objective_bitwise() {
        let dir = tempdir().unwrap();
        let mut cfg = tiny_config(dir.path());
        cfg.solver.outer_iters = 3;
        cfg.adam.steps = 4;
        let cmp = compare_trainers(&cfg).unwrap();
        assert_eq!(
            cmp.als.records[0].objective.to_bits(),
            cmp.adam.records[0].objective.to_bits()
        );
        assert_eq!(cmp.adam.len(), 5, "adam trace = steps + init record");
        assert!(dir.path().join("als_trace.csv").exists());
        assert!(dir.path().join("adam_trace.csv").exists());
    }

    #[test]
    fn pointwise_export_covers_the_grid_and_is_zero_for_the_reference() {
        let dir = tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let problem = cfg.validate().unwrap();
        let colloc = cfg.sample(&problem).unwrap();
        let (model, _) = als_fit(
            cfg.init_model(&problem).unwrap(),
            &problem,
            &colloc,
            &cfg.solver,
        )
        .unwrap();

        let grid = eval_grid(&problem.domain, Some(13)).unwrap();
        let mut buf = Vec::new();
        let rows = pointwise_error_export(&model, &problem, &grid, &mut buf).unwrap();
        assert_eq!(rows, grid.len());
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), grid.len() + 1);
        assert_eq!(text.lines().next().unwrap(), "x0,x1,abs_error");

        // A "model" that IS the reference: errors collapse to zero.
        let mut mirror = problem.clone();
        let model_eval = model.clone();
        mirror.reference = Some(std::sync::Arc::new(move |x: &[f64]| {
            model_eval
                .eval(x, &crate::factor::DerivativeMultiIndex::zero(2))
                .unwrap()
        }));
        let mut buf = Vec::new();
        pointwise_error_export(&model, &mirror, &grid, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        for line in text.lines().skip(1) {
            let err: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
            assert!(err <= 1e-12);
        }
    }

    #[test]
    fn max_pointwise_error_dominates_the_mean_square_bound() {
        // max|e| ≥ sqrt(Σe²/n): the export and the L2 norm must agree on
        // scale.
        let dir = tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let problem = cfg.validate().unwrap();
        let colloc = cfg.sample(&problem).unwrap();
        let (model, _) = als_fit(
            cfg.init_model(&problem).unwrap(),
            &problem,
            &colloc,
            &cfg.solver,
        )
        .unwrap();
        let grid = eval_grid(&problem.domain, Some(21)).unwrap();
        let mut buf = Vec::new();
        pointwise_error_export(&model, &problem, &grid, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let errors: Vec<f64> = text
            .lines()
            .skip(1)
            .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
            .collect();
        let max = errors.iter().cloned().fold(0.0, f64::max);
        let rms = (errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt();
        assert!(max >= rms);
    }

    #[test]
    fn reference_export_writes_reference_values() {
        let dir = tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let problem = cfg.validate().unwrap();
        let grid = eval_grid(&problem.domain, Some(5)).unwrap();
        let mut buf = Vec::new();
        let rows = reference_export(&problem, &grid, &mut buf).unwrap();
        assert_eq!(rows, 25);
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "x0,x1,u_ref");
    }

    #[test]
    fn recommended_configs_validate_for_every_registry_key() {
        for key in problems::registry_keys() {
            let cfg = recommended(key).unwrap();
            cfg.validate()
                .unwrap_or_else(|e| panic!("recommended config for {key} invalid: {e}"));
        }
    }

    #[test]
    fn diverged_runs_save_the_partial_trace() {
        let dir = tempdir().unwrap();
        let mut cfg = tiny_config(dir.path());
        cfg.trainer = Trainer::Adam;
        cfg.solver.alpha_interior = 1e10;
        cfg.solver.alpha_boundary = 1e10;
        cfg.adam.steps = 400;
        cfg.adam.learning_rate = 1e5;
        cfg.custom = true;
        match run(&cfg) {
            Err(RunError::Diverged { trace_path, .. }) => {
                assert!(trace_path.exists());
                let text = fs::read_to_string(&trace_path).unwrap();
                assert!(text.lines().count() > 1, "partial trace has records");
            }
            other => panic!("expected divergence, got {:?}", other.map(|r| r.relative_l2)),
        }
    }
}
