//! Command-line front end for the tensor-GP PDE solver.
//!
//! Every experiment is a JSON config (see [`tensolve_core::RunConfig`]);
//! `--set path=value` tweaks individual fields without editing the file.
//! Exit codes: 0 on success, 2 on configuration errors, 3 on divergence.

use std::fs;
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tensolve_core::{
    apply_override, compare_trainers, config_from_value, eval_grid, pointwise_error_export,
    problems, reference_export, run, sweep, FactorModel, RunConfig, RunError, SweepAxis,
};

#[derive(Parser)]
#[command(name = "tensolve", version, about = "Tensor-GP collocation solver for nonlinear PDEs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit one configuration; writes report.json, trace.csv, checkpoint.json.
    Solve {
        #[command(flatten)]
        config: ConfigArgs,
        /// Repeat with seeds seed, seed+1, … in per-repeat subdirectories.
        #[arg(long, default_value_t = 1)]
        repeats: u64,
    },
    /// Re-run a base configuration along one hyperparameter axis.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_enum)]
        axis: AxisArg,
        /// Comma-separated axis values, e.g. --values 0.01,0.05,0.2
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Fit the same initialization with ALS and with Adam; saves both traces.
    Compare {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Tabulate a problem's reference solution on an evaluation grid.
    ExportReference {
        /// Problem registry key, e.g. elliptic or burgers-0.02.
        #[arg(long)]
        problem: String,
        #[arg(long)]
        out: PathBuf,
        /// Grid points per axis (defaults scale with dimension).
        #[arg(long)]
        resolution: Option<usize>,
    },
    /// Tabulate |model − reference| on an evaluation grid.
    ExportPointwise {
        /// Problem registry key the checkpoint was trained on.
        #[arg(long)]
        problem: String,
        /// Checkpoint written by solve.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resolution: Option<usize>,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Field override, repeatable: --set solver.seed=7 --set custom=true
    #[arg(long = "set", value_name = "PATH=VALUE")]
    sets: Vec<String>,
    /// Overrides the config's output directory.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    #[value(name = "length_scale", alias = "length-scale")]
    LengthScale,
    #[value(name = "rank")]
    Rank,
    #[value(name = "collocation_count", alias = "collocation-count")]
    CollocationCount,
}

impl From<AxisArg> for SweepAxis {
    fn from(axis: AxisArg) -> Self {
        match axis {
            AxisArg::LengthScale => SweepAxis::LengthScale,
            AxisArg::Rank => SweepAxis::Rank,
            AxisArg::CollocationCount => SweepAxis::CollocationCount,
        }
    }
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, RunError> {
        let text = fs::read_to_string(&self.config).map_err(|e| RunError::Config {
            path: self.config.display().to_string(),
            message: e.to_string(),
        })?;
        let mut value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| RunError::Config {
                path: self.config.display().to_string(),
                message: e.to_string(),
            })?;
        for spec in &self.sets {
            apply_override(&mut value, spec)?;
        }
        let mut cfg = config_from_value(value)?;
        if let Some(dir) = &self.output_dir {
            cfg.output_dir = dir.clone();
        }
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(match err {
                RunError::Config { .. } => 2,
                RunError::Diverged { .. } => 3,
                _ => 1,
            })
        }
    }
}

fn dispatch(command: Command) -> Result<(), RunError> {
    match command {
        Command::Solve { config, repeats } => solve(config, repeats),
        Command::Sweep {
            config,
            axis,
            values,
        } => run_sweep(config, axis.into(), &values),
        Command::Compare { config } => compare(config),
        Command::ExportReference {
            problem,
            out,
            resolution,
        } => export_reference(&problem, &out, resolution),
        Command::ExportPointwise {
            problem,
            checkpoint,
            out,
            resolution,
        } => export_pointwise(&problem, &checkpoint, &out, resolution),
    }
}

fn solve(config: ConfigArgs, repeats: u64) -> Result<(), RunError> {
    let base = config.load()?;
    if repeats <= 1 {
        let report = run(&base)?;
        println!(
            "{}: relative_l2 = {:.6e} in {:.2}s (checkpoint {})",
            base.problem,
            report.relative_l2,
            report.seconds,
            report.checkpoint_path.display()
        );
        return Ok(());
    }
    let mut errors = Vec::with_capacity(repeats as usize);
    for i in 0..repeats {
        let mut cfg = base.clone();
        cfg.solver.seed = base.solver.seed.wrapping_add(i);
        cfg.output_dir = base.output_dir.join(format!("repeat-{i}"));
        let report = run(&cfg)?;
        println!(
            "repeat {i} (seed {}): relative_l2 = {:.6e} in {:.2}s",
            cfg.solver.seed, report.relative_l2, report.seconds
        );
        errors.push(report.relative_l2);
    }
    let mean = errors.iter().sum::<f64>() / errors.len() as f64;
    println!("mean relative_l2 over {repeats} repeats = {mean:.6e}");
    Ok(())
}

fn run_sweep(config: ConfigArgs, axis: SweepAxis, values: &[f64]) -> Result<(), RunError> {
    let base = config.load()?;
    base.validate()?;
    let table = sweep(&base, axis, values);
    fs::create_dir_all(&base.output_dir).map_err(|e| RunError::Config {
        path: base.output_dir.display().to_string(),
        message: e.to_string(),
    })?;
    let csv_path = base.output_dir.join("sweep.csv");
    table.save_csv(&csv_path)?;
    for row in &table.rows {
        match &row.report {
            Ok(report) => println!(
                "{axis:?} = {}: relative_l2 = {:.6e} in {:.2}s",
                row.value, report.relative_l2, report.seconds
            ),
            Err(err) => println!("{axis:?} = {}: failed: {err}", row.value),
        }
    }
    println!("sweep table written to {}", csv_path.display());
    Ok(())
}

fn compare(config: ConfigArgs) -> Result<(), RunError> {
    let cfg = config.load()?;
    let cmp = compare_trainers(&cfg)?;
    let als_final = cmp.als.final_objective().unwrap_or(f64::NAN);
    let adam_final = cmp.adam.final_objective().unwrap_or(f64::NAN);
    println!(
        "als:  {} iterations, final objective {als_final:.6e}",
        cmp.als.len().saturating_sub(1)
    );
    println!(
        "adam: {} steps, final objective {adam_final:.6e}",
        cmp.adam.len().saturating_sub(1)
    );
    println!("traces written to {}", cfg.output_dir.display());
    Ok(())
}

fn export_reference(
    problem: &str,
    out: &PathBuf,
    resolution: Option<usize>,
) -> Result<(), RunError> {
    let problem = problems::problem(problem)?;
    let points = eval_grid(&problem.domain, resolution)?;
    let file = fs::File::create(out).map_err(|e| RunError::Config {
        path: out.display().to_string(),
        message: e.to_string(),
    })?;
    let rows = reference_export(&problem, &points, BufWriter::new(file))?;
    println!("{rows} rows written to {}", out.display());
    Ok(())
}

fn export_pointwise(
    problem: &str,
    checkpoint: &PathBuf,
    out: &PathBuf,
    resolution: Option<usize>,
) -> Result<(), RunError> {
    let problem = problems::problem(problem)?;
    let model = FactorModel::load_checkpoint(checkpoint)?;
    let points = eval_grid(&problem.domain, resolution)?;
    let file = fs::File::create(out).map_err(|e| RunError::Config {
        path: out.display().to_string(),
        message: e.to_string(),
    })?;
    let rows = pointwise_error_export(&model, &problem, &points, BufWriter::new(file))?;
    println!("{rows} rows written to {}", out.display());
    Ok(())
}
