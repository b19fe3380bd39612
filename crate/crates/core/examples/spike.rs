//! Scratch harness for hyperparameter tuning runs. Not part of the library.
//!
//! Usage: `spike <problem-key> [k=v ...]`
//!
//! Overrides: ls=0.4,0.04  n=56,144  nugget=1e-10  alpha=1e9  alpha_i= alpha_b=
//! rank=10  ranks=3,3,3,3  outers=100  sweeps=1  tol=1e-12  pf=0|1  seed=0
//! grid=49x49  rand=2160,240  trainer=als|adam  steps=10000  lr=1e-2
//! domain=circle|triangle (manual pipeline on the swapped domain)

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tensolve_core::{
    als_fit, eval_grid, problems, random_sample, recommended, relative_l2, run, CollocationSpec,
    Decomposition, DomainShape, FactorModel, Linearizer, RunConfig, Trainer,
};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let key = args.get(1).cloned().unwrap_or_else(|| "elliptic".into());
    let mut cfg = recommended(&key).unwrap();
    cfg.custom = true;
    cfg.output_dir =
        std::env::temp_dir().join(format!("spike-{key}-{}", std::process::id()));
    let mut domain: Option<String> = None;

    for kv in &args[2..] {
        let (k, v) = kv.split_once('=').expect("overrides look like k=v");
        apply(&mut cfg, &mut domain, k, v);
    }

    match domain {
        None => run_config(&key, &cfg),
        Some(shape) => run_swapped_domain(&key, &cfg, &shape),
    }
}

fn apply(cfg: &mut RunConfig, domain: &mut Option<String>, k: &str, v: &str) {
    match k {
        "ls" => {
            let vals = floats(v);
            for (i, entry) in cfg.kernels.iter_mut().enumerate() {
                entry.spec.length_scale = if vals.len() == 1 { vals[0] } else { vals[i] };
            }
        }
        "n" => {
            let vals: Vec<usize> = v.split(',').map(|s| s.parse().unwrap()).collect();
            for (i, entry) in cfg.kernels.iter_mut().enumerate() {
                entry.inducing = if vals.len() == 1 { vals[0] } else { vals[i] };
            }
        }
        "nugget" => {
            let x: f64 = v.parse().unwrap();
            for entry in &mut cfg.kernels {
                entry.spec = entry.spec.with_nugget(x);
            }
        }
        "alpha" => {
            let x: f64 = v.parse().unwrap();
            cfg.solver.alpha_interior = x;
            cfg.solver.alpha_boundary = x;
        }
        "alpha_i" => cfg.solver.alpha_interior = v.parse().unwrap(),
        "alpha_b" => cfg.solver.alpha_boundary = v.parse().unwrap(),
        "rank" => cfg.decomposition = Decomposition::Cp { rank: v.parse().unwrap() },
        "ranks" => {
            cfg.decomposition = Decomposition::TensorRing {
                ranks: v.split(',').map(|s| s.parse().unwrap()).collect(),
            }
        }
        "outers" => cfg.solver.outer_iters = v.parse().unwrap(),
        "sweeps" => cfg.solver.inner_sweeps = v.parse().unwrap(),
        "tol" => cfg.solver.convergence_tol = v.parse().unwrap(),
        "pf" => {
            cfg.solver.linearizer = if v == "1" {
                Linearizer::PartialFreeze
            } else {
                Linearizer::Newton
            }
        }
        "seed" => cfg.solver.seed = v.parse().unwrap(),
        "grid" => {
            cfg.collocation = CollocationSpec::Grid {
                shape: v.split('x').map(|s| s.parse().unwrap()).collect(),
            }
        }
        "rand" => {
            let c: Vec<usize> = v.split(',').map(|s| s.parse().unwrap()).collect();
            cfg.collocation = CollocationSpec::Random {
                interior: c[0],
                boundary: c[1],
                seed: None,
            };
        }
        "trainer" => {
            cfg.trainer = if v == "adam" { Trainer::Adam } else { Trainer::Als }
        }
        "steps" => cfg.adam.steps = v.parse().unwrap(),
        "lr" => cfg.adam.learning_rate = v.parse().unwrap(),
        "domain" => *domain = Some(v.to_string()),
        other => panic!("unknown override {other}"),
    }
}

fn floats(v: &str) -> Vec<f64> {
    v.split(',').map(|s| s.parse().unwrap()).collect()
}

fn summary(cfg: &RunConfig) -> String {
    let ls: Vec<String> = cfg
        .kernels
        .iter()
        .map(|k| format!("{}", k.spec.length_scale))
        .collect();
    let n: Vec<String> = cfg.kernels.iter().map(|k| format!("{}", k.inducing)).collect();
    format!(
        "ls={} n={} a_i={:.0e} a_b={:.0e} {:?} {:?} outers={} seed={}",
        ls.join(","),
        n.join(","),
        cfg.solver.alpha_interior,
        cfg.solver.alpha_boundary,
        cfg.decomposition,
        cfg.solver.linearizer,
        cfg.solver.outer_iters,
        cfg.solver.seed
    )
}

fn run_config(key: &str, cfg: &RunConfig) {
    match run(cfg) {
        Ok(report) => println!(
            "{key} {} | rel_l2={:.3e} objective={:.3e} int_mse={:.3e} bnd_mse={:.3e} iters={} | {:.2}s",
            summary(cfg),
            report.relative_l2,
            report.final_objective,
            report.final_interior_mse,
            report.final_boundary_mse,
            report.iterations,
            report.seconds
        ),
        Err(e) => println!("{key} {} | FAILED: {e}", summary(cfg)),
    }
}

/// Criterion-style irregular-domain pipeline: same problem physics, swapped
/// domain, random collocation only.
fn run_swapped_domain(key: &str, cfg: &RunConfig, shape: &str) {
    let mut problem = problems::problem(key).unwrap();
    problem.domain = match shape {
        "circle" => DomainShape::circle([0.5, 0.5], 0.5).unwrap(),
        "triangle" => {
            DomainShape::triangle([[0.0, 0.0], [1.0, 0.0], [0.5, 1.0]]).unwrap()
        }
        other => panic!("unknown domain {other}"),
    };
    let (interior, boundary) = match cfg.collocation {
        CollocationSpec::Random { interior, boundary, .. } => (interior, boundary),
        _ => (9604, 396),
    };
    let colloc = random_sample(&problem.domain, interior, boundary, cfg.solver.seed).unwrap();
    let specs: Vec<_> = cfg.kernels.iter().map(|k| k.spec).collect();
    let counts: Vec<_> = cfg.kernels.iter().map(|k| k.inducing).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.solver.seed);
    let model = FactorModel::init_random(
        cfg.decomposition.clone(),
        &specs,
        &counts,
        &problem.domain.bounding_box(),
        &mut rng,
    )
    .unwrap();
    let t0 = Instant::now();
    let (fitted, trace) = match als_fit(model, &problem, &colloc, &cfg.solver) {
        Ok(x) => x,
        Err(e) => {
            println!("{key}@{shape} {} | FAILED: {e}", summary(cfg));
            return;
        }
    };
    let secs = t0.elapsed().as_secs_f64();
    let pts = eval_grid(&problem.domain, None).unwrap();
    let err = relative_l2(&fitted, &problem, &pts).unwrap();
    let last = trace.records.last().unwrap();
    println!(
        "{key}@{shape} {} | rel_l2={err:.3e} objective={:.3e} int_mse={:.3e} bnd_mse={:.3e} iters={} | {secs:.2}s",
        summary(cfg),
        last.objective,
        last.interior_mse,
        last.boundary_mse,
        trace.len() - 1
    );
}
