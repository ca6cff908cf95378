use grk_core::objective::Quadratic;
use grk_core::oracle::{decompose_variance, DecompositionConfig};
use grk_core::{ObjectiveSpec, RngStream};
use serde::Serialize;

use super::{default_theta, logits, pick, temperatures};
use crate::config::{validate_counts, validate_positive};
use crate::error::CliError;
use crate::output::{emit, json_string};
use crate::Context;

#[derive(Serialize)]
struct Cell {
    b: usize,
    k: usize,
    predicted: f64,
    measured: f64,
    measured_radius: f64,
    rel_error: f64,
}

#[derive(Serialize)]
struct Report {
    version: u32,
    seed: u64,
    tau: f64,
    theta: Vec<f64>,
    objective: String,
    replicates: u64,
    a: f64,
    c: f64,
    a_by_outcome: Vec<f64>,
    gr_by_outcome: Vec<Vec<f64>>,
    grid: Vec<Cell>,
    max_rel_error: f64,
}

pub fn run(ctx: &Context) -> Result<(), CliError> {
    let (a, f) = (&ctx.args, &ctx.config.decompose);
    let taus = temperatures(&pick(&a.tau, &f.tau, vec![0.5]))?;
    if taus.len() != 1 {
        return Err(CliError::Usage("decompose takes exactly one temperature".into()));
    }
    let tau = taus[0];
    let k_grid = pick(&a.k, &f.k, vec![1, 10, 100]);
    let b_grid = pick(&a.b, &f.b, vec![1, 2, 4, 8]);
    validate_counts("k", &k_grid)?;
    validate_counts("b", &b_grid)?;
    let replicates = pick(&a.replicates, &f.replicates, 100_000);
    validate_positive("replicates", replicates)?;
    if replicates < 2 {
        return Err(CliError::Usage("decompose needs at least 2 replicates".into()));
    }
    let objective_seed = f.objective_seed.unwrap_or(1);
    let theta_values = f.theta.clone().unwrap_or_else(|| default_theta(pick(&a.n, &None, 3), objective_seed));
    let theta = logits(theta_values)?;
    let n = theta.len();
    let kind = f.objective.clone().unwrap_or_else(|| "random".into());
    let obj = match kind.as_str() {
        "random" => ObjectiveSpec::new(Quadratic::random(n, &mut RngStream::new(objective_seed, 0)))?,
        "constant" => ObjectiveSpec::new(Quadratic::constant(n, 1.0))?,
        other => return Err(CliError::Usage(format!("unknown objective {other:?}; use \"random\" or \"constant\""))),
    };
    let defaults = DecompositionConfig::default();
    let config = DecompositionConfig {
        k_grid,
        b_grid,
        n_replicates: replicates,
        conditional_draws: f.conditional_draws.unwrap_or(defaults.conditional_draws),
        k_ref: f.k_ref.unwrap_or(defaults.k_ref),
        seed: ctx.seed,
    };
    let report = decompose_variance(&theta, tau, &obj, &config)?;
    let out = Report {
        version: 1,
        seed: ctx.seed,
        tau: tau.value(),
        theta: theta.as_slice().to_vec(),
        objective: kind,
        replicates,
        a: report.a,
        c: report.c,
        a_by_outcome: report.a_by_outcome,
        gr_by_outcome: report.gr_by_outcome,
        grid: report
            .grid
            .iter()
            .map(|g| Cell { b: g.b, k: g.k, predicted: g.predicted, measured: g.measured, measured_radius: g.measured_radius, rel_error: g.rel_error })
            .collect(),
        max_rel_error: report.max_rel_error,
    };
    emit(ctx.out.as_deref(), &json_string(&out))
}
