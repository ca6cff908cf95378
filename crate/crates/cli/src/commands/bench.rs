use grk_core::objective::Quadratic;
use grk_core::oracle::{exact_gradient, measure_stats};
use grk_core::{Estimator, EstimatorId, ObjectiveSpec, RngStream, Temperature};

use super::{default_theta, logits, pick, temperatures};
use crate::config::{validate_counts, validate_positive};
use crate::error::CliError;
use crate::output::{emit, float, Csv};
use crate::Context;

/// Bench estimator selection: `grmc` expands over the K list.
enum Selection {
    One(EstimatorId),
    GrMcFamily,
}

fn parse(names: &[String]) -> Result<Vec<Selection>, CliError> {
    names
        .iter()
        .map(|s| {
            if s.trim().eq_ignore_ascii_case("grmc") {
                Ok(Selection::GrMcFamily)
            } else {
                s.parse().map(Selection::One).map_err(|e: grk_core::Error| CliError::Usage(e.to_string()))
            }
        })
        .collect()
}

pub fn run(ctx: &Context) -> Result<(), CliError> {
    let (a, f) = (&ctx.args, &ctx.config.bench);
    let n = pick(&a.n, &f.n, 3);
    if n < 2 {
        return Err(CliError::Usage("n must be at least 2".into()));
    }
    let taus = temperatures(&pick(&a.tau, &f.tau, vec![0.1, 0.5, 1.0]))?;
    let ks = pick(&a.k, &f.k, vec![1, 10, 100]);
    let bs = pick(&a.b, &f.b, vec![1]);
    validate_counts("k", &ks)?;
    validate_counts("b", &bs)?;
    let replicates = pick(&a.replicates, &f.replicates, 100_000);
    validate_positive("replicates", replicates)?;
    if replicates < 2 {
        return Err(CliError::Usage("bench needs at least 2 replicates".into()));
    }
    let default_names = ["reinforce", "gs", "st", "stgs", "grmc"].map(String::from).to_vec();
    let selections = parse(&pick(&a.estimators, &f.estimators, default_names))?;
    let objective_seed = f.objective_seed.unwrap_or(1);
    let theta = logits(f.theta.clone().unwrap_or_else(|| default_theta(n, objective_seed)))?;
    if theta.len() != n {
        return Err(CliError::Usage(format!("theta has {} entries, expected {n}", theta.len())));
    }
    let obj = ObjectiveSpec::new(Quadratic::random(n, &mut RngStream::new(objective_seed, 0)))?;
    let reference = exact_gradient(&theta, &obj)?;

    let mut header: Vec<String> = ["estimator", "tau", "K", "B", "n", "replicates"].map(String::from).to_vec();
    header.extend((0..n).map(|i| format!("mean_{i}")));
    header.extend(["cov_trace", "bias_norm", "mse", "ci_radius"].map(String::from));
    let mut csv = Csv::new(&header);

    // (id, tau column, K column, temperature used)
    let mut rows: Vec<(EstimatorId, f64, usize, Temperature)> = Vec::new();
    let unit = Temperature::new(1.0)?;
    for sel in &selections {
        match sel {
            Selection::One(EstimatorId::Reinforce) => rows.push((EstimatorId::Reinforce, 0.0, 0, unit)),
            Selection::One(id @ EstimatorId::GrMc(k)) => rows.extend(taus.iter().map(|t| (*id, t.value(), *k, *t))),
            Selection::One(id) => rows.extend(taus.iter().map(|t| (*id, t.value(), 0, *t))),
            Selection::GrMcFamily => {
                for t in &taus {
                    rows.extend(ks.iter().map(|&k| (EstimatorId::GrMc(k), t.value(), k, *t)));
                }
            }
        }
    }
    for (id, tau_col, k_col, tau) in rows {
        for &b in &bs {
            let est = Estimator::new(id, tau);
            let stats = measure_stats(|rng| Ok(est.estimate_batch(rng, &theta, &obj, b)?.values), &reference, replicates, ctx.seed)?;
            let mut fields = vec![
                id.to_string(),
                float(tau_col),
                k_col.to_string(),
                b.to_string(),
                n.to_string(),
                replicates.to_string(),
            ];
            fields.extend(stats.mean.iter().map(|&m| float(m)));
            fields.extend([stats.cov_trace, stats.bias_norm, stats.mse, stats.ci_radius].map(float));
            csv.row(&fields);
        }
    }
    emit(ctx.out.as_deref(), &csv.into_string())
}
