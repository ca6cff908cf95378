use std::path::Path;

use grk_core::experiments::{median_iterations, solve_qp, train_qp, tune_learning_rate, TrainConfig, TrainEstimator, TrainRun};
use grk_core::rng::derive_seed;
use rayon::prelude::*;
use serde::Serialize;

use super::{pick, qp_spec, temperatures};
use crate::config::validate_counts;
use crate::error::CliError;
use crate::output::{emit, float, json_string, Csv};
use crate::Context;

#[derive(Serialize)]
struct SeedResult {
    seed: u64,
    final_objective: f64,
    /// Iterations to reach each threshold; `null` when never reached.
    iterations_to: Vec<Option<usize>>,
}

#[derive(Serialize)]
struct EstimatorSummary {
    estimator: String,
    lr: f64,
    tuned: bool,
    batch: usize,
    per_seed: Vec<SeedResult>,
    /// Median per threshold; `null` when at least half the seeds never reach it.
    median_iterations_to: Vec<Option<f64>>,
}

#[derive(Serialize)]
struct Summary {
    version: u32,
    seed: u64,
    tau: f64,
    iters: usize,
    include_a_path: bool,
    v_star: f64,
    p_star: Vec<f64>,
    threshold_offsets: Vec<f64>,
    thresholds: Vec<f64>,
    estimators: Vec<EstimatorSummary>,
}

fn trajectory_csv(run: &TrainRun) -> String {
    let n = run.trajectory.first().map_or(0, |p| p.theta.len());
    let mut header: Vec<String> = vec!["iteration".into(), "exact_objective".into()];
    header.extend((0..n).map(|i| format!("theta_{i}")));
    let mut csv = Csv::new(&header);
    for p in &run.trajectory {
        let mut fields = vec![p.iteration.to_string(), float(p.objective)];
        fields.extend(p.theta.iter().map(|&t| float(t)));
        csv.row(&fields);
    }
    csv.into_string()
}

fn trajectory_path(dir: &Path, estimator: &TrainEstimator, seed: u64) -> std::path::PathBuf {
    dir.join(format!("{estimator}_seed{seed}.csv"))
}

pub fn run(ctx: &Context) -> Result<(), CliError> {
    let (a, f) = (&ctx.args, &ctx.config.train);
    let n = pick(&a.n, &f.n, 3);
    if n < 2 {
        return Err(CliError::Usage("n must be at least 2".into()));
    }
    let taus = temperatures(&pick(&a.tau, &f.tau, vec![0.1]))?;
    if taus.len() != 1 {
        return Err(CliError::Usage("train takes exactly one temperature".into()));
    }
    let tau = taus[0];
    let names = pick(&a.estimators, &f.estimators, vec!["grmc1000".to_string(), "stgs".to_string()]);
    if names.is_empty() {
        return Err(CliError::Usage("at least one estimator is required".into()));
    }
    let estimators: Vec<TrainEstimator> =
        names.iter().map(|s| s.parse().map_err(|e: grk_core::Error| CliError::Usage(e.to_string()))).collect::<Result<_, _>>()?;
    let lrs = pick(&a.lr, &f.lr, vec![1e-3, 3e-3, 1e-2, 3e-2, 1e-1]);
    if lrs.is_empty() || lrs.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
        return Err(CliError::Usage("learning rates must be finite and nonnegative".into()));
    }
    let iters = pick(&a.iters, &f.iters, 5000);
    let n_seeds = pick(&a.seeds, &f.seeds, 10);
    if n_seeds == 0 {
        return Err(CliError::Usage("seeds must be at least 1".into()));
    }
    let bs = pick(&a.b, &f.b, vec![1]);
    validate_counts("b", &bs)?;
    if bs.len() != 1 {
        return Err(CliError::Usage("train takes exactly one minibatch size".into()));
    }
    let offsets = f.thresholds.clone().unwrap_or_else(|| vec![0.01, 0.05]);
    if offsets.is_empty() {
        return Err(CliError::Usage("at least one threshold offset is required".into()));
    }
    let spec = qp_spec(&ctx.config.qp, n)?;
    let theta0 = f.theta0.clone().unwrap_or_else(|| grk_core::experiments::default_theta0(n));
    if theta0.len() != n {
        return Err(CliError::Usage(format!("theta0 must have {n} entries")));
    }
    let include_a_path = f.include_a_path.unwrap_or(true);

    let solution = solve_qp(&spec, 100_000, 1e-12);
    let thresholds: Vec<f64> = offsets.iter().map(|o| solution.value + o).collect();
    let seeds: Vec<u64> = (0..n_seeds).map(|s| derive_seed(ctx.seed, s)).collect();
    let tuning_seeds: Vec<u64> = (0..n_seeds).map(|s| derive_seed(ctx.seed, 1 << 32 | s)).collect();

    let mut summaries = Vec::new();
    for est in &estimators {
        let mut base = TrainConfig::new(*est, tau, lrs[0], iters, 0, n);
        base.batch = bs[0];
        base.theta0 = theta0.clone();
        base.include_a_path = include_a_path;
        let lr = if lrs.len() > 1 {
            tune_learning_rate(&spec, &base, &lrs, &tuning_seeds, thresholds[0])
                .ok_or_else(|| CliError::Usage(format!("every learning rate diverged for {est}")))?
        } else {
            lrs[0]
        };
        base.lr = lr;
        let results: Vec<_> = seeds
            .par_iter()
            .map(|&seed| {
                let mut cfg = base.clone();
                cfg.seed = seed;
                train_qp(&spec, &cfg)
            })
            .collect();
        let mut per_seed = Vec::new();
        for (seed, result) in seeds.iter().zip(results) {
            let run = match result {
                Ok(run) => run,
                Err(failure) => {
                    if let Some(dir) = &ctx.out {
                        emit(Some(&trajectory_path(dir, est, *seed)), &trajectory_csv(&failure.partial))?;
                    }
                    return Err(CliError::Train { estimator: est.to_string(), seed: *seed, source: failure.error });
                }
            };
            if let Some(dir) = &ctx.out {
                emit(Some(&trajectory_path(dir, est, *seed)), &trajectory_csv(&run))?;
            }
            per_seed.push(SeedResult {
                seed: *seed,
                final_objective: run.final_objective(),
                iterations_to: thresholds.iter().map(|&t| run.iterations_to(t)).collect(),
            });
        }
        let median_iterations_to = (0..thresholds.len())
            .map(|i| median_iterations(&per_seed.iter().map(|s| s.iterations_to[i]).collect::<Vec<_>>()))
            .collect();
        summaries.push(EstimatorSummary {
            estimator: est.to_string(),
            lr,
            tuned: lrs.len() > 1,
            batch: bs[0],
            per_seed,
            median_iterations_to,
        });
    }
    let summary = Summary {
        version: 1,
        seed: ctx.seed,
        tau: tau.value(),
        iters,
        include_a_path,
        v_star: solution.value,
        p_star: solution.p,
        threshold_offsets: offsets,
        thresholds,
        estimators: summaries,
    };
    let text = json_string(&summary);
    match &ctx.out {
        Some(dir) => emit(Some(&dir.join("summary.json")), &text),
        None => emit(None, &text),
    }
}
