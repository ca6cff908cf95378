//! The invariant suite behind `grk check`.

use grk_core::estimators::{estimate_grmc, estimate_gs, estimate_reinforce, estimate_st, estimate_stgs};
use grk_core::experiments::{logits_for, qp_objective_spec, QpSpec};
use grk_core::gumbel::{argmax, log_partition, sample_categorical_gumbel_max, sample_posterior_gumbels};
use grk_core::objective::{central_difference, Counting, Quadratic};
use grk_core::oracle::{exact_expectation, exact_gradient, measure_paired, measure_stats};
use grk_core::softmax::{tempered_softmax, tempered_softmax_jacobian};
use grk_core::stats::ScalarStats;
use grk_core::{Logits, ObjectiveSpec, OneHotSample, RngStream, Temperature};
use serde::Serialize;

use super::{pick, temperatures};
use crate::config::validate_positive;
use crate::error::CliError;
use crate::output::{emit, json_string};
use crate::Context;

#[derive(Debug, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub measured: f64,
    pub tolerance: f64,
    pub detail: String,
}

#[derive(Serialize)]
struct Report {
    version: u32,
    seed: u64,
    replicates: u64,
    passed: bool,
    checks: Vec<CheckResult>,
}

/// `measured <= tolerance`.
fn at_most(name: &'static str, measured: f64, tolerance: f64, detail: impl Into<String>) -> CheckResult {
    CheckResult { name, passed: measured <= tolerance, measured, tolerance, detail: detail.into() }
}

struct Settings {
    seed: u64,
    replicates: u64,
    taus: Vec<Temperature>,
    jacobian_tolerance: f64,
}

fn random_vector(rng: &mut RngStream, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * (2.0 * rng.uniform_open() - 1.0)).collect()
}

fn softmax_simplex(s: &Settings) -> CheckResult {
    let mut rng = RngStream::new(s.seed, 1);
    let mut worst = 0.0f64;
    for trial in 0..300 {
        let n = [2, 3, 8][trial % 3];
        let x = random_vector(&mut rng, n, 5.0);
        let tau = Temperature::new(0.05 + 2.0 * rng.uniform_open()).expect("positive");
        let p = tempered_softmax(&x, tau);
        if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
            worst = f64::INFINITY;
        }
        worst = worst.max((p.iter().sum::<f64>() - 1.0).abs());
    }
    at_most("softmax_simplex", worst, 1e-14, "max |Σ softmax - 1| over 300 random inputs")
}

fn softmax_overflow(_: &Settings) -> CheckResult {
    let p = tempered_softmax(&[1000.0, 0.0], Temperature::new(1.0).expect("positive"));
    let err = (p[0] - 1.0).abs().max(p[1].abs());
    let lz = log_partition(&Logits::new(vec![1000.0, 1000.0]).expect("finite"));
    let err = if lz.is_finite() { err.max((lz - 1000.0 - std::f64::consts::LN_2).abs()) } else { f64::INFINITY };
    at_most("softmax_overflow", err, 1e-12, "softmax(1000, 0) and log Z(1000, 1000)")
}

fn jacobian_fd(s: &Settings) -> CheckResult {
    let mut rng = RngStream::new(s.seed, 2);
    let mut worst = 0.0f64;
    for trial in 0..100 {
        let n = [2, 3, 8][trial % 3];
        let x = random_vector(&mut rng, n, 2.0);
        let tau = Temperature::new(0.2 + 1.8 * rng.uniform_open()).expect("positive");
        let jac = tempered_softmax_jacobian(&x, tau);
        let scale = jac.max_abs().max(1.0);
        for i in 0..n {
            let fd = central_difference(|y| tempered_softmax(y, tau)[i], &x, 1e-6);
            for j in 0..n {
                worst = worst.max((jac[(i, j)] - fd[j]).abs() / scale);
            }
        }
    }
    at_most("jacobian_fd", worst, s.jacobian_tolerance, "max relative error vs central differences, 100 inputs")
}

fn jacobian_structure(s: &Settings) -> CheckResult {
    let mut rng = RngStream::new(s.seed, 3);
    let mut worst = 0.0f64;
    for trial in 0..100 {
        let n = [2, 3, 8][trial % 3];
        let x = random_vector(&mut rng, n, 2.0);
        let jac = tempered_softmax_jacobian(&x, Temperature::new(0.5).expect("positive"));
        for i in 0..n {
            worst = worst.max(jac.row(i).iter().sum::<f64>().abs());
            for j in 0..n {
                worst = worst.max((jac[(i, j)] - jac[(j, i)]).abs());
            }
        }
    }
    at_most("jacobian_structure", worst, 1e-14, "row sums and asymmetry")
}

fn gumbel_moments(s: &Settings) -> CheckResult {
    let mut rng = RngStream::new(s.seed, 4);
    let mut acc = ScalarStats::default();
    for _ in 0..s.replicates {
        acc.push(rng.gumbel());
    }
    let euler = 0.577_215_664_901_532_9;
    let var = std::f64::consts::PI.powi(2) / 6.0;
    let z_mean = (acc.mean() - euler).abs() / (var / s.replicates as f64).sqrt();
    // Gumbel kurtosis is 5.4, so the sample variance has variance ≈ 4.4 σ⁴ / N.
    let z_var = (acc.variance() - var).abs() / (4.4 * var * var / s.replicates as f64).sqrt();
    at_most("gumbel_moments", z_mean.max(z_var), 4.0, "largest z-score of sample mean and variance")
}

fn gumbel_max_marginal(s: &Settings) -> CheckResult {
    let theta = Logits::new(vec![0.5, -0.3, 1.1]).expect("finite");
    let p = theta.probs();
    let mut counts = [0u64; 3];
    let mut rng = RngStream::new(s.seed, 5);
    let mut mismatched = false;
    for _ in 0..s.replicates {
        let (d, g) = sample_categorical_gumbel_max(&mut rng, &theta);
        mismatched |= g.argmax() != d.index();
        counts[d.index()] += 1;
    }
    let n = s.replicates as f64;
    let z = (0..3).map(|i| (counts[i] as f64 / n - p[i]).abs() / (p[i] * (1.0 - p[i]) / n).sqrt()).fold(0.0, f64::max);
    at_most("gumbel_max_marginal", if mismatched { f64::INFINITY } else { z }, 4.0, "largest category z-score")
}

fn posterior_argmax(s: &Settings) -> CheckResult {
    let mut rng = RngStream::new(s.seed, 6);
    let mut violations = 0u64;
    for theta in [vec![0.5, -0.3, 1.1], vec![0.0, 0.0, 0.0], vec![8.0, -8.0, 0.0]] {
        let theta = Logits::new(theta).expect("finite");
        for i in 0..3 {
            let d = OneHotSample::new(i, 3).expect("in range");
            for _ in 0..s.replicates / 9 {
                let g = sample_posterior_gumbels(&mut rng, &theta, d).expect("arity");
                if argmax(&g.values) != i || !g.values.iter().all(|v| v.is_finite()) {
                    violations += 1;
                }
            }
        }
    }
    at_most("posterior_argmax", violations as f64, 0.0, "posterior draws whose argmax differs from the outcome")
}

fn posterior_law(s: &Settings) -> CheckResult {
    let theta = Logits::new(vec![0.5, -0.3, 1.1]).expect("finite");
    let d = OneHotSample::new(2, 3).expect("in range");
    let mut rng = RngStream::new(s.seed, 7);
    let mut post = [ScalarStats::default(); 3];
    let mut filtered = vec![ScalarStats::default(); 3];
    for _ in 0..s.replicates {
        let g = sample_posterior_gumbels(&mut rng, &theta, d).expect("arity");
        post.iter_mut().zip(&g.values).for_each(|(a, v)| a.push(*v));
        let (outcome, u) = sample_categorical_gumbel_max(&mut rng, &theta);
        if outcome == d {
            filtered.iter_mut().zip(&u.values).for_each(|(a, v)| a.push(*v));
        }
    }
    let z = post
        .iter()
        .zip(&filtered)
        .map(|(a, b)| (a.mean() - b.mean()).abs() / (a.std_err().powi(2) + b.std_err().powi(2)).sqrt())
        .fold(0.0, f64::max);
    at_most("posterior_law", z, 4.0, "largest two-sample z-score of coordinate means vs rejection sampling")
}

fn reformulation_identity(s: &Settings) -> CheckResult {
    let spec = QpSpec::standard(3).expect("standard QP");
    let mut rng = RngStream::new(s.seed, 8);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let w: Vec<f64> = (0..3).map(|_| 0.01 + rng.uniform_open()).collect();
        let total: f64 = w.iter().sum();
        let p: Vec<f64> = w.iter().map(|v| v / total).collect();
        let theta = logits_for(&p).expect("interior");
        let gap = match qp_objective_spec(&theta, &spec) {
            Ok(obj) => (exact_expectation(&theta, &obj).expect("arity") - spec.value(&theta.probs())).abs(),
            Err(_) => f64::INFINITY,
        };
        worst = worst.max(gap);
    }
    at_most("reformulation_identity", worst, 1e-12, "max |E[(D-c)ᵀA(D-c)] - (p-c)ᵀQ(p-c)| over 100 points")
}

fn exact_gradient_fd(s: &Settings) -> CheckResult {
    let mut rng = RngStream::new(s.seed, 9);
    let mut worst = 0.0f64;
    for trial in 0..50 {
        let n = 2 + trial % 4;
        let obj = ObjectiveSpec::new(Quadratic::random(n, &mut rng)).expect("valid gradient");
        let theta = random_vector(&mut rng, n, 1.0);
        let g = exact_gradient(&Logits::new(theta.clone()).expect("finite"), &obj).expect("small");
        let fd = central_difference(|t| exact_expectation(&Logits::new(t.to_vec()).expect("finite"), &obj).expect("small"), &theta, 1e-6);
        let scale = g.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        worst = worst.max(g.iter().zip(&fd).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())) / scale);
    }
    at_most("exact_gradient_fd", worst, 1e-6, "enumeration gradient vs central differences, 50 objectives")
}

fn constant_objective_zero(s: &Settings) -> CheckResult {
    let theta = Logits::new(vec![0.3, -0.7, 1.2]).expect("finite");
    let obj = ObjectiveSpec::new(Quadratic::constant(3, 2.5)).expect("valid");
    let mut worst = 0.0f64;
    for &tau in &s.taus {
        for r in 0..200 {
            let mut rng = RngStream::new(s.seed, 10_000 + r);
            let draws = [
                estimate_gs(&mut rng, &theta, tau, &obj),
                estimate_st(&mut rng, &theta, tau, &obj),
                estimate_stgs(&mut rng, &theta, tau, &obj),
                estimate_grmc(&mut rng, &theta, tau, &obj, 10),
            ];
            for e in draws {
                let e = e.expect("valid inputs");
                worst = worst.max(e.values.iter().fold(0.0f64, |m, v| m.max(v.abs())));
            }
        }
    }
    at_most("constant_objective_zero", worst, 0.0, "largest entry of GS/ST/ST-GS/GR-MC estimates on a constant")
}

fn single_evaluation(s: &Settings) -> CheckResult {
    let theta = Logits::new(vec![0.3, -0.7, 1.2]).expect("finite");
    let (counting, counts) = Counting::new(Quadratic::random(3, &mut RngStream::new(s.seed, 11)));
    let obj = ObjectiveSpec::new(counting).expect("valid");
    let tau = s.taus[0];
    let mut bad = 0u32;
    let mut rng = RngStream::new(s.seed, 12);
    let mut expect = |calls: (usize, usize), counts: &grk_core::objective::CallCounts| {
        if (counts.evals(), counts.grads()) != calls {
            bad += 1;
        }
        counts.reset();
    };
    counts.reset();
    for k in [1, 10, 1000] {
        estimate_grmc(&mut rng, &theta, tau, &obj, k).expect("valid");
        expect((1, 1), &counts);
    }
    estimate_st(&mut rng, &theta, tau, &obj).expect("valid");
    expect((1, 1), &counts);
    estimate_stgs(&mut rng, &theta, tau, &obj).expect("valid");
    expect((1, 1), &counts);
    estimate_reinforce(&mut rng, &theta, &obj, None).expect("valid");
    expect((1, 0), &counts);
    at_most("single_evaluation", f64::from(bad), 0.0, "estimators whose eval/grad call counts differ from one evaluation")
}

fn mse_identity(s: &Settings) -> CheckResult {
    let theta = Logits::new(vec![0.3, -0.7, 1.2]).expect("finite");
    let obj = ObjectiveSpec::new(Quadratic::random(3, &mut RngStream::new(s.seed, 13))).expect("valid");
    let reference = exact_gradient(&theta, &obj).expect("small");
    let mut worst = 0.0f64;
    for &tau in &s.taus {
        let st = measure_stats(|rng| Ok(estimate_stgs(rng, &theta, tau, &obj)?.values), &reference, s.replicates.max(2), s.seed)
            .expect("finite estimates");
        let gap = (st.mse - st.cov_trace - st.bias_norm * st.bias_norm).abs();
        worst = worst.max(if st.mse > 0.0 { gap / st.mse } else { gap });
    }
    at_most("mse_identity", worst, 1e-10, "|MSE - trace - ‖bias‖²| / MSE for ST-GS")
}

fn reinforce_unbiased(s: &Settings) -> CheckResult {
    let theta = Logits::new(vec![0.3, -0.7, 1.2]).expect("finite");
    let obj = ObjectiveSpec::new(Quadratic::random(3, &mut RngStream::new(s.seed, 14))).expect("valid");
    let reference = exact_gradient(&theta, &obj).expect("small");
    let st = measure_stats(|rng| Ok(estimate_reinforce(rng, &theta, &obj, None)?.values), &reference, s.replicates.max(2), s.seed)
        .expect("finite estimates");
    at_most("reinforce_unbiased", st.mahalanobis_sq(&reference).sqrt(), 4.0, "Mahalanobis distance of the mean from the exact gradient")
}

fn grmc_k1_matches_stgs(s: &Settings) -> CheckResult {
    let theta = Logits::new(vec![0.3, -0.7, 1.2]).expect("finite");
    let obj = ObjectiveSpec::new(Quadratic::random(3, &mut RngStream::new(s.seed, 15))).expect("valid");
    let reference = exact_gradient(&theta, &obj).expect("small");
    let tau = s.taus[0];
    let a = measure_stats(|rng| Ok(estimate_stgs(rng, &theta, tau, &obj)?.values), &reference, s.replicates.max(2), s.seed)
        .expect("finite estimates");
    let b = measure_stats(
        |rng| Ok(estimate_grmc(rng, &theta, tau, &obj, 1)?.values),
        &reference,
        s.replicates.max(2),
        grk_core::rng::derive_seed(s.seed, 15),
    )
    .expect("finite estimates");
    let z_trace = (a.cov_trace - b.cov_trace).abs() / (a.cov_trace_se().powi(2) + b.cov_trace_se().powi(2)).sqrt();
    let z_mean = (0..3)
        .map(|i| (a.mean[i] - b.mean[i]).abs() / ((a.mean_radius[i] / 4.0).powi(2) + (b.mean_radius[i] / 4.0).powi(2)).sqrt())
        .fold(0.0, f64::max);
    at_most("grmc_k1_matches_stgs", z_trace.max(z_mean), 4.0, "two-sample z-scores of means and covariance traces")
}

fn grmc_improves_on_stgs(s: &Settings) -> CheckResult {
    let theta = Logits::new(vec![0.3, -0.7, 1.2]).expect("finite");
    let obj = ObjectiveSpec::new(Quadratic::random(3, &mut RngStream::new(s.seed, 16))).expect("valid");
    let reference = exact_gradient(&theta, &obj).expect("small");
    let mut worst = f64::NEG_INFINITY;
    for &tau in &s.taus {
        let paired = measure_paired(
            |rng| Ok(estimate_grmc(rng, &theta, tau, &obj, 10)?.values),
            |rng| Ok(estimate_stgs(rng, &theta, tau, &obj)?.values),
            &reference,
            (s.replicates / 10).max(2),
            s.seed,
        )
        .expect("finite estimates");
        worst = worst.max(paired.mse_diff - paired.mse_diff_radius);
    }
    at_most("grmc_improves_on_stgs", worst, 0.0, "MSE(GR-MC10) - MSE(ST-GS) minus four paired standard errors")
}

pub fn run_checks(seed: u64, replicates: u64, taus: Vec<Temperature>, jacobian_tolerance: f64) -> Vec<CheckResult> {
    let s = Settings { seed, replicates, taus, jacobian_tolerance };
    let suite: [fn(&Settings) -> CheckResult; 16] = [
        softmax_simplex,
        softmax_overflow,
        jacobian_fd,
        jacobian_structure,
        gumbel_moments,
        gumbel_max_marginal,
        posterior_argmax,
        posterior_law,
        reformulation_identity,
        exact_gradient_fd,
        constant_objective_zero,
        single_evaluation,
        mse_identity,
        reinforce_unbiased,
        grmc_k1_matches_stgs,
        grmc_improves_on_stgs,
    ];
    suite.iter().map(|check| check(&s)).collect()
}

pub fn run(ctx: &Context) -> Result<(), CliError> {
    let (a, f) = (&ctx.args, &ctx.config.check);
    let taus = temperatures(&pick(&a.tau, &f.tau, vec![0.1, 0.5, 1.0]))?;
    let replicates = pick(&a.replicates, &f.replicates, 100_000);
    validate_positive("replicates", replicates)?;
    let jacobian_tolerance = f.jacobian_tolerance.unwrap_or(1e-6);
    if !(jacobian_tolerance >= 0.0) {
        return Err(CliError::Usage("jacobian_tolerance must be nonnegative".into()));
    }
    let checks = run_checks(ctx.seed, replicates, taus, jacobian_tolerance);
    let failed: Vec<String> = checks.iter().filter(|c| !c.passed).map(|c| c.name.to_string()).collect();
    let report = Report { version: 1, seed: ctx.seed, replicates, passed: failed.is_empty(), checks };
    emit(ctx.out.as_deref(), &json_string(&report))?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::CheckFailed(failed))
    }
}
