mod common;

use common::{fd_gradient, table_expectation, table_gradient, z_value};
use grk_core::estimators::{estimate_grmc, estimate_reinforce, estimate_stgs};
use grk_core::gumbel::sample_categorical_gumbel_max;
use grk_core::objective::Quadratic;
use grk_core::oracle::*;
use grk_core::softmax::tempered_softmax_jacobian;
use grk_core::stats::{ScalarStats, VectorStats};
use grk_core::{Logits, ObjectiveSpec, OneHotSample, RngStream, Temperature};
use proptest::prelude::*;

fn logits(v: &[f64]) -> Logits {
    Logits::new(v.to_vec()).unwrap()
}

fn tau(t: f64) -> Temperature {
    Temperature::new(t).unwrap()
}

fn random_table(n: usize, seed: u64) -> ObjectiveSpec {
    ObjectiveSpec::new(Quadratic::random(n, &mut RngStream::new(seed, 0))).unwrap()
}

#[test]
fn exact_gradient_examples() {
    let obj = ObjectiveSpec::new(Quadratic::linear(vec![1.0, 0.0])).unwrap();
    let g = exact_gradient(&logits(&[0.0, 0.0]), &obj).unwrap();
    assert!((g[0] - 0.25).abs() < 1e-15 && (g[1] + 0.25).abs() < 1e-15);
    let obj = ObjectiveSpec::new(Quadratic::constant(4, 3.0)).unwrap();
    assert!(exact_gradient(&logits(&[0.1, 2.0, -1.0, 0.0]), &obj).unwrap().iter().all(|v| *v == 0.0));
}

#[test]
fn exact_gradient_matches_differences_on_random_objectives() {
    let mut rng = RngStream::new(1, 0);
    for case in 0..100u64 {
        let n = 2 + (case % 6) as usize;
        let theta: Vec<f64> = (0..n).map(|_| 4.0 * (rng.uniform_open() - 0.5)).collect();
        let obj = random_table(n, 100 + case);
        let table = obj.vertex_values();
        let g = exact_gradient(&logits(&theta), &obj).unwrap();
        let fd = fd_gradient(|t| table_expectation(t, &table), &theta, 1e-6);
        let err = g.iter().zip(&fd).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let scale = g.iter().map(|v| v.abs()).fold(1.0, f64::max);
        assert!(err / scale < 1e-6, "case {case}: {err}");
    }
}

#[test]
fn gr_reference_is_flat_at_high_temperature() {
    let n = 3;
    let t = 1000.0;
    let theta = logits(&[0.3, -0.7, 1.2]);
    let r = gr_reference(&mut RngStream::new(2, 0), &theta, tau(t), OneHotSample::new(1, n).unwrap(), 100_000).unwrap();
    for i in 0..n {
        for j in 0..n {
            let want = (f64::from(u8::from(i == j)) / n as f64 - 1.0 / (n * n) as f64) / t;
            let slack = 6.0 * r.std_err[(i, j)] + 1e-3 / t;
            assert!((r.mean[(i, j)] - want).abs() < slack, "({i},{j}) {} vs {want}", r.mean[(i, j)]);
        }
    }
}

#[test]
fn gr_reference_runs_agree_within_jackknife_error() {
    let theta = logits(&[0.0, 0.0]);
    let d = OneHotSample::new(0, 2).unwrap();
    let a = gr_reference(&mut RngStream::new(3, 0), &theta, tau(1.0), d, 1_000_000).unwrap();
    let b = gr_reference(&mut RngStream::new(3, 1), &theta, tau(1.0), d, 1_000_000).unwrap();
    for i in 0..2 {
        for j in 0..2 {
            let z = z_value(a.mean[(i, j)] - b.mean[(i, j)], a.std_err[(i, j)], b.std_err[(i, j)]);
            assert!(z < 6.0, "({i},{j}) z = {z}");
        }
    }
}

#[test]
fn gr_reference_obeys_the_tower_rule() {
    let theta = logits(&[0.3, -0.7, 1.2]);
    let t = tau(0.5);
    let p = theta.probs();
    let mut tower = [0.0; 9];
    let mut tower_var = [0.0; 9];
    for i in 0..3 {
        let r = gr_reference(&mut RngStream::new(4, i as u64), &theta, t, OneHotSample::new(i, 3).unwrap(), 1_000_000).unwrap();
        for k in 0..9 {
            tower[k] += p[i] * r.mean.as_slice()[k];
            tower_var[k] += (p[i] * r.std_err.as_slice()[k]).powi(2);
        }
    }
    let mut direct = vec![ScalarStats::default(); 9];
    let mut rng = RngStream::new(5, 0);
    for _ in 0..1_000_000 {
        let (_, pert) = sample_categorical_gumbel_max(&mut rng, &theta);
        let j = tempered_softmax_jacobian(&pert.values, t);
        direct.iter_mut().zip(j.as_slice()).for_each(|(s, v)| s.push(*v));
    }
    for k in 0..9 {
        let z = z_value(tower[k] - direct[k].mean(), tower_var[k].sqrt(), direct[k].std_err());
        assert!(z < 4.0, "entry {k}: {} vs {} (z = {z})", tower[k], direct[k].mean());
    }
}

#[test]
fn stats_of_a_constant_estimator() {
    let v = vec![1.5, -2.0, 0.25];
    let st = measure_stats(|_| Ok(v.clone()), &v, 1000, 0).unwrap();
    assert_eq!((st.cov_trace, st.bias_norm, st.mse), (0.0, 0.0, 0.0));
}

fn normal(rng: &mut RngStream) -> f64 {
    let (u1, u2) = (rng.uniform_open(), rng.uniform_open());
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

#[test]
fn stats_of_gaussian_noise() {
    let reference = vec![0.5, -1.0, 2.0];
    let st = measure_stats(|rng| Ok(reference.iter().map(|r| r + normal(rng)).collect()), &reference, 400_000, 6).unwrap();
    assert!((st.cov_trace - 3.0).abs() < st.cov_trace_radius, "{}", st.cov_trace);
    assert!((st.mse - 3.0).abs() < st.mse_radius, "{}", st.mse);
}

#[test]
fn reinforce_bias_and_paired_mse_ordering() {
    let theta = logits(&[0.3, -0.7, 1.2]);
    let obj = random_table(3, 7);
    let truth = table_gradient(theta.as_slice(), &obj.vertex_values());
    let st = measure_stats(|r| Ok(estimate_reinforce(r, &theta, &obj, None)?.values), &truth, 1_000_000, 8).unwrap();
    assert!(st.mahalanobis_sq(&truth) < 16.0);
    let p = measure_paired(
        |r| Ok(estimate_grmc(r, &theta, tau(0.1), &obj, 100)?.values),
        |r| Ok(estimate_stgs(r, &theta, tau(0.1), &obj)?.values),
        &truth,
        100_000,
        9,
    )
    .unwrap();
    assert!(p.mse_diff < -p.mse_diff_radius, "diff {} radius {}", p.mse_diff, p.mse_diff_radius);
}

#[test]
fn paired_measurement_shares_outcomes() {
    let theta = logits(&[0.3, -0.7, 1.2]);
    let outcome = |r: &mut RngStream| Ok(sample_categorical_gumbel_max(r, &theta).0.to_vec());
    let p = measure_paired(outcome, outcome, &[0.0; 3], 10_000, 11).unwrap();
    assert_eq!(p.first, p.second);
    assert_eq!(p.mse_diff, 0.0);
}

#[test]
fn poisoned_replicates_are_reported() {
    let err = measure_stats(|r| Ok(vec![if r.stream() == 37 { f64::NAN } else { 0.0 }]), &[0.0], 100, 12).unwrap_err();
    assert_eq!(err, grk_core::Error::PoisonedRun { seed: 12, stream: 37, replicate: 37 });
}

fn small_decomposition(k_grid: Vec<usize>, b_grid: Vec<usize>) -> DecompositionConfig {
    DecompositionConfig { k_grid, b_grid, n_replicates: 100_000, conditional_draws: 400_000, k_ref: 400_000, seed: 13 }
}

#[test]
fn decomposition_at_one_sample_is_the_stgs_variance() {
    let theta = logits(&[0.3, -0.7, 1.2]);
    let obj = random_table(3, 14);
    let rep = decompose_variance(&theta, tau(0.5), &obj, &small_decomposition(vec![1], vec![1])).unwrap();
    let stgs = measure_stats(|r| Ok(estimate_stgs(r, &theta, tau(0.5), &obj)?.values), &[0.0; 3], 100_000, 15).unwrap();
    let rel = ((rep.a + rep.c) - stgs.cov_trace).abs() / stgs.cov_trace;
    assert!(rel < 0.05, "a + c = {} vs {}", rep.a + rep.c, stgs.cov_trace);
}

#[test]
fn decomposition_large_k_approaches_between_outcome_variance() {
    let theta = logits(&[0.3, -0.7, 1.2]);
    let obj = random_table(3, 16);
    let rep = decompose_variance(&theta, tau(0.5), &obj, &small_decomposition(vec![1000], vec![1])).unwrap();
    let cell = &rep.grid[0];
    assert!((cell.measured - rep.c).abs() <= rep.a / 1000.0 + cell.measured_radius, "{} vs c = {}", cell.measured, rep.c);
}

#[test]
fn decomposition_of_a_constant_is_zero() {
    let theta = logits(&[0.3, -0.7, 1.2]);
    let obj = ObjectiveSpec::new(Quadratic::constant(3, 2.0)).unwrap();
    let cfg = DecompositionConfig { n_replicates: 1000, conditional_draws: 1000, k_ref: 1000, ..DecompositionConfig::default() };
    let rep = decompose_variance(&theta, tau(0.5), &obj, &cfg).unwrap();
    assert_eq!((rep.a, rep.c), (0.0, 0.0));
    assert_eq!(rep.max_rel_error, 0.0);
}

#[test]
fn decomposition_predictions_decrease_in_k() {
    let theta = logits(&[0.3, -0.7, 1.2]);
    let obj = random_table(3, 17);
    let cfg = DecompositionConfig { n_replicates: 1000, conditional_draws: 10_000, k_ref: 10_000, ..DecompositionConfig::default() };
    let rep = decompose_variance(&theta, tau(0.5), &obj, &cfg).unwrap();
    assert!(rep.a >= 0.0 && rep.c >= 0.0);
    for b in [1, 2, 4, 8] {
        let preds: Vec<f64> = rep.grid.iter().filter(|c| c.b == b).map(|c| c.predicted).collect();
        assert_eq!(preds.len(), 3);
        assert!(preds.windows(2).all(|w| w[1] < w[0]));
        assert!(preds.iter().all(|p| *p > rep.c / b as f64));
    }
}

#[test]
fn capacity_guard_rejects_huge_chains() {
    use grk_core::scg::{ChainObjectiveSpec, FlatChain};
    let arities = vec![2; 21];
    let obj = ChainObjectiveSpec::new(FlatChain::new(Quadratic::constant(42, 1.0), arities).unwrap()).unwrap();
    let thetas = vec![logits(&[0.0, 0.0]); 21];
    assert!(matches!(exact_gradient_parallel(&thetas, &obj), Err(grk_core::Error::Capacity { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn mse_is_trace_plus_squared_bias(
        rows in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 3), 2..200),
        reference in prop::collection::vec(-1e3f64..1e3, 3),
    ) {
        let mut acc = VectorStats::new(reference.clone());
        rows.iter().for_each(|r| acc.push(r));
        let st = acc.finish();
        let sum = st.cov_trace + st.bias_norm * st.bias_norm;
        prop_assert!((st.mse - sum).abs() <= 1e-10 * st.mse.max(f64::MIN_POSITIVE));
    }

    #[test]
    fn measured_stats_satisfy_the_mse_identity(seed in any::<u64>(), t in 0.05f64..2.0) {
        let theta = logits(&[0.3, -0.7, 1.2]);
        let obj = random_table(3, seed % 1000);
        let truth = exact_gradient(&theta, &obj).unwrap();
        let st = measure_stats(|r| Ok(estimate_stgs(r, &theta, tau(t), &obj)?.values), &truth, 2000, seed).unwrap();
        prop_assert!((st.mse - (st.cov_trace + st.bias_norm.powi(2))).abs() <= 1e-10 * st.mse);
    }

    #[test]
    fn merge_order_does_not_matter(rows in prop::collection::vec(prop::collection::vec(-10f64..10.0, 2), 4..100), split in 1usize..3) {
        let cut = rows.len() * split / 3;
        let mut whole = VectorStats::new(vec![0.0; 2]);
        rows.iter().for_each(|r| whole.push(r));
        let mut a = VectorStats::new(vec![0.0; 2]);
        let mut b = VectorStats::new(vec![0.0; 2]);
        rows[..cut].iter().for_each(|r| a.push(r));
        rows[cut..].iter().for_each(|r| b.push(r));
        a.merge(&b);
        let (x, y) = (whole.finish(), a.finish());
        prop_assert!((x.cov_trace - y.cov_trace).abs() <= 1e-9 * (1.0 + x.cov_trace));
        for i in 0..2 {
            prop_assert!((x.mean[i] - y.mean[i]).abs() <= 1e-12 * (1.0 + x.mean[i].abs()));
        }
    }
}
