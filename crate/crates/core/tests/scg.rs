mod common;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use common::{fd_gradient, joint_outcomes, one_hot, softmax, z_value};
use grk_core::estimators::estimate_stgs;
use grk_core::objective::Quadratic;
use grk_core::oracle::{measure_paired, measure_stats};
use grk_core::scg::*;
use grk_core::{EstimatorStats, Logits, ObjectiveSpec, RngStream, Temperature};

fn logits(v: &[f64]) -> Logits {
    Logits::new(v.to_vec()).unwrap()
}

fn tau(t: f64) -> Temperature {
    Temperature::new(t).unwrap()
}

fn random_chain(arities: &[usize], seed: u64) -> ChainObjectiveSpec {
    let total = arities.iter().sum();
    let q = Quadratic::random(total, &mut RngStream::new(seed, 0));
    ChainObjectiveSpec::new(FlatChain::new(q, arities.to_vec()).unwrap()).unwrap()
}

fn random_link(n_in: usize, n_out: usize, seed: u64) -> LinkSpec {
    LinkSpec::new(AffineLink::random(n_in, n_out, 1.0, &mut RngStream::new(seed, 0))).unwrap()
}

fn at_vertices(obj: &ChainObjectiveSpec, outcome: &[usize]) -> f64 {
    let xs: Vec<Vec<f64>> = outcome.iter().zip(obj.arities()).map(|(&i, &n)| one_hot(i, n)).collect();
    obj.eval(&xs)
}

/// `E[f]` for independent nodes, enumerated.
fn parallel_expectation(thetas: &[Vec<f64>], obj: &ChainObjectiveSpec) -> f64 {
    let probs: Vec<Vec<f64>> = thetas.iter().map(|t| softmax(t)).collect();
    joint_outcomes(obj.arities())
        .iter()
        .map(|o| o.iter().enumerate().map(|(j, &i)| probs[j][i]).product::<f64>() * at_vertices(obj, o))
        .sum()
}

/// `E[f]` for a chain with `θ^{j+1} = h_j(D^j)`, enumerated.
fn sequential_expectation(theta1: &[f64], links: &[LinkSpec], obj: &ChainObjectiveSpec) -> f64 {
    let arities = obj.arities().to_vec();
    joint_outcomes(&arities)
        .iter()
        .map(|o| {
            let mut prob = softmax(theta1)[o[0]];
            for j in 1..o.len() {
                let theta = links[j - 1].eval(&one_hot(o[j - 1], arities[j - 1]));
                prob *= softmax(&theta)[o[j]];
            }
            prob * at_vertices(obj, o)
        })
        .sum()
}

fn parallel_truth(thetas: &[Vec<f64>], obj: &ChainObjectiveSpec) -> Vec<f64> {
    let flat: Vec<f64> = thetas.concat();
    let split = |x: &[f64]| {
        let mut out = Vec::new();
        let mut at = 0;
        for t in thetas {
            out.push(x[at..at + t.len()].to_vec());
            at += t.len();
        }
        out
    };
    fd_gradient(|x| parallel_expectation(&split(x), obj), &flat, 1e-5)
}

fn parallel_flat(rng: &mut RngStream, thetas: &[Logits], obj: &ChainObjectiveSpec, mode: SurrogateMode) -> grk_core::Result<Vec<f64>> {
    let g = forward_parallel(rng, thetas, obj, mode)?;
    Ok(backward_parallel(&g)?.concat())
}

fn theta1_grad(rng: &mut RngStream, theta1: &Logits, links: &[LinkSpec], obj: &ChainObjectiveSpec, mode: SurrogateMode) -> grk_core::Result<Vec<f64>> {
    let g = forward_sequential(rng, theta1, links, obj, mode)?;
    Ok(backward_sequential(&g)?.theta1)
}

#[test]
fn parallel_reinforce_matches_joint_enumeration() {
    let raw = vec![vec![0.4, -0.2], vec![-0.9, 0.3], vec![0.0, 1.1]];
    let thetas: Vec<Logits> = raw.iter().map(|t| logits(t)).collect();
    let obj = random_chain(&[2, 2, 2], 1);
    let truth = parallel_truth(&raw, &obj);
    let st = measure_stats(|r| parallel_flat(r, &thetas, &obj, SurrogateMode::Reinforce), &truth, 1_000_000, 2).unwrap();
    assert!(st.mahalanobis_sq(&truth) < 36.0, "d² = {}", st.mahalanobis_sq(&truth));
    for (i, b) in st.bias.iter().enumerate() {
        assert!(b.abs() <= st.mean_radius[i], "coordinate {i}");
    }
}

#[test]
fn parallel_reinforce_mixed_arities() {
    let raw = vec![vec![0.3, -0.7, 1.2], vec![0.5, -0.5]];
    let thetas: Vec<Logits> = raw.iter().map(|t| logits(t)).collect();
    let obj = random_chain(&[3, 2], 3);
    let truth = parallel_truth(&raw, &obj);
    let st = measure_stats(|r| parallel_flat(r, &thetas, &obj, SurrogateMode::Reinforce), &truth, 1_000_000, 4).unwrap();
    for (i, b) in st.bias.iter().enumerate() {
        assert!(b.abs() <= st.mean_radius[i], "coordinate {i}");
    }
}

#[test]
fn separable_objective_decouples_node_gradients_under_st() {
    let parts = vec![
        ObjectiveSpec::new(Quadratic::random(2, &mut RngStream::new(5, 0))).unwrap(),
        ObjectiveSpec::new(Quadratic::random(2, &mut RngStream::new(6, 0))).unwrap(),
    ];
    let obj = ChainObjectiveSpec::new(Separable::new(parts)).unwrap();
    let thetas = [logits(&[0.2, -0.4]), logits(&[1.0, 0.1])];
    let mut by_first: [Option<Vec<f64>>; 2] = [None, None];
    let mut second_seen = [[false; 2]; 2];
    for s in 0..400 {
        let g = forward_parallel(&mut RngStream::new(7, s), &thetas, &obj, SurrogateMode::St(tau(0.5))).unwrap();
        let grads = backward_parallel(&g).unwrap();
        let (d1, d2) = (g.nodes[0].sample.index(), g.nodes[1].sample.index());
        second_seen[d1][d2] = true;
        match &by_first[d1] {
            Some(prev) => assert_eq!(prev, &grads[0]),
            None => by_first[d1] = Some(grads[0].clone()),
        }
    }
    assert!(second_seen.iter().flatten().all(|s| *s), "every joint outcome should occur");
}

#[test]
fn constant_objective_zeroes_every_gradient() {
    let obj = ChainObjectiveSpec::new(FlatChain::new(Quadratic::constant(5, 3.0), vec![2, 3]).unwrap()).unwrap();
    let thetas = [logits(&[0.2, -0.4]), logits(&[1.0, 0.1, -2.0])];
    let link = LinkSpec::new(AffineLink::random(2, 3, 1.0, &mut RngStream::new(8, 0))).unwrap();
    for mode in [SurrogateMode::St(tau(0.5)), SurrogateMode::StGs(tau(0.5)), SurrogateMode::GrMc(tau(0.5), 20)] {
        for s in 0..100 {
            let g = forward_parallel(&mut RngStream::new(9, s), &thetas, &obj, mode).unwrap();
            assert!(backward_parallel(&g).unwrap().concat().iter().all(|v| *v == 0.0));
            let g = forward_sequential(&mut RngStream::new(9, s), &thetas[0], std::slice::from_ref(&link), &obj, mode).unwrap();
            let b = backward_sequential(&g).unwrap();
            assert!(b.logit_grads.concat().iter().all(|v| *v == 0.0));
        }
    }
}

fn node_stats(mode: SurrogateMode, thetas: &[Logits], obj: &ChainObjectiveSpec, truth: &[f64], node: std::ops::Range<usize>, seed: u64) -> EstimatorStats {
    let pick = |v: Vec<f64>| v[node.clone()].to_vec();
    measure_stats(|r| Ok(pick(parallel_flat(r, thetas, obj, mode)?)), &truth[node.clone()], 200_000, seed).unwrap()
}

#[test]
fn grmc1_matches_stgs_per_node() {
    let raw = vec![vec![0.4, -0.2], vec![-0.9, 0.3, 0.5]];
    let thetas: Vec<Logits> = raw.iter().map(|t| logits(t)).collect();
    let obj = random_chain(&[2, 3], 10);
    let truth = parallel_truth(&raw, &obj);
    for (node, range) in [0..2, 2..5].into_iter().enumerate() {
        let a = node_stats(SurrogateMode::GrMc(tau(0.5), 1), &thetas, &obj, &truth, range.clone(), 11);
        let b = node_stats(SurrogateMode::StGs(tau(0.5)), &thetas, &obj, &truth, range, 12);
        for i in 0..a.mean.len() {
            let z = z_value(a.mean[i] - b.mean[i], a.mean_radius[i] / 4.0, b.mean_radius[i] / 4.0);
            assert!(z < 4.0, "node {node} coordinate {i}: z = {z}");
        }
        let z = z_value(a.cov_trace - b.cov_trace, a.cov_trace_se(), b.cov_trace_se());
        assert!(z < 4.0, "node {node} traces {} vs {}", a.cov_trace, b.cov_trace);
    }
}

#[test]
fn grmc100_per_node_trace_does_not_exceed_stgs() {
    let raw = vec![vec![0.4, -0.2], vec![-0.9, 0.3]];
    let thetas: Vec<Logits> = raw.iter().map(|t| logits(t)).collect();
    let obj = random_chain(&[2, 2], 13);
    let truth = parallel_truth(&raw, &obj);
    for node in 0..2 {
        let pick = |v: Vec<f64>| v[2 * node..2 * node + 2].to_vec();
        let p = measure_paired(
            |r| Ok(pick(parallel_flat(r, &thetas, &obj, SurrogateMode::GrMc(tau(0.5), 100))?)),
            |r| Ok(pick(parallel_flat(r, &thetas, &obj, SurrogateMode::StGs(tau(0.5)))?)),
            &truth[2 * node..2 * node + 2],
            100_000,
            14,
        )
        .unwrap();
        let slack = 4.0 * (p.first.cov_trace_se().powi(2) + p.second.cov_trace_se().powi(2)).sqrt();
        assert!(p.first.cov_trace <= p.second.cov_trace + slack, "node {node}");
        assert!(p.first_mse_not_worse(), "node {node}");
    }
}

#[test]
fn zero_link_gives_uniform_downstream_nodes() {
    let obj = random_chain(&[2, 2], 15);
    let link = LinkSpec::new(AffineLink::constant(2, vec![0.0, 0.0])).unwrap();
    let theta1 = logits(&[2.0, -1.0]);
    let n = 200_000;
    let mut hits = 0;
    for s in 0..n {
        let g = forward_sequential(&mut RngStream::new(16, s), &theta1, std::slice::from_ref(&link), &obj, SurrogateMode::Reinforce).unwrap();
        assert_eq!(g.nodes[1].logits.as_slice(), &[0.0, 0.0]);
        hits += g.nodes[1].sample.index();
    }
    let freq = hits as f64 / n as f64;
    assert!((freq - 0.5).abs() < 4.0 * (0.25 / n as f64).sqrt());
}

#[test]
fn sequential_reinforce_matches_four_outcome_enumeration() {
    let obj = random_chain(&[2, 2], 17);
    let links = vec![random_link(2, 2, 18)];
    let theta1 = vec![0.3, -0.5];
    let truth = fd_gradient(|t| sequential_expectation(t, &links, &obj), &theta1, 1e-5);
    let th = logits(&theta1);
    let st = measure_stats(|r| theta1_grad(r, &th, &links, &obj, SurrogateMode::Reinforce), &truth, 1_000_000, 19).unwrap();
    assert!(st.mahalanobis_sq(&truth) < 16.0, "d² = {}", st.mahalanobis_sq(&truth));
}

#[test]
fn sequential_reinforce_three_categories() {
    let obj = random_chain(&[3, 3], 20);
    let links = vec![random_link(3, 3, 21)];
    let theta1 = vec![0.3, -0.5, 0.8];
    let truth = fd_gradient(|t| sequential_expectation(t, &links, &obj), &theta1, 1e-5);
    let th = logits(&theta1);
    let st = measure_stats(|r| theta1_grad(r, &th, &links, &obj, SurrogateMode::Reinforce), &truth, 1_000_000, 22).unwrap();
    assert!(st.mahalanobis_sq(&truth) < 16.0, "d² = {}", st.mahalanobis_sq(&truth));
}

#[test]
fn sequential_single_node_is_the_single_variable_estimator() {
    let q = Quadratic::random(3, &mut RngStream::new(23, 0));
    let single = ObjectiveSpec::new(q.clone()).unwrap();
    let chain = ChainObjectiveSpec::new(FlatChain::new(q, vec![3]).unwrap()).unwrap();
    let theta = logits(&[0.3, -0.7, 1.2]);
    for s in 0..200 {
        let rng = RngStream::new(24, s);
        let a = estimate_stgs(&mut rng.clone(), &theta, tau(0.5), &single).unwrap().values;
        let b = theta1_grad(&mut rng.clone(), &theta, &[], &chain, SurrogateMode::StGs(tau(0.5))).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn sequential_grmc1000_theta1_mse_not_worse_than_stgs() {
    let obj = random_chain(&[2, 2], 25);
    let links = vec![random_link(2, 2, 26)];
    let theta1 = vec![0.3, -0.5];
    let truth = fd_gradient(|t| sequential_expectation(t, &links, &obj), &theta1, 1e-5);
    let th = logits(&theta1);
    let p = measure_paired(
        |r| theta1_grad(r, &th, &links, &obj, SurrogateMode::GrMc(tau(0.5), 1000)),
        |r| theta1_grad(r, &th, &links, &obj, SurrogateMode::StGs(tau(0.5))),
        &truth,
        100_000,
        27,
    )
    .unwrap();
    assert!(p.first_mse_not_worse(), "{} vs {}", p.first.mse, p.second.mse);
}

#[test]
fn input_free_links_reproduce_the_parallel_graph() {
    let obj = random_chain(&[2, 3], 28);
    let theta2 = vec![0.6, -0.1, -0.8];
    let link = LinkSpec::new(AffineLink::constant(2, theta2.clone())).unwrap();
    let theta1 = logits(&[0.2, 0.9]);
    let thetas = [theta1.clone(), logits(&theta2)];
    for mode in [SurrogateMode::Reinforce, SurrogateMode::St(tau(0.5)), SurrogateMode::StGs(tau(0.5)), SurrogateMode::GrMc(tau(0.5), 10)] {
        for s in 0..200 {
            let rng = RngStream::new(29, s);
            let a = backward_parallel(&forward_parallel(&mut rng.clone(), &thetas, &obj, mode).unwrap()).unwrap();
            let b = backward_sequential(&forward_sequential(&mut rng.clone(), &theta1, std::slice::from_ref(&link), &obj, mode).unwrap())
                .unwrap();
            assert_eq!(a, b.logit_grads, "{mode:?}");
        }
    }
}

struct CountingChain {
    inner: ChainObjectiveSpec,
    evals: Arc<AtomicUsize>,
}

impl ChainObjective for CountingChain {
    fn arities(&self) -> Vec<usize> {
        self.inner.arities().to_vec()
    }
    fn eval(&self, xs: &[Vec<f64>]) -> f64 {
        self.evals.fetch_add(1, Ordering::Relaxed);
        self.inner.eval(xs)
    }
    fn partials(&self, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        self.inner.partials(xs)
    }
}

#[test]
fn forward_passes_evaluate_the_objective_once() {
    let evals = Arc::new(AtomicUsize::new(0));
    let obj = ChainObjectiveSpec::new(CountingChain { inner: random_chain(&[2, 2, 2], 30), evals: evals.clone() }).unwrap();
    let thetas = [logits(&[0.1, 0.2]), logits(&[-0.3, 0.4]), logits(&[0.5, -0.6])];
    let links = vec![random_link(2, 2, 31), random_link(2, 2, 32)];
    let modes = [
        SurrogateMode::Reinforce,
        SurrogateMode::Gs(tau(0.5)),
        SurrogateMode::St(tau(0.5)),
        SurrogateMode::StGs(tau(0.5)),
        SurrogateMode::GrMc(tau(0.5), 50),
    ];
    for mode in modes {
        evals.store(0, Ordering::Relaxed);
        let g = forward_parallel(&mut RngStream::new(33, 0), &thetas, &obj, mode).unwrap();
        backward_parallel(&g).unwrap();
        assert_eq!(evals.load(Ordering::Relaxed), 1, "{mode:?}");
        evals.store(0, Ordering::Relaxed);
        let g = forward_sequential(&mut RngStream::new(33, 1), &thetas[0], &links, &obj, mode).unwrap();
        backward_sequential(&g).unwrap();
        assert_eq!(evals.load(Ordering::Relaxed), 1, "{mode:?}");
    }
}

#[test]
fn starred_values_are_frozen_in_backward() {
    // Rewriting the realized logits after the fact must not change backward:
    // only the recorded surrogate factors enter it.
    let obj = random_chain(&[2, 2], 34);
    let links = vec![random_link(2, 2, 35)];
    let theta1 = logits(&[0.3, -0.5]);
    let g = forward_sequential(&mut RngStream::new(36, 0), &theta1, &links, &obj, SurrogateMode::StGs(tau(0.5))).unwrap();
    let before = backward_sequential(&g).unwrap();
    let mut tampered = g.clone();
    for node in &mut tampered.nodes {
        node.logits = logits(&[5.0, -5.0]);
        node.perturbed.values = vec![9.0, 9.5];
    }
    assert_eq!(backward_sequential(&tampered).unwrap(), before);
    tampered.partials = Some(StopGradient::new(vec![vec![0.0; 2]; 2]));
    let zero = backward_sequential(&tampered).unwrap();
    assert!(zero.theta1.iter().all(|v| *v == 0.0));
}
