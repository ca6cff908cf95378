//! Ground truth by enumeration, high-sample GR references, and the
//! replicate measurement protocol.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::estimators::estimate_grmc_minibatched;
use crate::gumbel::{JacobianMean, Logits, OneHotSample, PosteriorSoftmaxSampler};
use crate::linalg::Matrix;
use crate::objective::ObjectiveSpec;
use crate::rng::RngStream;
use crate::scg::{ChainObjectiveSpec, LinkSpec};
use crate::softmax::Temperature;
use crate::stats::{EstimatorStats, ScalarStats, VectorStats};

/// Largest number of joint outcomes the enumeration oracles will visit.
pub const ENUMERATION_LIMIT: u128 = 1 << 20;

/// Replicates per parallel work unit. Fixed so that results do not depend on
/// the number of threads.
const CHUNK: u64 = 512;

fn guard(outcomes: u128) -> Result<()> {
    if outcomes > ENUMERATION_LIMIT {
        return Err(Error::Capacity { outcomes, limit: ENUMERATION_LIMIT });
    }
    Ok(())
}

fn check_arity(theta: &Logits, obj: &ObjectiveSpec) -> Result<()> {
    if obj.arity() != theta.len() {
        return Err(Error::Dimension { expected: theta.len(), got: obj.arity() });
    }
    Ok(())
}

/// `E[f(D)]` by summing over all `n` vertices.
pub fn exact_expectation(theta: &Logits, obj: &ObjectiveSpec) -> Result<f64> {
    check_arity(theta, obj)?;
    guard(theta.len() as u128)?;
    let p = theta.probs();
    Ok(OneHotSample::all(theta.len()).map(|d| p[d.index()] * obj.eval(&d.to_vec())).sum())
}

/// `∇_θ E[f(D)] = Σ_d f(d) p(d) (d - p)`.
pub fn exact_gradient(theta: &Logits, obj: &ObjectiveSpec) -> Result<Vec<f64>> {
    check_arity(theta, obj)?;
    guard(theta.len() as u128)?;
    let p = theta.probs();
    let f = obj.vertex_values();
    // p_i (f_i - pᵀf) written as p_i Σ_j p_j (f_i - f_j), which stays exactly
    // zero for constant f even when Σp rounds away from 1.
    Ok(p.iter().zip(&f).map(|(pi, fi)| pi * p.iter().zip(&f).map(|(pj, fj)| pj * (fi - fj)).sum::<f64>()).collect())
}

/// Visits every joint outcome `(d_1, …, d_m)`.
fn for_each_joint(arities: &[usize], mut visit: impl FnMut(&[usize])) {
    let mut idx = vec![0usize; arities.len()];
    loop {
        visit(&idx);
        let mut pos = 0;
        loop {
            if pos == idx.len() {
                return;
            }
            idx[pos] += 1;
            if idx[pos] < arities[pos] {
                break;
            }
            idx[pos] = 0;
            pos += 1;
        }
    }
}

fn one_hot(i: usize, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}

/// Per-node gradients of `E[f(D¹, …, D^m)]` for independent nodes.
pub fn exact_gradient_parallel(thetas: &[Logits], obj: &ChainObjectiveSpec) -> Result<Vec<Vec<f64>>> {
    let arities: Vec<usize> = thetas.iter().map(Logits::len).collect();
    if arities != obj.arities() {
        return Err(Error::Dimension { expected: obj.nodes(), got: thetas.len() });
    }
    guard(arities.iter().map(|&n| n as u128).product())?;
    let probs: Vec<Vec<f64>> = thetas.iter().map(Logits::probs).collect();
    let mut grads: Vec<Vec<f64>> = arities.iter().map(|&n| vec![0.0; n]).collect();
    for_each_joint(&arities, |idx| {
        let xs: Vec<Vec<f64>> = idx.iter().zip(&arities).map(|(&i, &n)| one_hot(i, n)).collect();
        let weight: f64 = idx.iter().zip(&probs).map(|(&i, p)| p[i]).product::<f64>() * obj.eval(&xs);
        for (j, g) in grads.iter_mut().enumerate() {
            for (k, gk) in g.iter_mut().enumerate() {
                *gk += weight * (xs[j][k] - probs[j][k]);
            }
        }
    });
    Ok(grads)
}

/// Gradient of `E[f]` with respect to `θ¹` for a sequential chain.
pub fn exact_gradient_sequential(theta1: &Logits, links: &[LinkSpec], obj: &ChainObjectiveSpec) -> Result<Vec<f64>> {
    let arities = obj.arities().to_vec();
    if links.len() + 1 != arities.len() || theta1.len() != arities[0] {
        return Err(Error::Dimension { expected: arities.len(), got: links.len() + 1 });
    }
    guard(arities.iter().map(|&n| n as u128).product())?;
    let p1 = theta1.probs();
    let mut grad = vec![0.0; arities[0]];
    for_each_joint(&arities, |idx| {
        let xs: Vec<Vec<f64>> = idx.iter().zip(&arities).map(|(&i, &n)| one_hot(i, n)).collect();
        let mut prob = p1[idx[0]];
        for j in 1..arities.len() {
            let logits = links[j - 1].eval(&xs[j - 1]);
            let lse = crate::softmax::log_sum_exp(&logits);
            prob *= (logits[idx[j]] - lse).exp();
        }
        let weight = prob * obj.eval(&xs);
        for (k, g) in grad.iter_mut().enumerate() {
            *g += weight * (xs[0][k] - p1[k]);
        }
    });
    Ok(grad)
}

/// High-sample estimate of `E[∂softmax_τ(θ+G)/∂θ | D = d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrReference {
    pub mean: Matrix,
    /// Entrywise jackknife standard errors.
    pub std_err: Matrix,
    pub samples: u64,
}

const JACKKNIFE_BLOCKS: usize = 100;

/// Streams `k_ref` posterior Jacobians in blocks and reports the mean with a
/// delete-one-block jackknife standard error.
pub fn gr_reference(rng: &mut RngStream, theta: &Logits, tau: Temperature, d: OneHotSample, k_ref: usize) -> Result<GrReference> {
    if k_ref < 2 {
        return Err(Error::Domain("gr_reference needs k_ref >= 2".into()));
    }
    let n = theta.len();
    let blocks = JACKKNIFE_BLOCKS.min(k_ref);
    let mut block_acc = Vec::with_capacity(blocks);
    for b in 0..blocks {
        let size = k_ref / blocks + usize::from(b < k_ref % blocks);
        let mut acc = JacobianMean::new(n);
        crate::gumbel::accumulate_posterior_jacobians(rng, theta, d, tau, size, &mut acc)?;
        block_acc.push(acc);
    }
    let mut total = JacobianMean::new(n);
    block_acc.iter().for_each(|a| total.merge(a));
    let mean = total.mean(tau);
    let g = blocks as f64;
    let mut var = Matrix::zeros(n, n);
    for acc in &block_acc {
        let mut rest = total.clone();
        rest.subtract(acc);
        let loo = rest.mean(tau);
        for i in 0..n {
            for j in 0..n {
                let diff = loo[(i, j)] - mean[(i, j)];
                var[(i, j)] += diff * diff;
            }
        }
    }
    let std_err = Matrix::from_fn(n, n, |i, j| ((g - 1.0) / g * var[(i, j)]).sqrt());
    Ok(GrReference { mean, std_err, samples: k_ref as u64 })
}

fn check_replicates(n: u64) -> Result<()> {
    if n < 2 {
        return Err(Error::Domain(format!("need at least 2 replicates, got {n}")));
    }
    Ok(())
}

fn chunks(n_replicates: u64) -> Vec<(u64, u64)> {
    (0..n_replicates.div_ceil(CHUNK)).map(|c| (c * CHUNK, ((c + 1) * CHUNK).min(n_replicates))).collect()
}

fn poisoned(seed: u64, r: u64) -> Error {
    Error::PoisonedRun { seed, stream: r, replicate: r }
}

/// Runs `estimator` on replicates `0..n_replicates`; replicate `r` gets
/// `RngStream::new(seed, r)`. Chunks run on the current rayon pool and are
/// merged in order, so the result is independent of the thread count.
pub fn measure_stats<F>(estimator: F, reference: &[f64], n_replicates: u64, seed: u64) -> Result<EstimatorStats>
where
    F: Fn(&mut RngStream) -> Result<Vec<f64>> + Sync,
{
    check_replicates(n_replicates)?;
    let parts: Vec<Result<VectorStats>> = chunks(n_replicates)
        .into_par_iter()
        .map(|(lo, hi)| {
            let mut acc = VectorStats::new(reference.to_vec());
            for r in lo..hi {
                let mut rng = RngStream::new(seed, r);
                let x = estimator(&mut rng)?;
                if x.len() != reference.len() {
                    return Err(Error::Dimension { expected: reference.len(), got: x.len() });
                }
                if !x.iter().all(|v| v.is_finite()) {
                    return Err(poisoned(seed, r));
                }
                acc.push(&x);
            }
            Ok(acc)
        })
        .collect();
    let mut total = VectorStats::new(reference.to_vec());
    for part in parts {
        total.merge(&part?);
    }
    Ok(total.finish())
}

/// Two estimators measured on the same replicate streams, so estimators that
/// draw `D` first see identical outcomes.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedStats {
    pub first: EstimatorStats,
    pub second: EstimatorStats,
    /// Mean of `‖x₁ - r‖² - ‖x₂ - r‖²` over replicates.
    pub mse_diff: f64,
    /// Four standard errors of `mse_diff`.
    pub mse_diff_radius: f64,
}

impl PairedStats {
    /// Whether `mse(first) ≤ mse(second)` holds up to the four-sigma slack.
    pub fn first_mse_not_worse(&self) -> bool {
        self.mse_diff <= self.mse_diff_radius
    }
}

pub fn measure_paired<F, G>(first: F, second: G, reference: &[f64], n_replicates: u64, seed: u64) -> Result<PairedStats>
where
    F: Fn(&mut RngStream) -> Result<Vec<f64>> + Sync,
    G: Fn(&mut RngStream) -> Result<Vec<f64>> + Sync,
{
    check_replicates(n_replicates)?;
    let sq_err = |x: &[f64]| x.iter().zip(reference).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    type Part = (VectorStats, VectorStats, ScalarStats);
    let parts: Vec<Result<Part>> = chunks(n_replicates)
        .into_par_iter()
        .map(|(lo, hi)| {
            let mut a = VectorStats::new(reference.to_vec());
            let mut b = VectorStats::new(reference.to_vec());
            let mut diff = ScalarStats::default();
            for r in lo..hi {
                let x = first(&mut RngStream::new(seed, r))?;
                let y = second(&mut RngStream::new(seed, r))?;
                if x.len() != reference.len() || y.len() != reference.len() {
                    return Err(Error::Dimension { expected: reference.len(), got: x.len().max(y.len()) });
                }
                if !x.iter().chain(&y).all(|v| v.is_finite()) {
                    return Err(poisoned(seed, r));
                }
                a.push(&x);
                b.push(&y);
                diff.push(sq_err(&x) - sq_err(&y));
            }
            Ok((a, b, diff))
        })
        .collect();
    let mut a = VectorStats::new(reference.to_vec());
    let mut b = VectorStats::new(reference.to_vec());
    let mut diff = ScalarStats::default();
    for part in parts {
        let (pa, pb, pd) = part?;
        a.merge(&pa);
        b.merge(&pb);
        diff.merge(&pd);
    }
    Ok(PairedStats {
        first: a.finish(),
        second: b.finish(),
        mse_diff: diff.mean(),
        mse_diff_radius: 4.0 * diff.std_err(),
    })
}

/// Settings for [`decompose_variance`].
#[derive(Clone, Debug, PartialEq)]
pub struct DecompositionConfig {
    pub k_grid: Vec<usize>,
    pub b_grid: Vec<usize>,
    pub n_replicates: u64,
    /// Posterior draws per outcome for the within-outcome variance `a`.
    pub conditional_draws: usize,
    /// Posterior draws per outcome for the GR reference behind `c`.
    pub k_ref: usize,
    pub seed: u64,
}

impl Default for DecompositionConfig {
    fn default() -> Self {
        Self {
            k_grid: vec![1, 10, 100],
            b_grid: vec![1, 2, 4, 8],
            n_replicates: 100_000,
            conditional_draws: 1_000_000,
            k_ref: 1_000_000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecompositionCell {
    pub b: usize,
    pub k: usize,
    pub predicted: f64,
    pub measured: f64,
    pub measured_radius: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecompositionReport {
    /// `E[Var[ST-GS | D]]`.
    pub a: f64,
    /// `Var[GR]`.
    pub c: f64,
    /// Per-outcome `trace Var[ST-GS | D = d]`.
    pub a_by_outcome: Vec<f64>,
    /// Per-outcome `GR(d) = ∂f/∂D · E[J | D = d]`.
    pub gr_by_outcome: Vec<Vec<f64>>,
    pub grid: Vec<DecompositionCell>,
    pub max_rel_error: f64,
}

/// Splits the GR-MC variance into a within-outcome part `a` (shrinks with
/// `K`) and a between-outcome part `c`, then compares `a/(BK) + c/B` with
/// directly measured covariance traces of the minibatched estimator.
pub fn decompose_variance(
    theta: &Logits,
    tau: Temperature,
    obj: &ObjectiveSpec,
    config: &DecompositionConfig,
) -> Result<DecompositionReport> {
    check_arity(theta, obj)?;
    guard(theta.len() as u128)?;
    if config.k_grid.is_empty() || config.b_grid.is_empty() {
        return Err(Error::EmptyInput("decomposition grids must be nonempty"));
    }
    if config.k_grid.contains(&0) || config.b_grid.contains(&0) {
        return Err(Error::Domain("grid entries must be at least 1".into()));
    }
    if config.conditional_draws < 2 {
        return Err(Error::Domain("need at least 2 conditional draws".into()));
    }
    let n = theta.len();
    let p = theta.probs();
    let t = tau.value();
    let seed_a = crate::rng::derive_seed(config.seed, 0xa);
    let seed_c = crate::rng::derive_seed(config.seed, 0xc);

    let per_outcome: Vec<Result<(f64, Vec<f64>)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let d = OneHotSample::new(i, n)?;
            let g = obj.grad(&d.to_vec());
            let mut sampler = PosteriorSoftmaxSampler::new(theta, d, tau)?;
            let mut rng = RngStream::new(seed_a, i as u64);
            let mut acc = VectorStats::new(vec![0.0; n]);
            let mut s = vec![0.0; n];
            let mut v = vec![0.0; n];
            for _ in 0..config.conditional_draws {
                sampler.sample_into(&mut rng, &mut s);
                // J g = (s ∘ g - s (sᵀg)) / τ
                let sg: f64 = s.iter().zip(&g).map(|(a, b)| a * b).sum();
                for k in 0..n {
                    v[k] = s[k] * (g[k] - sg) / t;
                }
                acc.push(&v);
            }
            let a_d = acc.finish().cov_trace;
            let reference = gr_reference(&mut RngStream::new(seed_c, i as u64), theta, tau, d, config.k_ref)?;
            Ok((a_d, reference.mean.left_mul(&g)))
        })
        .collect();
    let mut a_by_outcome = Vec::with_capacity(n);
    let mut gr_by_outcome = Vec::with_capacity(n);
    for r in per_outcome {
        let (a_d, gr) = r?;
        a_by_outcome.push(a_d);
        gr_by_outcome.push(gr);
    }
    let a: f64 = p.iter().zip(&a_by_outcome).map(|(pi, ai)| pi * ai).sum();
    let gr_mean: Vec<f64> = (0..n).map(|k| p.iter().zip(&gr_by_outcome).map(|(pi, g)| pi * g[k]).sum()).collect();
    let c: f64 = p
        .iter()
        .zip(&gr_by_outcome)
        .map(|(pi, g)| pi * g.iter().zip(&gr_mean).map(|(x, m)| (x - m) * (x - m)).sum::<f64>())
        .sum();

    let reference = vec![0.0; n];
    let mut grid = Vec::new();
    for &b in &config.b_grid {
        for &k in &config.k_grid {
            let seed = crate::rng::derive_seed(config.seed, ((b as u64) << 32) | k as u64);
            let stats = measure_stats(
                |rng| Ok(estimate_grmc_minibatched(rng, theta, tau, obj, k, b)?.values),
                &reference,
                config.n_replicates,
                seed,
            )?;
            let predicted = a / (b * k) as f64 + c / b as f64;
            let measured = stats.cov_trace;
            let rel_error = if measured == 0.0 && predicted == 0.0 { 0.0 } else { (predicted - measured).abs() / measured };
            grid.push(DecompositionCell { b, k, predicted, measured, measured_radius: stats.cov_trace_radius, rel_error });
        }
    }
    let max_rel_error = grid.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    Ok(DecompositionReport { a, c, a_by_outcome, gr_by_outcome, grid, max_rel_error })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::{central_difference, Quadratic};

    #[test]
    fn exact_gradient_closed_form() {
        let theta = Logits::new(vec![0.0, 0.0]).unwrap();
        let obj = ObjectiveSpec::new(Quadratic::linear(vec![1.0, 0.0])).unwrap();
        assert_eq!(exact_gradient(&theta, &obj).unwrap(), vec![0.25, -0.25]);
        let constant = ObjectiveSpec::new(Quadratic::constant(2, 7.0)).unwrap();
        assert_eq!(exact_gradient(&theta, &constant).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn exact_gradient_matches_finite_differences() {
        let mut rng = RngStream::new(77, 0);
        for trial in 0..100 {
            let n = 2 + trial % 5;
            let obj = ObjectiveSpec::new(Quadratic::random(n, &mut rng)).unwrap();
            let theta: Vec<f64> = (0..n).map(|_| 2.0 * rng.uniform_open() - 1.0).collect();
            let g = exact_gradient(&Logits::new(theta.clone()).unwrap(), &obj).unwrap();
            let fd = central_difference(|t| exact_expectation(&Logits::new(t.to_vec()).unwrap(), &obj).unwrap(), &theta, 1e-6);
            let scale = g.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            let err = g.iter().zip(&fd).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())) / scale;
            assert!(err < 1e-6, "trial {trial}: {err}");
        }
    }

    #[test]
    fn parallel_enumeration_agrees_with_single_node() {
        let q = Quadratic::random(3, &mut RngStream::new(1, 1));
        let theta = Logits::new(vec![0.3, -0.7, 1.2]).unwrap();
        let single = exact_gradient(&theta, &ObjectiveSpec::new(q.clone()).unwrap()).unwrap();
        let chain = ChainObjectiveSpec::new(crate::scg::FlatChain::new(q, vec![3]).unwrap()).unwrap();
        let multi = exact_gradient_parallel(&[theta], &chain).unwrap();
        for (a, b) in single.iter().zip(&multi[0]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn sequential_enumeration_matches_finite_differences() {
        let mut rng = RngStream::new(3, 3);
        let link = LinkSpec::new(crate::scg::AffineLink::random(3, 2, 1.5, &mut rng)).unwrap();
        let chain = ChainObjectiveSpec::new(crate::scg::FlatChain::new(Quadratic::random(5, &mut rng), vec![3, 2]).unwrap()).unwrap();
        let theta = vec![0.4, -0.2, 0.1];
        let g = exact_gradient_sequential(&Logits::new(theta.clone()).unwrap(), std::slice::from_ref(&link), &chain).unwrap();
        let value = |t: &[f64]| {
            let t1 = Logits::new(t.to_vec()).unwrap();
            let p1 = t1.probs();
            let mut total = 0.0;
            for i in 0..3 {
                let d1 = one_hot(i, 3);
                let p2 = Logits::new(link.eval(&d1)).unwrap().probs();
                for k in 0..2 {
                    total += p1[i] * p2[k] * chain.eval(&[d1.clone(), one_hot(k, 2)]);
                }
            }
            total
        };
        let fd = central_difference(value, &theta, 1e-6);
        for (a, b) in g.iter().zip(&fd) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn capacity_guard() {
        let chain = ChainObjectiveSpec::new(crate::scg::FlatChain::new(Quadratic::constant(42, 0.0), vec![2; 21]).unwrap()).unwrap();
        let thetas = vec![Logits::new(vec![0.0, 0.0]).unwrap(); 21];
        assert!(matches!(exact_gradient_parallel(&thetas, &chain), Err(Error::Capacity { .. })));
    }

    #[test]
    fn measure_stats_of_constant_estimator() {
        let st = measure_stats(|_| Ok(vec![1.0, 2.0]), &[1.0, 2.0], 1000, 0).unwrap();
        assert_eq!((st.cov_trace, st.bias_norm, st.mse), (0.0, 0.0, 0.0));
        assert_eq!(st.count, 1000);
    }

    #[test]
    fn measure_stats_reports_poisoned_replicate() {
        let err = measure_stats(
            |rng| Ok(vec![if rng.stream() == 777 { f64::NAN } else { 0.0 }]),
            &[0.0],
            2000,
            42,
        )
        .unwrap_err();
        assert_eq!(err, Error::PoisonedRun { seed: 42, stream: 777, replicate: 777 });
    }

    #[test]
    fn measure_stats_independent_of_thread_count() {
        let run = |threads| {
            rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| {
                measure_stats(|rng| Ok(vec![rng.gumbel(), rng.exponential()]), &[0.5, 1.0], 10_000, 9).unwrap()
            })
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn gr_reference_at_high_temperature_is_flat() {
        let theta = Logits::new(vec![0.3, -0.2, 0.5]).unwrap();
        let tau = Temperature::new(1e3).unwrap();
        let d = OneHotSample::new(1, 3).unwrap();
        let r = gr_reference(&mut RngStream::new(0, 0), &theta, tau, d, 10_000).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let flat = (if i == j { 1.0 / 3.0 } else { 0.0 } - 1.0 / 9.0) / 1e3;
                assert!((r.mean[(i, j)] - flat).abs() < 1e-5, "{:?}", r.mean);
            }
        }
    }
}
