//! The simplex quadratic-program testbed.
//!
//! Minimizing `(p - c)ᵀ Q (p - c)` over the simplex is recast as minimizing
//! `E_{D ~ p}[(D - c)ᵀ A(p) (D - c)]`, where `A(p)` rescales `Q` entrywise by
//! the second moments of `D - c` so that both objectives agree for every
//! interior `p`.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::estimators::{estimate_reinforce, BaselineState, Estimator, EstimatorId};
use crate::gumbel::{Logits, OneHotSample};
use crate::linalg::Matrix;
use crate::objective::{Objective, ObjectiveSpec};
use crate::oracle::{exact_gradient, measure_stats};
use crate::rng::{derive_seed, RngStream};
use crate::softmax::{tempered_softmax_jacobian, Temperature};

#[derive(Clone, Debug, PartialEq)]
pub struct QpSpec {
    q: Matrix,
    c: Vec<f64>,
}

impl QpSpec {
    /// Checks that `q` is symmetric positive definite.
    pub fn new(q: Matrix, c: Vec<f64>) -> Result<Self> {
        let n = c.len();
        if n < 2 {
            return Err(Error::EmptyInput("QP needs n >= 2"));
        }
        if q.rows() != n || q.cols() != n {
            return Err(Error::Dimension { expected: n, got: q.rows() });
        }
        if q.max_abs_diff(&q.transpose()) > 1e-12 * q.max_abs().max(1.0) {
            return Err(Error::Domain("Q must be symmetric".into()));
        }
        if !q.is_finite() || !c.iter().all(|v| v.is_finite()) {
            return Err(Error::Domain("QP data must be finite".into()));
        }
        if to_dmatrix(&q).cholesky().is_none() {
            return Err(Error::Domain("Q must be positive definite".into()));
        }
        Ok(Self { q, c })
    }

    /// `Q_ij = exp(-2|i - j|)`, `c_i = 1/3`.
    pub fn standard(n: usize) -> Result<Self> {
        let q = Matrix::from_fn(n, n, |i, j| (-2.0 * (i as f64 - j as f64).abs()).exp());
        Self::new(q, vec![1.0 / 3.0; n])
    }

    pub fn n(&self) -> usize {
        self.c.len()
    }

    pub fn q(&self) -> &Matrix {
        &self.q
    }

    pub fn c(&self) -> &[f64] {
        &self.c
    }

    /// `(p - c)ᵀ Q (p - c)`.
    pub fn value(&self, p: &[f64]) -> f64 {
        let r: Vec<f64> = p.iter().zip(&self.c).map(|(a, b)| a - b).collect();
        self.q.quad_form(&r)
    }
}

fn to_dmatrix(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_fn(m.rows(), m.cols(), |i, j| m[(i, j)])
}

/// `E[(D_i - c_i)(D_j - c_j)]` under `D ~ p`.
fn second_moment(p: &[f64], c: &[f64], i: usize, j: usize) -> f64 {
    if i == j {
        p[i] - 2.0 * p[i] * c[i] + c[i] * c[i]
    } else {
        c[i] * c[j] - p[i] * c[j] - c[i] * p[j]
    }
}

/// The rescaled matrix `A(p)`. Fails on a vanishing denominator.
pub fn build_a_matrix(p: &[f64], spec: &QpSpec) -> Result<Matrix> {
    let n = spec.n();
    if p.len() != n {
        return Err(Error::Dimension { expected: n, got: p.len() });
    }
    let c = &spec.c;
    let mut a = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let m = second_moment(p, c, i, j);
            if m == 0.0 {
                return Err(Error::DegeneratePoint { i, j });
            }
            a[(i, j)] = (p[i] - c[i]) * (p[j] - c[j]) / m * spec.q[(i, j)];
        }
    }
    if !a.is_finite() {
        let (i, j) = (0..n * n).map(|k| (k / n, k % n)).find(|&(i, j)| !a[(i, j)].is_finite()).unwrap_or((0, 0));
        return Err(Error::DegeneratePoint { i, j });
    }
    Ok(a)
}

/// `f(x) = (x - c)ᵀ A (x - c)` for a fixed `A`.
#[derive(Clone, Debug)]
pub struct QpObjective {
    a: Matrix,
    c: Vec<f64>,
}

impl QpObjective {
    pub fn new(a: Matrix, c: Vec<f64>) -> Self {
        Self { a, c }
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }
}

impl Objective for QpObjective {
    fn arity(&self) -> usize {
        self.c.len()
    }

    fn eval(&self, x: &[f64]) -> f64 {
        let r: Vec<f64> = x.iter().zip(&self.c).map(|(a, b)| a - b).collect();
        self.a.quad_form(&r)
    }

    fn grad(&self, x: &[f64]) -> Vec<f64> {
        let r: Vec<f64> = x.iter().zip(&self.c).map(|(a, b)| a - b).collect();
        let ar = self.a.mul_vec(&r);
        let atr = self.a.left_mul(&r);
        ar.iter().zip(&atr).map(|(u, v)| u + v).collect()
    }
}

/// The stochastic objective at `p = softmax(θ)`, with `A(p)` held fixed.
pub fn qp_objective_spec(theta: &Logits, spec: &QpSpec) -> Result<ObjectiveSpec> {
    if theta.len() != spec.n() {
        return Err(Error::Dimension { expected: spec.n(), got: theta.len() });
    }
    let a = build_a_matrix(&theta.probs(), spec)?;
    ObjectiveSpec::new(QpObjective::new(a, spec.c.clone()))
}

/// `Σ_ij (d - c)_i (d - c)_j ∂A_ij/∂θ`: the part of the gradient that flows
/// through `A(softmax(θ))` rather than through the sampling distribution.
pub fn qp_direct_gradient(theta: &Logits, spec: &QpSpec, d: &[f64]) -> Result<Vec<f64>> {
    let n = spec.n();
    if theta.len() != n || d.len() != n {
        return Err(Error::Dimension { expected: n, got: theta.len().min(d.len()) });
    }
    let p = theta.probs();
    let c = &spec.c;
    let r: Vec<f64> = d.iter().zip(c).map(|(a, b)| a - b).collect();
    let mut grad_p = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            let m = second_moment(&p, c, i, j);
            if m == 0.0 {
                return Err(Error::DegeneratePoint { i, j });
            }
            let w = r[i] * r[j] * spec.q[(i, j)] / (m * m);
            if i == j {
                let u = p[i] - c[i];
                grad_p[i] += w * (2.0 * u * m - u * u * (1.0 - 2.0 * c[i]));
            } else {
                let (ui, uj) = (p[i] - c[i], p[j] - c[j]);
                grad_p[i] += w * (uj * m + ui * uj * c[j]);
                grad_p[j] += w * (ui * m + ui * uj * c[i]);
            }
        }
    }
    let jac = tempered_softmax_jacobian(theta.as_slice(), Temperature::new(1.0)?);
    Ok(jac.left_mul(&grad_p))
}

/// Barycentric grid `k / r` restricted to points with every coordinate at
/// least `margin`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimplexGrid {
    pub resolution: usize,
    pub margin: f64,
    pub points: Vec<Vec<f64>>,
}

impl SimplexGrid {
    pub fn new(n: usize, resolution: usize, margin: f64) -> Result<Self> {
        if n < 2 || resolution == 0 {
            return Err(Error::Domain("grid needs n >= 2 and resolution >= 1".into()));
        }
        let mut points = Vec::new();
        let mut counts = vec![0usize; n];
        compositions(&mut counts, 0, resolution, &mut |k| {
            let p: Vec<f64> = k.iter().map(|&v| v as f64 / resolution as f64).collect();
            if p.iter().all(|&v| v >= margin) {
                points.push(p);
            }
        });
        Ok(Self { resolution, margin, points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Enumerates nonnegative integer vectors summing to `remaining`, in
/// lexicographic order.
fn compositions(k: &mut [usize], pos: usize, remaining: usize, visit: &mut impl FnMut(&[usize])) {
    if pos + 1 == k.len() {
        k[pos] = remaining;
        visit(k);
        return;
    }
    for v in 0..=remaining {
        k[pos] = v;
        compositions(k, pos + 1, remaining - v, visit);
    }
}

/// Logits whose softmax is `p`.
pub fn logits_for(p: &[f64]) -> Result<Logits> {
    Logits::from_probs(p)
}

#[derive(Clone, Debug, PartialEq)]
pub struct VarianceMapRow {
    pub point: Vec<f64>,
    pub tau: f64,
    pub estimator: EstimatorId,
    pub cov_trace: f64,
    pub log10_trace: f64,
    /// Four-sigma radius of `log10_trace` (delta method).
    pub ci_radius: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VarianceMap {
    pub rows: Vec<VarianceMapRow>,
    pub skipped: Vec<(Vec<f64>, Error)>,
}

impl VarianceMap {
    /// Rows for one estimator and temperature, in grid order.
    pub fn select(&self, estimator: EstimatorId, tau: f64) -> Vec<&VarianceMapRow> {
        self.rows.iter().filter(|r| r.estimator == estimator && r.tau == tau).collect()
    }
}

/// Covariance traces of each estimator at each grid point and temperature.
/// Estimators at the same point and temperature share replicate streams.
pub fn variance_map(
    spec: &QpSpec,
    taus: &[Temperature],
    estimators: &[EstimatorId],
    grid: &SimplexGrid,
    n_replicates: u64,
    seed: u64,
) -> Result<VarianceMap> {
    let jobs: Vec<(usize, usize)> = (0..taus.len()).flat_map(|t| (0..grid.len()).map(move |i| (t, i))).collect();
    let results: Vec<Result<std::result::Result<Vec<VarianceMapRow>, Error>>> = jobs
        .par_iter()
        .map(|&(t, i)| {
            let p = &grid.points[i];
            let theta = logits_for(p)?;
            let obj = match qp_objective_spec(&theta, spec) {
                Ok(o) => o,
                Err(e @ Error::DegeneratePoint { .. }) => return Ok(Err(e)),
                Err(e) => return Err(e),
            };
            let reference = exact_gradient(&theta, &obj)?;
            let point_seed = derive_seed(seed, ((t as u64) << 32) | i as u64);
            let mut rows = Vec::with_capacity(estimators.len());
            for &id in estimators {
                let est = Estimator::new(id, taus[t]);
                let stats = measure_stats(|rng| Ok(est.estimate(rng, &theta, &obj)?.values), &reference, n_replicates, point_seed)?;
                let ln10 = std::f64::consts::LN_10;
                rows.push(VarianceMapRow {
                    point: p.clone(),
                    tau: taus[t].value(),
                    estimator: id,
                    cov_trace: stats.cov_trace,
                    log10_trace: stats.cov_trace.log10(),
                    // A zero trace (A = 0 at the target) is exact, so its radius is zero.
                    ci_radius: if stats.cov_trace > 0.0 { stats.cov_trace_radius / (stats.cov_trace * ln10) } else { 0.0 },
                });
            }
            Ok(Ok(rows))
        })
        .collect();
    let mut map = VarianceMap { rows: Vec::new(), skipped: Vec::new() };
    for (&(_, i), r) in jobs.iter().zip(results) {
        match r? {
            Ok(rows) => map.rows.extend(rows),
            Err(e) => {
                if !map.skipped.iter().any(|(p, _)| p == &grid.points[i]) {
                    map.skipped.push((grid.points[i].clone(), e));
                }
            }
        }
    }
    Ok(map)
}

/// Euclidean projection onto the probability simplex (sort-based).
pub fn project_to_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut shift = 0.0;
    for (k, &uk) in u.iter().enumerate() {
        cumulative += uk;
        let candidate = (cumulative - 1.0) / (k + 1) as f64;
        if uk - candidate > 0.0 {
            shift = candidate;
        }
    }
    v.iter().map(|x| (x - shift).max(0.0)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct QpSolution {
    pub p: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
}

/// Projected gradient descent from the barycenter with step `1/(2 λ_max(Q))`.
pub fn solve_qp(spec: &QpSpec, max_iters: usize, tol: f64) -> QpSolution {
    let n = spec.n();
    let lambda_max = SymmetricEigen::new(to_dmatrix(&spec.q)).eigenvalues.max();
    let step = 1.0 / (2.0 * lambda_max);
    let mut p = vec![1.0 / n as f64; n];
    let mut iterations = max_iters;
    for it in 0..max_iters {
        let r: Vec<f64> = p.iter().zip(&spec.c).map(|(a, b)| a - b).collect();
        let g = spec.q.mul_vec(&r);
        let next = project_to_simplex(&p.iter().zip(&g).map(|(x, gi)| x - step * 2.0 * gi).collect::<Vec<_>>());
        let moved = next.iter().zip(&p).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        p = next;
        if moved < tol {
            iterations = it + 1;
            break;
        }
    }
    QpSolution { value: spec.value(&p), p, iterations }
}

/// Gradient source for SGD on the logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TrainEstimator {
    /// Exact enumeration.
    Exact,
    Sampled(EstimatorId),
}

impl std::fmt::Display for TrainEstimator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TrainEstimator::Exact => f.write_str("exact"),
            TrainEstimator::Sampled(id) => id.fmt(f),
        }
    }
}

impl std::str::FromStr for TrainEstimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.trim().eq_ignore_ascii_case("exact") {
            Ok(TrainEstimator::Exact)
        } else {
            s.parse().map(TrainEstimator::Sampled)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub estimator: TrainEstimator,
    pub tau: Temperature,
    pub lr: f64,
    pub iters: usize,
    pub seed: u64,
    /// Independent estimates averaged per step.
    pub batch: usize,
    pub theta0: Vec<f64>,
    /// Add the gradient path through `A(p)` to each estimate. Without it SGD
    /// follows only the sampling-distribution term and stalls away from the
    /// QP optimum.
    pub include_a_path: bool,
}

impl TrainConfig {
    pub fn new(estimator: TrainEstimator, tau: Temperature, lr: f64, iters: usize, seed: u64, n: usize) -> Self {
        Self { estimator, tau, lr, iters, seed, batch: 1, theta0: default_theta0(n), include_a_path: true }
    }
}

/// `(2, 0, …, 0, -1)`: a start well away from the barycenter.
pub fn default_theta0(n: usize) -> Vec<f64> {
    let mut t = vec![0.0; n];
    if n > 0 {
        t[0] = 2.0;
    }
    if n > 1 {
        t[n - 1] = -1.0;
    }
    t
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainPoint {
    pub iteration: usize,
    pub objective: f64,
    pub theta: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainRun {
    pub estimator: TrainEstimator,
    pub tau: f64,
    pub lr: f64,
    pub seed: u64,
    pub iterations: usize,
    pub trajectory: Vec<TrainPoint>,
}

impl TrainRun {
    /// First logged iteration whose objective is at most `threshold`.
    pub fn iterations_to(&self, threshold: f64) -> Option<usize> {
        self.trajectory.iter().find(|p| p.objective <= threshold).map(|p| p.iteration)
    }

    pub fn final_objective(&self) -> f64 {
        self.trajectory.last().map_or(f64::NAN, |p| p.objective)
    }
}

/// Failed run: the error and the trajectory up to the failure.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainFailure {
    pub error: Error,
    pub partial: TrainRun,
}

/// Enumerated objective at `softmax(θ)`; equal to the QP value at interior
/// points by construction.
pub fn enumerated_objective(theta: &Logits, spec: &QpSpec) -> Result<f64> {
    let p = theta.probs();
    match build_a_matrix(&p, spec) {
        Ok(a) => {
            let obj = QpObjective::new(a, spec.c.clone());
            Ok(OneHotSample::all(spec.n()).map(|d| p[d.index()] * obj.eval(&d.to_vec())).sum())
        }
        // Measure-zero set where A(p) is undefined but the identity still
        // fixes the value.
        Err(Error::DegeneratePoint { .. }) => Ok(spec.value(&p)),
        Err(e) => Err(e),
    }
}

fn exact_train_gradient(theta: &Logits, spec: &QpSpec, obj: &ObjectiveSpec, include_a_path: bool) -> Result<Vec<f64>> {
    let mut g = exact_gradient(theta, obj)?;
    if include_a_path {
        let p = theta.probs();
        for d in OneHotSample::all(spec.n()) {
            let direct = qp_direct_gradient(theta, spec, &d.to_vec())?;
            g.iter_mut().zip(&direct).for_each(|(a, b)| *a += p[d.index()] * b);
        }
    }
    Ok(g)
}

/// Plain SGD on the logits, logging the enumerated objective before every
/// step and after the last one. Step `t` draws from stream `t` of the seed.
pub fn train_qp(spec: &QpSpec, config: &TrainConfig) -> std::result::Result<TrainRun, Box<TrainFailure>> {
    let mut run = TrainRun {
        estimator: config.estimator,
        tau: config.tau.value(),
        lr: config.lr,
        seed: config.seed,
        iterations: config.iters,
        trajectory: Vec::with_capacity(config.iters + 1),
    };
    let fail = |error: Error, run: TrainRun| Box::new(TrainFailure { error, partial: run });
    if !(config.lr >= 0.0) || config.batch == 0 {
        return Err(fail(Error::Domain("learning rate must be >= 0 and batch >= 1".into()), run));
    }
    if config.theta0.len() != spec.n() {
        return Err(fail(Error::Dimension { expected: spec.n(), got: config.theta0.len() }, run));
    }
    let mut theta = config.theta0.clone();
    let mut baseline = BaselineState::default();
    for it in 0..=config.iters {
        let logits = match Logits::new(theta.clone()) {
            Ok(l) => l,
            Err(_) => return Err(fail(Error::Divergence { iteration: it }, run)),
        };
        let objective = match enumerated_objective(&logits, spec) {
            Ok(v) => v,
            Err(e) => return Err(fail(e, run)),
        };
        run.trajectory.push(TrainPoint { iteration: it, objective, theta: theta.clone() });
        if it == config.iters {
            break;
        }
        let step = (|| -> Result<Vec<f64>> {
            let obj = qp_objective_spec(&logits, spec)?;
            match config.estimator {
                TrainEstimator::Exact => exact_train_gradient(&logits, spec, &obj, config.include_a_path),
                TrainEstimator::Sampled(id) => {
                    let mut rng = RngStream::new(config.seed, it as u64);
                    let mut total = vec![0.0; spec.n()];
                    for _ in 0..config.batch {
                        // Every estimator draws D first, so replaying the
                        // stream recovers the outcome it used.
                        let mut probe = rng.clone();
                        let (d, _) = crate::gumbel::sample_categorical_gumbel_max(&mut probe, &logits);
                        let est = match id {
                            EstimatorId::Reinforce => estimate_reinforce(&mut rng, &logits, &obj, Some(&mut baseline))?,
                            _ => Estimator::new(id, config.tau).estimate(&mut rng, &logits, &obj)?,
                        };
                        total.iter_mut().zip(&est.values).for_each(|(a, b)| *a += b);
                        if config.include_a_path {
                            let direct = qp_direct_gradient(&logits, spec, &d.to_vec())?;
                            total.iter_mut().zip(&direct).for_each(|(a, b)| *a += b);
                        }
                    }
                    let scale = 1.0 / config.batch as f64;
                    Ok(total.into_iter().map(|v| v * scale).collect())
                }
            }
        })();
        let g = match step {
            Ok(g) => g,
            Err(e) => return Err(fail(e, run)),
        };
        for (t, gi) in theta.iter_mut().zip(&g) {
            *t -= config.lr * gi;
        }
        if !theta.iter().all(|v| v.is_finite()) {
            return Err(fail(Error::Divergence { iteration: it + 1 }, run));
        }
    }
    Ok(run)
}

/// Median of per-seed values, with `None` (threshold never reached) ordered
/// above every number.
pub fn median_iterations(values: &[Option<usize>]) -> Option<f64> {
    let mut v: Vec<Option<usize>> = values.to_vec();
    v.sort_by(|a, b| match (a, b) {
        (Some(x), Some(y)) => x.cmp(y),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
    let len = v.len();
    if len == 0 {
        return None;
    }
    if len % 2 == 1 {
        v[len / 2].map(|x| x as f64)
    } else {
        match (v[len / 2 - 1], v[len / 2]) {
            (Some(a), Some(b)) => Some((a + b) as f64 / 2.0),
            _ => None,
        }
    }
}

/// One run per seed, in seed order.
pub fn train_over_seeds(
    spec: &QpSpec,
    base: &TrainConfig,
    seeds: &[u64],
) -> std::result::Result<Vec<TrainRun>, Box<TrainFailure>> {
    let runs: Vec<_> = seeds
        .par_iter()
        .map(|&seed| {
            let mut cfg = base.clone();
            cfg.seed = seed;
            train_qp(spec, &cfg)
        })
        .collect();
    let mut out = Vec::with_capacity(runs.len());
    for r in runs {
        out.push(r?);
    }
    Ok(out)
}

/// Learning rate with the smallest median iterations-to-threshold over
/// `seeds`; ties go to the smaller median final objective. Diverging rates are
/// skipped.
pub fn tune_learning_rate(spec: &QpSpec, base: &TrainConfig, lrs: &[f64], seeds: &[u64], threshold: f64) -> Option<f64> {
    let mut best: Option<(f64, (f64, f64))> = None;
    for &lr in lrs {
        let mut cfg = base.clone();
        cfg.lr = lr;
        let Ok(runs) = train_over_seeds(spec, &cfg, seeds) else { continue };
        let hits: Vec<Option<usize>> = runs.iter().map(|r| r.iterations_to(threshold)).collect();
        let median = median_iterations(&hits).unwrap_or(f64::INFINITY);
        let mut finals: Vec<f64> = runs.iter().map(TrainRun::final_objective).collect();
        finals.sort_by(f64::total_cmp);
        let key = (median, finals[finals.len() / 2]);
        if best.is_none_or(|(_, k)| key < k) {
            best = Some((lr, key));
        }
    }
    best.map(|(lr, _)| lr)
}
