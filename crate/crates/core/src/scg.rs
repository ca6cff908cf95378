//! Surrogate-loss backward passes for chains of categorical nodes.
//!
//! A forward pass realizes every node (outcome, perturbation, relaxed sample)
//! and evaluates the objective once. Everything the backward pass multiplies
//! by is recorded then, wrapped in [`StopGradient`], so backward is a pure
//! function of the realized graph.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::gumbel::{accumulate_posterior_jacobians, sample_categorical_gumbel_max, JacobianMean, Logits, OneHotSample, PerturbedLogits};
use crate::linalg::Matrix;
use crate::objective::{central_difference, random_interior_point, Objective, ObjectiveSpec, GRADIENT_CHECK_TOL};
use crate::rng::RngStream;
use crate::softmax::{log_sum_exp, tempered_softmax, tempered_softmax_jacobian, Temperature};

/// Objective over `m` categorical nodes.
pub trait ChainObjective: Send + Sync {
    fn arities(&self) -> Vec<usize>;
    fn eval(&self, xs: &[Vec<f64>]) -> f64;
    /// Per-node gradients `∂f/∂x_j`.
    fn partials(&self, xs: &[Vec<f64>]) -> Vec<Vec<f64>>;
    /// Whether `eval` is meaningful at interior simplex points (needed by GS).
    fn supports_interior(&self) -> bool {
        true
    }
}

/// A chain objective whose partials were checked by finite differences.
#[derive(Clone)]
pub struct ChainObjectiveSpec {
    inner: Arc<dyn ChainObjective>,
    arities: Vec<usize>,
}

impl ChainObjectiveSpec {
    pub fn new(objective: impl ChainObjective + 'static) -> Result<Self> {
        let inner: Arc<dyn ChainObjective> = Arc::new(objective);
        let arities = inner.arities();
        if arities.is_empty() {
            return Err(Error::EmptyInput("chain objective needs at least one node"));
        }
        let mut rng = RngStream::new(0xc4a1_0b1e, 0);
        for _ in 0..8 {
            let xs: Vec<Vec<f64>> = arities.iter().map(|&n| random_interior_point(&mut rng, n)).collect();
            let partials = inner.partials(&xs);
            for (j, g) in partials.iter().enumerate() {
                let fd = central_difference(
                    |y| {
                        let mut zs = xs.clone();
                        zs[j] = y.to_vec();
                        inner.eval(&zs)
                    },
                    &xs[j],
                    1e-6,
                );
                let scale = g.iter().fold(1.0f64, |m, v| m.max(v.abs()));
                let err = g.iter().zip(&fd).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())) / scale;
                if !(err < GRADIENT_CHECK_TOL) {
                    return Err(Error::GradientCheck(format!("node {j} partials off by {err:e} (relative)")));
                }
            }
        }
        Ok(Self { inner, arities })
    }

    pub fn arities(&self) -> &[usize] {
        &self.arities
    }

    pub fn nodes(&self) -> usize {
        self.arities.len()
    }

    pub fn eval(&self, xs: &[Vec<f64>]) -> f64 {
        self.inner.eval(xs)
    }

    pub fn partials(&self, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        self.inner.partials(xs)
    }

    pub fn supports_interior(&self) -> bool {
        self.inner.supports_interior()
    }
}

impl fmt::Debug for ChainObjectiveSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ChainObjectiveSpec").field("arities", &self.arities).finish()
    }
}

/// Applies a single-variable objective to the concatenation of the nodes.
pub struct FlatChain<O> {
    inner: O,
    arities: Vec<usize>,
}

impl<O: Objective> FlatChain<O> {
    pub fn new(inner: O, arities: Vec<usize>) -> Result<Self> {
        let total: usize = arities.iter().sum();
        if total != inner.arity() {
            return Err(Error::Dimension { expected: inner.arity(), got: total });
        }
        Ok(Self { inner, arities })
    }
}

impl<O: Objective> ChainObjective for FlatChain<O> {
    fn arities(&self) -> Vec<usize> {
        self.arities.clone()
    }

    fn eval(&self, xs: &[Vec<f64>]) -> f64 {
        self.inner.eval(&xs.concat())
    }

    fn partials(&self, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let g = self.inner.grad(&xs.concat());
        let mut out = Vec::with_capacity(self.arities.len());
        let mut start = 0;
        for &n in &self.arities {
            out.push(g[start..start + n].to_vec());
            start += n;
        }
        out
    }
}

/// `f(x_1, …, x_m) = Σ_j g_j(x_j)`.
pub struct Separable {
    parts: Vec<ObjectiveSpec>,
}

impl Separable {
    pub fn new(parts: Vec<ObjectiveSpec>) -> Self {
        Self { parts }
    }
}

impl ChainObjective for Separable {
    fn arities(&self) -> Vec<usize> {
        self.parts.iter().map(ObjectiveSpec::arity).collect()
    }

    fn eval(&self, xs: &[Vec<f64>]) -> f64 {
        self.parts.iter().zip(xs).map(|(g, x)| g.eval(x)).sum()
    }

    fn partials(&self, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        self.parts.iter().zip(xs).map(|(g, x)| g.grad(x)).collect()
    }
}

/// `θ^{j+1} = h(D^j)`.
pub trait LinkFunction: Send + Sync {
    fn arity_in(&self) -> usize;
    fn arity_out(&self) -> usize;
    fn eval(&self, d: &[f64]) -> Vec<f64>;
    /// `∂θ^{j+1}/∂D^j`, rows indexed by output. `None` when the link is only
    /// usable with score-function (REINFORCE) backward passes.
    fn jacobian(&self, d: &[f64]) -> Option<Matrix>;
}

#[derive(Clone)]
pub struct LinkSpec {
    inner: Arc<dyn LinkFunction>,
}

impl LinkSpec {
    /// Validates the Jacobian (when present) against finite differences of
    /// `eval` at random interior points.
    pub fn new(link: impl LinkFunction + 'static) -> Result<Self> {
        let inner: Arc<dyn LinkFunction> = Arc::new(link);
        let mut rng = RngStream::new(0x11_4c, 0);
        for _ in 0..8 {
            let x = random_interior_point(&mut rng, inner.arity_in());
            let Some(jac) = inner.jacobian(&x) else { break };
            if jac.rows() != inner.arity_out() || jac.cols() != inner.arity_in() {
                return Err(Error::Dimension { expected: inner.arity_out(), got: jac.rows() });
            }
            let scale = jac.max_abs().max(1.0);
            for r in 0..inner.arity_out() {
                let fd = central_difference(|y| inner.eval(y)[r], &x, 1e-6);
                let err = fd.iter().zip(jac.row(r)).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())) / scale;
                if !(err < GRADIENT_CHECK_TOL) {
                    return Err(Error::GradientCheck(format!("link Jacobian row {r} off by {err:e} (relative)")));
                }
            }
        }
        Ok(Self { inner })
    }

    pub fn arity_in(&self) -> usize {
        self.inner.arity_in()
    }

    pub fn arity_out(&self) -> usize {
        self.inner.arity_out()
    }

    pub fn eval(&self, d: &[f64]) -> Vec<f64> {
        self.inner.eval(d)
    }

    pub fn jacobian(&self, d: &[f64]) -> Option<Matrix> {
        self.inner.jacobian(d)
    }
}

impl fmt::Debug for LinkSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LinkSpec").field("in", &self.arity_in()).field("out", &self.arity_out()).finish()
    }
}

/// `h(d) = W d + b`.
#[derive(Clone, Debug)]
pub struct AffineLink {
    w: Matrix,
    b: Vec<f64>,
}

impl AffineLink {
    pub fn new(w: Matrix, b: Vec<f64>) -> Result<Self> {
        if w.rows() != b.len() {
            return Err(Error::Dimension { expected: b.len(), got: w.rows() });
        }
        Ok(Self { w, b })
    }

    /// Ignores its input: `h(d) = b`.
    pub fn constant(arity_in: usize, b: Vec<f64>) -> Self {
        Self { w: Matrix::zeros(b.len(), arity_in), b }
    }

    /// Entries of `W` and `b` uniform in `(-scale, scale)`.
    pub fn random(arity_in: usize, arity_out: usize, scale: f64, rng: &mut RngStream) -> Self {
        let mut u = || scale * (2.0 * rng.uniform_open() - 1.0);
        let w = Matrix::from_fn(arity_out, arity_in, |_, _| u());
        let b = (0..arity_out).map(|_| u()).collect();
        Self { w, b }
    }
}

impl LinkFunction for AffineLink {
    fn arity_in(&self) -> usize {
        self.w.cols()
    }
    fn arity_out(&self) -> usize {
        self.b.len()
    }
    fn eval(&self, d: &[f64]) -> Vec<f64> {
        self.w.mul_vec(d).iter().zip(&self.b).map(|(a, b)| a + b).collect()
    }
    fn jacobian(&self, _d: &[f64]) -> Option<Matrix> {
        Some(self.w.clone())
    }
}

/// Link given only by its forward map.
pub struct OpaqueLink<F> {
    arity_in: usize,
    arity_out: usize,
    eval: F,
}

impl<F: Fn(&[f64]) -> Vec<f64> + Send + Sync> OpaqueLink<F> {
    pub fn new(arity_in: usize, arity_out: usize, eval: F) -> Self {
        Self { arity_in, arity_out, eval }
    }
}

impl<F: Fn(&[f64]) -> Vec<f64> + Send + Sync> LinkFunction for OpaqueLink<F> {
    fn arity_in(&self) -> usize {
        self.arity_in
    }
    fn arity_out(&self) -> usize {
        self.arity_out
    }
    fn eval(&self, d: &[f64]) -> Vec<f64> {
        (self.eval)(d)
    }
    fn jacobian(&self, _d: &[f64]) -> Option<Matrix> {
        None
    }
}

/// A value held constant by the backward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StopGradient<T>(T);

impl<T> StopGradient<T> {
    pub fn new(value: T) -> Self {
        Self(value)
    }

    pub fn get(&self) -> &T {
        &self.0
    }

    pub fn into_inner(self) -> T {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SurrogateMode {
    Reinforce,
    Gs(Temperature),
    St(Temperature),
    StGs(Temperature),
    GrMc(Temperature, usize),
}

impl SurrogateMode {
    fn temperature(&self) -> Option<Temperature> {
        match *self {
            SurrogateMode::Reinforce => None,
            SurrogateMode::Gs(t) | SurrogateMode::St(t) | SurrogateMode::StGs(t) | SurrogateMode::GrMc(t, _) => Some(t),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Topology {
    Parallel,
    Sequential,
}

/// The factor node `j`'s incoming credit is multiplied by.
#[derive(Clone, Debug, PartialEq)]
pub enum SurrogateFactor {
    /// `D^j - softmax(θ^j)`; scaled by `f*` (REINFORCE).
    Score(Vec<f64>),
    /// `∂S/∂θ^j` for the mode's surrogate `S`.
    Jacobian(Matrix),
}

#[derive(Clone, Debug)]
pub struct StochasticNode {
    pub logits: Logits,
    pub sample: OneHotSample,
    pub perturbed: PerturbedLogits,
    /// `softmax_τ(θ^j + G^j)` in GS mode.
    pub relaxed: Option<Vec<f64>>,
    pub surrogate: StopGradient<SurrogateFactor>,
}

impl StochasticNode {
    /// The value the objective (and the next link) sees.
    pub fn forward_value(&self) -> Vec<f64> {
        self.relaxed.clone().unwrap_or_else(|| self.sample.to_vec())
    }
}

#[derive(Clone, Debug)]
pub struct RealizedGraph {
    pub topology: Topology,
    pub mode: SurrogateMode,
    pub nodes: Vec<StochasticNode>,
    pub f_value: StopGradient<f64>,
    /// `∂f/∂D^j`; absent in REINFORCE mode.
    pub partials: Option<StopGradient<Vec<Vec<f64>>>>,
    /// `∂θ^{j+1}/∂D^j` for sequential graphs (`None` for opaque links).
    pub link_jacobians: Vec<Option<StopGradient<Matrix>>>,
    pub seed: u64,
    pub stream: u64,
}

/// Backward output of a sequential graph.
#[derive(Clone, Debug, PartialEq)]
pub struct SequentialGradient {
    /// Gradient with respect to `θ¹`.
    pub theta1: Vec<f64>,
    /// Per-node gradient with respect to that node's logits `θ^j`.
    pub logit_grads: Vec<Vec<f64>>,
    /// Per-node credit `dL/dD^j` (zero in REINFORCE mode, where outcomes are
    /// not differentiated).
    pub credits: Vec<Vec<f64>>,
}

fn check_mode(mode: &SurrogateMode, obj: &ChainObjectiveSpec) -> Result<()> {
    match mode {
        SurrogateMode::GrMc(_, 0) => Err(Error::Domain("GR-MC needs k >= 1".into())),
        SurrogateMode::Gs(_) if !obj.supports_interior() => {
            Err(Error::Config("GS mode needs an objective defined at interior points".into()))
        }
        _ => Ok(()),
    }
}

struct Draw {
    logits: Logits,
    sample: OneHotSample,
    perturbed: PerturbedLogits,
    relaxed: Option<Vec<f64>>,
}

fn draw_node(rng: &mut RngStream, logits: Logits, mode: &SurrogateMode) -> Draw {
    let (sample, perturbed) = sample_categorical_gumbel_max(rng, &logits);
    let relaxed = match mode {
        SurrogateMode::Gs(t) => Some(tempered_softmax(&perturbed.values, *t)),
        _ => None,
    };
    Draw { logits, sample, perturbed, relaxed }
}

/// Records surrogate factors (post-outcome randomness is consumed here, node
/// by node, after every outcome has been drawn) and evaluates `f` once.
fn finish_forward(
    rng: &mut RngStream,
    draws: Vec<Draw>,
    obj: &ChainObjectiveSpec,
    mode: SurrogateMode,
    topology: Topology,
    link_jacobians: Vec<Option<StopGradient<Matrix>>>,
) -> Result<RealizedGraph> {
    let xs: Vec<Vec<f64>> = draws.iter().map(|d| d.relaxed.clone().unwrap_or_else(|| d.sample.to_vec())).collect();
    let f_value = obj.eval(&xs);
    let partials = match mode {
        SurrogateMode::Reinforce => None,
        _ => Some(StopGradient::new(obj.partials(&xs))),
    };
    let mut nodes = Vec::with_capacity(draws.len());
    for d in draws {
        let factor = match mode {
            SurrogateMode::Reinforce => {
                let p = d.logits.probs();
                SurrogateFactor::Score(p.iter().enumerate().map(|(i, pi)| f64::from(u8::from(i == d.sample.index())) - pi).collect())
            }
            SurrogateMode::St(t) => SurrogateFactor::Jacobian(tempered_softmax_jacobian(d.logits.as_slice(), t)),
            SurrogateMode::Gs(t) | SurrogateMode::StGs(t) => {
                SurrogateFactor::Jacobian(tempered_softmax_jacobian(&d.perturbed.values, t))
            }
            SurrogateMode::GrMc(t, k) => {
                let mut acc = JacobianMean::new(d.logits.len());
                accumulate_posterior_jacobians(rng, &d.logits, d.sample, t, k, &mut acc)?;
                SurrogateFactor::Jacobian(acc.mean(t))
            }
        };
        nodes.push(StochasticNode {
            logits: d.logits,
            sample: d.sample,
            perturbed: d.perturbed,
            relaxed: d.relaxed,
            surrogate: StopGradient::new(factor),
        });
    }
    Ok(RealizedGraph {
        topology,
        mode,
        nodes,
        f_value: StopGradient::new(f_value),
        partials,
        link_jacobians,
        seed: rng.seed(),
        stream: rng.stream(),
    })
}

/// Independent nodes with their own logits.
pub fn forward_parallel(
    rng: &mut RngStream,
    thetas: &[Logits],
    obj: &ChainObjectiveSpec,
    mode: SurrogateMode,
) -> Result<RealizedGraph> {
    if thetas.len() != obj.nodes() {
        return Err(Error::Dimension { expected: obj.nodes(), got: thetas.len() });
    }
    for (t, &n) in thetas.iter().zip(obj.arities()) {
        if t.len() != n {
            return Err(Error::Dimension { expected: n, got: t.len() });
        }
    }
    check_mode(&mode, obj)?;
    let draws = thetas.iter().map(|t| draw_node(rng, t.clone(), &mode)).collect();
    finish_forward(rng, draws, obj, mode, Topology::Parallel, Vec::new())
}

pub fn backward_parallel(graph: &RealizedGraph) -> Result<Vec<Vec<f64>>> {
    if graph.topology != Topology::Parallel {
        return Err(Error::Config("backward_parallel called on a sequential graph".into()));
    }
    let f = *graph.f_value.get();
    graph
        .nodes
        .iter()
        .enumerate()
        .map(|(j, node)| match node.surrogate.get() {
            SurrogateFactor::Score(score) => Ok(score.iter().map(|s| f * s).collect()),
            SurrogateFactor::Jacobian(jac) => {
                let partials = graph.partials.as_ref().ok_or_else(|| Error::Config("graph has no recorded partials".into()))?;
                Ok(jac.left_mul(&partials.get()[j]))
            }
        })
        .collect()
}

/// `D¹ ~ θ¹`, then `θ^{j+1} = h_j(D^j)` (or `h_j(S^j)` in GS mode).
pub fn forward_sequential(
    rng: &mut RngStream,
    theta1: &Logits,
    links: &[LinkSpec],
    obj: &ChainObjectiveSpec,
    mode: SurrogateMode,
) -> Result<RealizedGraph> {
    if links.len() + 1 != obj.nodes() {
        return Err(Error::Dimension { expected: obj.nodes(), got: links.len() + 1 });
    }
    let arities = obj.arities();
    if theta1.len() != arities[0] {
        return Err(Error::Dimension { expected: arities[0], got: theta1.len() });
    }
    for (j, link) in links.iter().enumerate() {
        if link.arity_in() != arities[j] {
            return Err(Error::Dimension { expected: arities[j], got: link.arity_in() });
        }
        if link.arity_out() != arities[j + 1] {
            return Err(Error::Dimension { expected: arities[j + 1], got: link.arity_out() });
        }
    }
    check_mode(&mode, obj)?;
    let mut draws: Vec<Draw> = Vec::with_capacity(obj.nodes());
    let mut link_jacobians = Vec::with_capacity(links.len());
    let mut next = Some(theta1.clone());
    for j in 0..obj.nodes() {
        let Some(logits) = next.take() else { break };
        let draw = draw_node(rng, logits, &mode);
        if let Some(link) = links.get(j) {
            let input = draw.relaxed.clone().unwrap_or_else(|| draw.sample.to_vec());
            next = Some(Logits::new(link.eval(&input))?);
            let jac = match mode {
                SurrogateMode::Reinforce => None,
                _ => link.jacobian(&input).map(StopGradient::new),
            };
            link_jacobians.push(jac);
        }
        draws.push(draw);
    }
    finish_forward(rng, draws, obj, mode, Topology::Sequential, link_jacobians)
}

pub fn backward_sequential(graph: &RealizedGraph) -> Result<SequentialGradient> {
    if graph.topology != Topology::Sequential {
        return Err(Error::Config("backward_sequential called on a parallel graph".into()));
    }
    let m = graph.nodes.len();
    let f = *graph.f_value.get();
    if graph.mode == SurrogateMode::Reinforce {
        let mut logit_grads = Vec::with_capacity(m);
        for node in &graph.nodes {
            match node.surrogate.get() {
                SurrogateFactor::Score(score) => logit_grads.push(score.iter().map(|s| f * s).collect::<Vec<f64>>()),
                SurrogateFactor::Jacobian(_) => return Err(Error::Config("mode/graph mismatch".into())),
            }
        }
        let credits = graph.nodes.iter().map(|n| vec![0.0; n.logits.len()]).collect();
        return Ok(SequentialGradient { theta1: logit_grads[0].clone(), logit_grads, credits });
    }
    let partials = graph.partials.as_ref().ok_or_else(|| Error::Config("graph has no recorded partials".into()))?;
    let partials = partials.get();
    let mut credits = vec![Vec::new(); m];
    let mut logit_grads = vec![Vec::new(); m];
    for j in (0..m).rev() {
        let mut credit = partials[j].clone();
        if j + 1 < m {
            let h = graph.link_jacobians[j]
                .as_ref()
                .ok_or_else(|| Error::Config(format!("link {j} has no Jacobian; only REINFORCE can use it")))?;
            let upstream = h.get().left_mul(&logit_grads[j + 1]);
            credit.iter_mut().zip(&upstream).for_each(|(c, u)| *c += u);
        }
        let SurrogateFactor::Jacobian(jac) = graph.nodes[j].surrogate.get() else {
            return Err(Error::Config("mode/graph mismatch".into()));
        };
        logit_grads[j] = jac.left_mul(&credit);
        credits[j] = credit;
    }
    Ok(SequentialGradient { theta1: logit_grads[0].clone(), logit_grads, credits })
}

impl RealizedGraph {
    fn frozen_noise(&self, j: usize) -> Vec<f64> {
        let node = &self.nodes[j];
        node.perturbed.values.iter().zip(node.logits.as_slice()).map(|(v, t)| v - t).collect()
    }

    /// Node `j`'s surrogate term evaluated at logits `theta`, with every
    /// starred quantity (`f*`, `credit*`, the Gumbel noise) held at its
    /// realized value. `credit` is what multiplies the relaxed sample. Its
    /// derivative in `theta` reproduces the backward pass; GR-MC does not
    /// keep its posterior draws and is not supported.
    pub fn node_surrogate(&self, j: usize, theta: &[f64], credit: &[f64]) -> Result<f64> {
        let node = &self.nodes[j];
        let relaxed = match self.mode {
            SurrogateMode::Reinforce => {
                let log_p = theta[node.sample.index()] - log_sum_exp(theta);
                return Ok(*self.f_value.get() * log_p);
            }
            SurrogateMode::St(t) => tempered_softmax(theta, t),
            SurrogateMode::Gs(t) | SurrogateMode::StGs(t) => {
                let x: Vec<f64> = theta.iter().zip(self.frozen_noise(j)).map(|(a, g)| a + g).collect();
                tempered_softmax(&x, t)
            }
            SurrogateMode::GrMc(..) => {
                return Err(Error::Config("GR-MC graphs do not retain posterior samples".into()));
            }
        };
        Ok(credit.iter().zip(&relaxed).map(|(c, s)| c * s).sum())
    }

    /// Parallel surrogate `Σ_j L_j(θ^j)` with starred values frozen.
    pub fn parallel_surrogate(&self, thetas: &[Vec<f64>]) -> Result<f64> {
        let mut total = 0.0;
        for (j, theta) in thetas.iter().enumerate() {
            let credit = match &self.partials {
                Some(p) => p.get()[j].clone(),
                None => Vec::new(),
            };
            total += self.node_surrogate(j, theta, &credit)?;
        }
        Ok(total)
    }

    /// `L_{j+1}` as a function of a relaxed input to link `j`, with node
    /// `j+1`'s credit and noise frozen. Its derivative is the upstream credit
    /// the backward pass adds to node `j`.
    pub fn upstream_surrogate(&self, j: usize, input: &[f64], links: &[LinkSpec], credit_next: &[f64]) -> Result<f64> {
        let theta = links[j].eval(input);
        self.node_surrogate(j + 1, &theta, credit_next)
    }

    /// Temperature of the surrogate, if any.
    pub fn temperature(&self) -> Option<Temperature> {
        self.mode.temperature()
    }
}
