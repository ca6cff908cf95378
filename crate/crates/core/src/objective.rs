//! Objectives `f` evaluated at one-hot vertices (and, for relaxed estimators,
//! at interior simplex points), with analytic gradients.

use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::RngStream;

pub trait Objective: Send + Sync {
    fn arity(&self) -> usize;
    fn eval(&self, x: &[f64]) -> f64;
    /// `∂f/∂x` at `x`.
    fn grad(&self, x: &[f64]) -> Vec<f64>;
}

/// Relative tolerance for the finite-difference check run at registration.
pub const GRADIENT_CHECK_TOL: f64 = 1e-5;
const GRADIENT_CHECK_POINTS: usize = 8;
const FD_STEP: f64 = 1e-6;

/// An objective whose gradient has been checked against central finite
/// differences at random interior simplex points.
#[derive(Clone)]
pub struct ObjectiveSpec {
    inner: Arc<dyn Objective>,
}

impl ObjectiveSpec {
    pub fn new(objective: impl Objective + 'static) -> Result<Self> {
        Self::from_arc(Arc::new(objective))
    }

    pub fn from_arc(inner: Arc<dyn Objective>) -> Result<Self> {
        let n = inner.arity();
        if n == 0 {
            return Err(Error::EmptyInput("objective arity must be positive"));
        }
        let mut rng = RngStream::new(0x0b1e_c71e, 0);
        for _ in 0..GRADIENT_CHECK_POINTS {
            let x = random_interior_point(&mut rng, n);
            let err = gradient_check_error(|y| inner.eval(y), &inner.grad(&x), &x);
            if !(err < GRADIENT_CHECK_TOL) {
                return Err(Error::GradientCheck(format!(
                    "analytic gradient differs from finite differences by {err:e} (relative) at {x:?}"
                )));
            }
        }
        Ok(Self { inner })
    }

    pub fn arity(&self) -> usize {
        self.inner.arity()
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.inner.eval(x)
    }

    pub fn grad(&self, x: &[f64]) -> Vec<f64> {
        self.inner.grad(x)
    }

    /// Values at the vertices `e_0 .. e_{n-1}`.
    pub fn vertex_values(&self) -> Vec<f64> {
        let n = self.arity();
        (0..n)
            .map(|i| {
                let mut e = vec![0.0; n];
                e[i] = 1.0;
                self.eval(&e)
            })
            .collect()
    }
}

impl fmt::Debug for ObjectiveSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ObjectiveSpec").field("arity", &self.arity()).finish()
    }
}

pub(crate) fn random_interior_point(rng: &mut RngStream, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.exponential()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

/// `‖g - FD(f)‖∞ / max(1, ‖g‖∞)` with central differences.
pub fn gradient_check_error(f: impl Fn(&[f64]) -> f64, grad: &[f64], x: &[f64]) -> f64 {
    let fd = central_difference(&f, x, FD_STEP);
    let scale = grad.iter().fold(1.0f64, |m, g| m.max(g.abs()));
    grad.iter().zip(&fd).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())) / scale
}

pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut y = x.to_vec();
    (0..x.len())
        .map(|k| {
            y[k] = x[k] + h;
            let up = f(&y);
            y[k] = x[k] - h;
            let down = f(&y);
            y[k] = x[k];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `f(x) = xᵀ M x + vᵀ x + c0`. Covers constant, linear and random-table
/// objectives (a table is a linear or quadratic function read at vertices).
#[derive(Clone, Debug)]
pub struct Quadratic {
    m: Matrix,
    v: Vec<f64>,
    c0: f64,
}

impl Quadratic {
    pub fn new(m: Matrix, v: Vec<f64>, c0: f64) -> Result<Self> {
        if m.rows() != v.len() || m.cols() != v.len() {
            return Err(Error::Dimension { expected: v.len(), got: m.rows() });
        }
        Ok(Self { m, v, c0 })
    }

    pub fn constant(n: usize, c0: f64) -> Self {
        Self { m: Matrix::zeros(n, n), v: vec![0.0; n], c0 }
    }

    pub fn linear(v: Vec<f64>) -> Self {
        let n = v.len();
        Self { m: Matrix::zeros(n, n), v, c0: 0.0 }
    }

    /// Random quadratic with entries uniform in (-1, 1); its vertex values form
    /// a random table.
    pub fn random(n: usize, rng: &mut RngStream) -> Self {
        let mut u = || 2.0 * rng.uniform_open() - 1.0;
        let v = (0..n).map(|_| u()).collect();
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                m[(i, j)] = 0.5 * u();
            }
        }
        Self { m, v, c0: 0.0 }
    }
}

impl Objective for Quadratic {
    fn arity(&self) -> usize {
        self.v.len()
    }

    fn eval(&self, x: &[f64]) -> f64 {
        self.m.quad_form(x) + self.v.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + self.c0
    }

    fn grad(&self, x: &[f64]) -> Vec<f64> {
        let mx = self.m.mul_vec(x);
        let mtx = self.m.left_mul(x);
        mx.iter().zip(&mtx).zip(&self.v).map(|((a, b), v)| a + b + v).collect()
    }
}

/// Objective built from closures; mostly for tests and ad-hoc experiments.
pub struct FnObjective<F, G> {
    arity: usize,
    eval: F,
    grad: G,
}

impl<F, G> FnObjective<F, G>
where
    F: Fn(&[f64]) -> f64 + Send + Sync,
    G: Fn(&[f64]) -> Vec<f64> + Send + Sync,
{
    pub fn new(arity: usize, eval: F, grad: G) -> Self {
        Self { arity, eval, grad }
    }
}

impl<F, G> Objective for FnObjective<F, G>
where
    F: Fn(&[f64]) -> f64 + Send + Sync,
    G: Fn(&[f64]) -> Vec<f64> + Send + Sync,
{
    fn arity(&self) -> usize {
        self.arity
    }
    fn eval(&self, x: &[f64]) -> f64 {
        (self.eval)(x)
    }
    fn grad(&self, x: &[f64]) -> Vec<f64> {
        (self.grad)(x)
    }
}

/// Shared call counters for [`Counting`].
#[derive(Debug, Default)]
pub struct CallCounts {
    evals: AtomicUsize,
    grads: AtomicUsize,
}

impl CallCounts {
    pub fn evals(&self) -> usize {
        self.evals.load(Ordering::SeqCst)
    }
    pub fn grads(&self) -> usize {
        self.grads.load(Ordering::SeqCst)
    }
    pub fn reset(&self) {
        self.evals.store(0, Ordering::SeqCst);
        self.grads.store(0, Ordering::SeqCst);
    }
}

/// Instrumented wrapper that records every `eval` and `grad` call.
pub struct Counting<O> {
    inner: O,
    counts: Arc<CallCounts>,
}

impl<O: Objective> Counting<O> {
    pub fn new(inner: O) -> (Self, Arc<CallCounts>) {
        let counts = Arc::new(CallCounts::default());
        (Self { inner, counts: counts.clone() }, counts)
    }
}

impl<O: Objective> Objective for Counting<O> {
    fn arity(&self) -> usize {
        self.inner.arity()
    }
    fn eval(&self, x: &[f64]) -> f64 {
        self.counts.evals.fetch_add(1, Ordering::SeqCst);
        self.inner.eval(x)
    }
    fn grad(&self, x: &[f64]) -> Vec<f64> {
        self.counts.grads.fetch_add(1, Ordering::SeqCst);
        self.inner.grad(x)
    }
}
