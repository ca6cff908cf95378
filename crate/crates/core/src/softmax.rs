//! Tempered softmax, its Jacobian, and the log-partition function.

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// A strictly positive, finite softmax temperature.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(tau: f64) -> Result<Self> {
        if tau.is_finite() && tau > 0.0 {
            Ok(Self(tau))
        } else {
            Err(Error::Domain(format!("temperature must be positive and finite, got {tau}")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// `log sum_i exp(x_i)` with max-subtraction.
pub fn log_sum_exp(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// `softmax_τ(x)_i = exp(x_i/τ) / Σ_j exp(x_j/τ)`, written into `out`.
pub fn tempered_softmax_into(x: &[f64], tau: Temperature, out: &mut [f64]) {
    debug_assert_eq!(x.len(), out.len());
    let inv = 1.0 / tau.0;
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = ((v - m) * inv).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

pub fn tempered_softmax(x: &[f64], tau: Temperature) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    tempered_softmax_into(x, tau, &mut out);
    out
}

/// Jacobian of the tempered softmax given its output `s`:
/// `J_ij = (s_i [i=j] - s_i s_j) / τ`.
pub fn jacobian_from_probs(s: &[f64], tau: Temperature) -> Matrix {
    let inv = 1.0 / tau.0;
    let n = s.len();
    let mut j = Matrix::zeros(n, n);
    for a in 0..n {
        for b in a..n {
            let v = if a == b { s[a] - s[a] * s[a] } else { -s[a] * s[b] } * inv;
            j[(a, b)] = v;
            j[(b, a)] = v;
        }
    }
    j
}

pub fn tempered_softmax_jacobian(x: &[f64], tau: Temperature) -> Matrix {
    jacobian_from_probs(&tempered_softmax(x, tau), tau)
}
