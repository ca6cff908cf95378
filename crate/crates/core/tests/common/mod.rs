//! Reference computations for the integration suites. Nothing here calls the
//! library's own oracle module.
#![allow(dead_code)]

use grk_core::stats::ScalarStats;

pub fn softmax(theta: &[f64]) -> Vec<f64> {
    let m = theta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = theta.iter().map(|t| (t - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

/// `Σ_i f(e_i) softmax(θ)_i`.
pub fn table_expectation(theta: &[f64], table: &[f64]) -> f64 {
    softmax(theta).iter().zip(table).map(|(p, f)| p * f).sum()
}

/// Central-difference gradient of `g` at `x`.
pub fn fd_gradient(g: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut y = x.to_vec();
    (0..x.len())
        .map(|j| {
            y[j] = x[j] + h;
            let up = g(&y);
            y[j] = x[j] - h;
            let down = g(&y);
            y[j] = x[j];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Gradient of `E[f(D)]` for a vertex table, by differencing the enumerated
/// expectation.
pub fn table_gradient(theta: &[f64], table: &[f64]) -> Vec<f64> {
    fd_gradient(|t| table_expectation(t, table), theta, 1e-5)
}

pub fn one_hot(i: usize, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}

/// Every joint outcome of independent categoricals with the given arities,
/// as index tuples in lexicographic order.
pub fn joint_outcomes(arities: &[usize]) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for &n in arities {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                (0..n).map(move |i| {
                    let mut p = prefix.clone();
                    p.push(i);
                    p
                })
            })
            .collect();
    }
    out
}

/// Two-sample z statistic for independent means.
pub fn z_two_sample(a: &ScalarStats, b: &ScalarStats) -> f64 {
    (a.mean() - b.mean()).abs() / (a.std_err().powi(2) + b.std_err().powi(2)).sqrt()
}

pub fn z_value(diff: f64, se_a: f64, se_b: f64) -> f64 {
    diff.abs() / (se_a * se_a + se_b * se_b).sqrt()
}

pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;
