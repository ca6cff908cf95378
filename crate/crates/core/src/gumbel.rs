//! Gumbel noise, the Gumbel-max coupling, and posterior Gumbel samples.
//!
//! For logits θ and i.i.d. standard Gumbels G, `D = onehot(argmax(θ + G))` is
//! distributed as `softmax(θ)`. Conversely, given `D = e_i`, the perturbed
//! logits `θ + G` can be drawn directly from unit exponentials `E`:
//!
//! ```text
//! (θ + G)_i | D = -ln E_i + ln Z(θ)
//! (θ + G)_j | D = -ln(E_j / exp(θ_j) + E_i / Z(θ))      j ≠ i
//! ```
//!
//! with `Z(θ) = Σ_k exp(θ_k)`.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::RngStream;
use crate::softmax::{jacobian_from_probs, log_sum_exp, Temperature};

/// Unnormalized log-probabilities of a categorical variable.
#[derive(Clone, Debug, PartialEq)]
pub struct Logits(Vec<f64>);

impl Logits {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::Domain(format!("logits need at least 2 categories, got {}", values.len())));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("logits must be finite, found {bad}")));
        }
        Ok(Self(values))
    }

    /// Logits whose softmax is `p`; `p` must be strictly positive.
    pub fn from_probs(p: &[f64]) -> Result<Self> {
        if let Some(bad) = p.iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::Domain(format!("probabilities must be positive, found {bad}")));
        }
        Self::new(p.iter().map(|v| v.ln()).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `softmax₁(θ)`
    pub fn probs(&self) -> Vec<f64> {
        let lz = self.log_partition();
        self.0.iter().map(|t| (t - lz).exp()).collect()
    }

    pub fn log_partition(&self) -> f64 {
        log_partition(self)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// A realized categorical outcome in one-hot form.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct OneHotSample {
    index: usize,
    arity: usize,
}

impl OneHotSample {
    pub fn new(index: usize, arity: usize) -> Result<Self> {
        if index >= arity {
            return Err(Error::Domain(format!("index {index} out of range for arity {arity}")));
        }
        Ok(Self { index, arity })
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.arity];
        v[self.index] = 1.0;
        v
    }

    /// All `arity` outcomes in index order.
    pub fn all(arity: usize) -> impl Iterator<Item = OneHotSample> {
        (0..arity).map(move |index| OneHotSample { index, arity })
    }
}

/// A realization of `θ + G`, optionally drawn conditionally on an outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbedLogits {
    pub values: Vec<f64>,
    pub conditioned_on: Option<OneHotSample>,
}

impl PerturbedLogits {
    pub fn argmax(&self) -> usize {
        argmax(&self.values)
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate().skip(1) {
        if v > x[best] {
            best = i;
        }
    }
    best
}

pub fn log_partition(theta: &Logits) -> f64 {
    log_sum_exp(theta.as_slice())
}

pub fn sample_gumbel(rng: &mut RngStream, n: usize) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::EmptyInput("sample_gumbel needs n >= 1"));
    }
    Ok((0..n).map(|_| rng.gumbel()).collect())
}

/// Draws `D = onehot(argmax(θ + G))` together with the realized `θ + G`.
pub fn sample_categorical_gumbel_max(rng: &mut RngStream, theta: &Logits) -> (OneHotSample, PerturbedLogits) {
    let values: Vec<f64> = theta.as_slice().iter().map(|t| t + rng.gumbel()).collect();
    let d = OneHotSample { index: argmax(&values), arity: values.len() };
    (d, PerturbedLogits { values, conditioned_on: None })
}

/// Draws `θ + G | D` in closed form from unit exponentials.
///
/// The off-argmax coordinates are evaluated as
/// `-logaddexp(ln E_j - θ_j, ln E_i - ln Z)` so extreme logits stay finite.
pub fn sample_posterior_gumbels(rng: &mut RngStream, theta: &Logits, d: OneHotSample) -> Result<PerturbedLogits> {
    let n = theta.len();
    if d.arity != n {
        return Err(Error::Dimension { expected: n, got: d.arity });
    }
    let log_z = theta.log_partition();
    let log_e: Vec<f64> = (0..n).map(|_| rng.exponential().ln()).collect();
    let i = d.index;
    let top = log_e[i] - log_z;
    let values = (0..n)
        .map(|j| if j == i { -log_e[i] + log_z } else { -log_add_exp(log_e[j] - theta.as_slice()[j], top) })
        .collect();
    Ok(PerturbedLogits { values, conditioned_on: Some(d) })
}

#[inline]
fn log_add_exp(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Draws the tempered softmax at posterior samples `θ + G | D` without
/// materializing the perturbed logits.
///
/// Relative to the argmax coordinate `i`, every other coordinate satisfies
/// `x_j - x_i = -ln(1 + E_j exp(ln Z - θ_j) / E_i)`, so the softmax is
/// `r / Σ r` with `r_i = 1` and `r_j = (1 + E_j c_j / E_i)^(-1/τ)`. Only the
/// ratios of the exponentials enter, so `E` is drawn up to scale as the
/// spacings of `n - 1` sorted uniforms (a flat Dirichlet vector), which costs
/// no logarithms. Integer `1/τ` uses `powi`.
#[derive(Clone, Debug)]
pub struct PosteriorSoftmaxSampler {
    index: usize,
    power: Power,
    scale: Vec<f64>,
    spacings: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
enum Power {
    Int(i32),
    Real(f64),
}

impl PosteriorSoftmaxSampler {
    pub fn new(theta: &Logits, d: OneHotSample, tau: Temperature) -> Result<Self> {
        let n = theta.len();
        if d.arity != n {
            return Err(Error::Dimension { expected: n, got: d.arity });
        }
        let log_z = theta.log_partition();
        let scale = theta.as_slice().iter().map(|t| (log_z - t).exp()).collect();
        let inv_tau = 1.0 / tau.value();
        let power = if inv_tau.fract() == 0.0 && inv_tau <= 64.0 { Power::Int(inv_tau as i32) } else { Power::Real(inv_tau) };
        Ok(Self { index: d.index, power, scale, spacings: vec![0.0; n] })
    }

    pub fn arity(&self) -> usize {
        self.scale.len()
    }

    /// Writes `softmax_τ(θ + G)` for one posterior draw into `out`.
    #[inline]
    pub fn sample_into(&mut self, rng: &mut RngStream, out: &mut [f64]) {
        let n = self.scale.len();
        let e = &mut self.spacings[..n];
        match n {
            2 => {
                let u = rng.uniform_open();
                e[0] = u;
                e[1] = 1.0 - u;
            }
            3 => {
                let (u, v) = (rng.uniform_open(), rng.uniform_open());
                let (lo, hi) = (u.min(v), u.max(v));
                e[0] = lo;
                e[1] = hi - lo;
                e[2] = 1.0 - hi;
            }
            _ => {
                let cuts = &mut e[..n - 1];
                for c in cuts.iter_mut() {
                    *c = rng.uniform_open();
                }
                cuts.sort_unstable_by(f64::total_cmp);
                let mut prev = 0.0;
                for c in cuts.iter_mut() {
                    let cut = *c;
                    *c = cut - prev;
                    prev = cut;
                }
                e[n - 1] = 1.0 - prev;
            }
        }

        let top = e[self.index];
        let mut total = 0.0;
        for (j, ((o, &ej), &cj)) in out.iter_mut().zip(e.iter()).zip(&self.scale).enumerate() {
            *o = if j == self.index {
                1.0
            } else {
                // 1 / (1 + t) with t = E_j c_j / E_i
                let y = top / (top + ej * cj);
                match self.power {
                    Power::Int(k) => y.powi(k),
                    Power::Real(inv_tau) => (y.ln() * inv_tau).exp(),
                }
            };
            total += *o;
        }
        let inv_total = 1.0 / total;
        out.iter_mut().for_each(|o| *o *= inv_total);
    }
}

/// Streaming average of tempered-softmax Jacobians at posterior samples.
///
/// Accumulates the mean of `s` and of `s sᵀ`, so memory is `O(n²)` for any
/// number of samples; the mean Jacobian is `(diag(mean s) - mean(s sᵀ)) / τ`.
#[derive(Clone, Debug)]
pub struct JacobianMean {
    n: usize,
    count: u64,
    sum_s: Vec<f64>,
    // upper triangle of Σ s sᵀ, row-major
    sum_outer: Vec<f64>,
}

impl JacobianMean {
    pub fn new(n: usize) -> Self {
        Self { n, count: 0, sum_s: vec![0.0; n], sum_outer: vec![0.0; n * (n + 1) / 2] }
    }

    #[inline]
    pub fn push_probs(&mut self, s: &[f64]) {
        debug_assert_eq!(s.len(), self.n);
        self.count += 1;
        let mut k = 0;
        for (a, &sa) in s.iter().enumerate() {
            self.sum_s[a] += sa;
            for &sb in &s[a..] {
                self.sum_outer[k] += sa * sb;
                k += 1;
            }
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn merge(&mut self, other: &JacobianMean) {
        assert_eq!(self.n, other.n);
        self.count += other.count;
        self.sum_s.iter_mut().zip(&other.sum_s).for_each(|(a, b)| *a += b);
        self.sum_outer.iter_mut().zip(&other.sum_outer).for_each(|(a, b)| *a += b);
    }

    /// Removes a previously merged accumulator.
    pub fn subtract(&mut self, other: &JacobianMean) {
        assert_eq!(self.n, other.n);
        self.count -= other.count;
        self.sum_s.iter_mut().zip(&other.sum_s).for_each(|(a, b)| *a -= b);
        self.sum_outer.iter_mut().zip(&other.sum_outer).for_each(|(a, b)| *a -= b);
    }

    pub fn mean(&self, tau: Temperature) -> Matrix {
        let k = self.count.max(1) as f64;
        let inv = 1.0 / (k * tau.value());
        let mut j = Matrix::zeros(self.n, self.n);
        let mut idx = 0;
        for a in 0..self.n {
            for b in a..self.n {
                let diag = if a == b { self.sum_s[a] } else { 0.0 };
                let v = (diag - self.sum_outer[idx]) * inv;
                j[(a, b)] = v;
                j[(b, a)] = v;
                idx += 1;
            }
        }
        j
    }
}

/// Mean of `d softmax_τ(θ+G)/dθ` over `k` posterior draws given `d`.
pub fn mean_posterior_jacobian(
    rng: &mut RngStream,
    theta: &Logits,
    d: OneHotSample,
    tau: Temperature,
    k: usize,
) -> Result<Matrix> {
    if k == 0 {
        return Err(Error::Domain("number of posterior samples must be at least 1".into()));
    }
    let mut acc = JacobianMean::new(theta.len());
    accumulate_posterior_jacobians(rng, theta, d, tau, k, &mut acc)?;
    Ok(acc.mean(tau))
}

/// Pushes `k` posterior softmax draws into `acc`.
pub fn accumulate_posterior_jacobians(
    rng: &mut RngStream,
    theta: &Logits,
    d: OneHotSample,
    tau: Temperature,
    k: usize,
    acc: &mut JacobianMean,
) -> Result<()> {
    let sampler = PosteriorSoftmaxSampler::new(theta, d, tau)?;
    match theta.len() {
        2 => accumulate_fixed::<2, 3>(&sampler, rng, k, acc),
        3 => accumulate_fixed::<3, 6>(&sampler, rng, k, acc),
        4 => accumulate_fixed::<4, 10>(&sampler, rng, k, acc),
        n => {
            let mut sampler = sampler;
            let mut s = vec![0.0; n];
            for _ in 0..k {
                sampler.sample_into(rng, &mut s);
                acc.push_probs(&s);
            }
        }
    }
    Ok(())
}

// Same draws and arithmetic as `sample_into` + `push_probs`, unrolled for
// small arities; `T` is the packed upper-triangle length N(N+1)/2.
fn accumulate_fixed<const N: usize, const T: usize>(
    sampler: &PosteriorSoftmaxSampler,
    rng: &mut RngStream,
    k: usize,
    acc: &mut JacobianMean,
) {
    let scale: [f64; N] = sampler.scale[..].try_into().expect("arity");
    let index = sampler.index;
    let mut sum_s = [0.0; N];
    let mut sum_outer = [0.0; T];
    let mut e = [0.0; N];
    let mut s = [0.0; N];
    for _ in 0..k {
        match N {
            2 => {
                let u = rng.uniform_open();
                e[0] = u;
                e[1] = 1.0 - u;
            }
            3 => {
                let (u, v) = (rng.uniform_open(), rng.uniform_open());
                let (lo, hi) = (u.min(v), u.max(v));
                e[0] = lo;
                e[1] = hi - lo;
                e[2] = 1.0 - hi;
            }
            _ => {
                let mut cuts = [0.0; N];
                for c in cuts[..N - 1].iter_mut() {
                    *c = rng.uniform_open();
                }
                cuts[..N - 1].sort_unstable_by(f64::total_cmp);
                let mut prev = 0.0;
                for j in 0..N - 1 {
                    e[j] = cuts[j] - prev;
                    prev = cuts[j];
                }
                e[N - 1] = 1.0 - prev;
            }
        }
        let top = e[index];
        let mut total = 0.0;
        for j in 0..N {
            s[j] = if j == index {
                1.0
            } else {
                let y = top / (top + e[j] * scale[j]);
                match sampler.power {
                    Power::Int(p) => y.powi(p),
                    Power::Real(inv_tau) => (y.ln() * inv_tau).exp(),
                }
            };
            total += s[j];
        }
        let inv_total = 1.0 / total;
        let mut t = 0;
        for a in 0..N {
            s[a] *= inv_total;
        }
        for a in 0..N {
            sum_s[a] += s[a];
            for b in a..N {
                sum_outer[t] += s[a] * s[b];
                t += 1;
            }
        }
    }
    acc.count += k as u64;
    acc.sum_s.iter_mut().zip(sum_s).for_each(|(a, b)| *a += b);
    acc.sum_outer.iter_mut().zip(sum_outer).for_each(|(a, b)| *a += b);
}

/// Single posterior Jacobian via the explicit perturbed logits; the reference
/// path for [`PosteriorSoftmaxSampler`].
pub fn posterior_jacobian_explicit(
    rng: &mut RngStream,
    theta: &Logits,
    d: OneHotSample,
    tau: Temperature,
) -> Result<Matrix> {
    let p = sample_posterior_gumbels(rng, theta, d)?;
    let s = crate::softmax::tempered_softmax(&p.values, tau);
    Ok(jacobian_from_probs(&s, tau))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::softmax::tempered_softmax_jacobian;

    fn logits(v: &[f64]) -> Logits {
        Logits::new(v.to_vec()).unwrap()
    }

    #[test]
    fn logits_validation() {
        assert!(Logits::new(vec![1.0]).is_err());
        assert!(Logits::new(vec![1.0, f64::NAN]).is_err());
        assert!(Logits::new(vec![1.0, f64::INFINITY]).is_err());
        assert!(Logits::new(vec![1.0, 2.0]).is_ok());
    }

    #[test]
    fn sample_gumbel_rejects_empty() {
        let mut rng = RngStream::new(0, 0);
        assert_eq!(sample_gumbel(&mut rng, 0), Err(Error::EmptyInput("sample_gumbel needs n >= 1")));
    }

    #[test]
    fn gumbel_is_deterministic() {
        let a = sample_gumbel(&mut RngStream::new(9, 2), 50).unwrap();
        let b = sample_gumbel(&mut RngStream::new(9, 2), 50).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn argmax_ties_take_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0, 2.0]), 0);
    }

    #[test]
    fn gumbel_max_returns_consistent_argmax() {
        let theta = logits(&[0.5, -0.3, 1.1]);
        let mut rng = RngStream::new(3, 0);
        for _ in 0..10_000 {
            let (d, p) = sample_categorical_gumbel_max(&mut rng, &theta);
            assert_eq!(p.argmax(), d.index());
            assert!(p.conditioned_on.is_none());
        }
    }

    #[test]
    fn posterior_argmax_matches_condition() {
        let theta = logits(&[5.0, -3.0, 0.2, 40.0]);
        let mut rng = RngStream::new(11, 0);
        for d in OneHotSample::all(4) {
            for _ in 0..20_000 {
                let p = sample_posterior_gumbels(&mut rng, &theta, d).unwrap();
                assert_eq!(p.argmax(), d.index());
                assert!(p.values.iter().all(|v| v.is_finite()));
            }
        }
    }

    #[test]
    fn posterior_handles_extreme_logits() {
        let theta = logits(&[800.0, -800.0, 0.0]);
        let mut rng = RngStream::new(1, 1);
        for d in OneHotSample::all(3) {
            let p = sample_posterior_gumbels(&mut rng, &theta, d).unwrap();
            assert!(p.values.iter().all(|v| v.is_finite()), "{p:?}");
            assert_eq!(p.argmax(), d.index());
        }
    }

    #[test]
    fn posterior_rejects_arity_mismatch() {
        let theta = logits(&[0.0, 0.0]);
        let d = OneHotSample::new(0, 3).unwrap();
        let err = sample_posterior_gumbels(&mut RngStream::new(0, 0), &theta, d).unwrap_err();
        assert_eq!(err, Error::Dimension { expected: 2, got: 3 });
    }

    #[test]
    fn fused_sampler_matches_explicit_path_in_law() {
        // Mean Jacobians from the two samplers agree within 4 standard errors,
        // entry by entry, for integer and non-integer 1/τ.
        let theta = logits(&[0.3, -0.7, 1.2, 0.0]);
        for tau in [0.37, 0.5] {
            let tau = Temperature::new(tau).unwrap();
            for d in OneHotSample::all(4) {
                let n_draws = 40_000;
                let mut fast_rng = RngStream::new(5, d.index() as u64);
                let mut slow_rng = RngStream::new(6, d.index() as u64);
                let mut sampler = PosteriorSoftmaxSampler::new(&theta, d, tau).unwrap();
                let mut s = vec![0.0; 4];
                let mut fast = vec![(0.0, 0.0); 16];
                let mut slow = vec![(0.0, 0.0); 16];
                for _ in 0..n_draws {
                    sampler.sample_into(&mut fast_rng, &mut s);
                    let jf = jacobian_from_probs(&s, tau);
                    let js = posterior_jacobian_explicit(&mut slow_rng, &theta, d, tau).unwrap();
                    for (k, (a, b)) in jf.as_slice().iter().zip(js.as_slice()).enumerate() {
                        fast[k].0 += a;
                        fast[k].1 += a * a;
                        slow[k].0 += b;
                        slow[k].1 += b * b;
                    }
                }
                let nf = n_draws as f64;
                for k in 0..16 {
                    let (ma, mb) = (fast[k].0 / nf, slow[k].0 / nf);
                    let va = fast[k].1 / nf - ma * ma;
                    let vb = slow[k].1 / nf - mb * mb;
                    let se = ((va + vb) / nf).sqrt();
                    assert!((ma - mb).abs() <= 4.0 * se + 1e-15, "entry {k}: {ma} vs {mb} (se {se})");
                }
            }
        }
    }

    #[test]
    fn fused_sampler_handles_extreme_logits() {
        let theta = logits(&[800.0, -800.0, 0.0]);
        let tau = Temperature::new(0.25).unwrap();
        let mut rng = RngStream::new(2, 0);
        let mut s = vec![0.0; 3];
        for d in OneHotSample::all(3) {
            let mut sampler = PosteriorSoftmaxSampler::new(&theta, d, tau).unwrap();
            for _ in 0..1000 {
                sampler.sample_into(&mut rng, &mut s);
                assert!(s.iter().all(|v| v.is_finite()));
                assert_eq!(argmax(&s), d.index());
            }
        }
    }

    #[test]
    fn jacobian_mean_of_one_sample_is_that_jacobian() {
        let x = [0.2, -1.0, 0.7];
        let tau = Temperature::new(0.8).unwrap();
        let s = crate::softmax::tempered_softmax(&x, tau);
        let mut acc = JacobianMean::new(3);
        acc.push_probs(&s);
        assert!(acc.mean(tau).max_abs_diff(&tempered_softmax_jacobian(&x, tau)) < 1e-15);
    }

    #[test]
    fn mean_posterior_jacobian_rejects_zero_k() {
        let theta = logits(&[0.0, 0.0]);
        let d = OneHotSample::new(0, 2).unwrap();
        let tau = Temperature::new(1.0).unwrap();
        assert!(mean_posterior_jacobian(&mut RngStream::new(0, 0), &theta, d, tau, 0).is_err());
    }
}
