//! Single-variable gradient estimators for `∇_θ E[f(D)]`, `D ~ softmax(θ)`.
//!
//! Every estimator draws `D` through the Gumbel-max coupling first, so runs
//! started from the same [`RngStream`] share the outcome `D` and differ only in
//! the randomness consumed afterwards.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::gumbel::{accumulate_posterior_jacobians, sample_categorical_gumbel_max, JacobianMean, Logits};
use crate::objective::ObjectiveSpec;
use crate::rng::RngStream;
use crate::softmax::{tempered_softmax, tempered_softmax_jacobian, Temperature};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EstimatorId {
    Reinforce,
    Gs,
    St,
    StGs,
    GrMc(usize),
}

impl fmt::Display for EstimatorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EstimatorId::Reinforce => f.write_str("reinforce"),
            EstimatorId::Gs => f.write_str("gs"),
            EstimatorId::St => f.write_str("st"),
            EstimatorId::StGs => f.write_str("stgs"),
            EstimatorId::GrMc(k) => write!(f, "grmc{k}"),
        }
    }
}

impl FromStr for EstimatorId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase().replace(['-', '_'], "");
        match lower.as_str() {
            "reinforce" => Ok(EstimatorId::Reinforce),
            "gs" => Ok(EstimatorId::Gs),
            "st" => Ok(EstimatorId::St),
            "stgs" => Ok(EstimatorId::StGs),
            other => match other.strip_prefix("grmc").map(str::parse::<usize>) {
                Some(Ok(k)) if k >= 1 => Ok(EstimatorId::GrMc(k)),
                _ => Err(Error::Config(format!("unknown estimator {s:?}"))),
            },
        }
    }
}

/// One invocation's output.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientEstimate {
    pub values: Vec<f64>,
    pub estimator: EstimatorId,
    pub seed: u64,
    pub stream: u64,
    /// Objective value seen by the estimator (at `D`, or at `S_τ` for GS).
    pub f_value: f64,
}

impl GradientEstimate {
    fn new(values: Vec<f64>, estimator: EstimatorId, rng: &RngStream, f_value: f64) -> Self {
        Self { values, estimator, seed: rng.seed(), stream: rng.stream(), f_value }
    }
}

/// Exponentially decayed running mean of observed `f` values.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineState {
    mean: f64,
    count: u64,
    decay: f64,
}

impl Default for BaselineState {
    fn default() -> Self {
        Self { mean: 0.0, count: 0, decay: 0.99 }
    }
}

impl BaselineState {
    pub fn new(decay: f64) -> Result<Self> {
        if !(decay > 0.0 && decay <= 1.0) {
            return Err(Error::Domain(format!("baseline decay must lie in (0, 1], got {decay}")));
        }
        Ok(Self { mean: 0.0, count: 0, decay })
    }

    /// Current baseline; zero before the first observation.
    pub fn value(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.mean
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn update(&mut self, f: f64) {
        self.mean = if self.count == 0 { f } else { self.decay * self.mean + (1.0 - self.decay) * f };
        self.count += 1;
    }
}

fn check_arity(theta: &Logits, obj: &ObjectiveSpec) -> Result<()> {
    if obj.arity() != theta.len() {
        return Err(Error::Dimension { expected: theta.len(), got: obj.arity() });
    }
    Ok(())
}

pub fn estimate_reinforce(
    rng: &mut RngStream,
    theta: &Logits,
    obj: &ObjectiveSpec,
    baseline: Option<&mut BaselineState>,
) -> Result<GradientEstimate> {
    check_arity(theta, obj)?;
    let (d, _) = sample_categorical_gumbel_max(rng, theta);
    let f = obj.eval(&d.to_vec());
    let b = baseline.as_ref().map_or(0.0, |s| s.value());
    let p = theta.probs();
    let values = p
        .iter()
        .enumerate()
        .map(|(i, pi)| (f - b) * (f64::from(u8::from(i == d.index())) - pi))
        .collect();
    if let Some(state) = baseline {
        state.update(f);
    }
    Ok(GradientEstimate::new(values, EstimatorId::Reinforce, rng, f))
}

pub fn estimate_gs(rng: &mut RngStream, theta: &Logits, tau: Temperature, obj: &ObjectiveSpec) -> Result<GradientEstimate> {
    check_arity(theta, obj)?;
    let (_, perturbed) = sample_categorical_gumbel_max(rng, theta);
    let s = tempered_softmax(&perturbed.values, tau);
    let f = obj.eval(&s);
    let g = obj.grad(&s);
    let values = tempered_softmax_jacobian(&perturbed.values, tau).left_mul(&g);
    Ok(GradientEstimate::new(values, EstimatorId::Gs, rng, f))
}

pub fn estimate_st(rng: &mut RngStream, theta: &Logits, tau: Temperature, obj: &ObjectiveSpec) -> Result<GradientEstimate> {
    check_arity(theta, obj)?;
    let (d, _) = sample_categorical_gumbel_max(rng, theta);
    let x = d.to_vec();
    let f = obj.eval(&x);
    let g = obj.grad(&x);
    let values = tempered_softmax_jacobian(theta.as_slice(), tau).left_mul(&g);
    Ok(GradientEstimate::new(values, EstimatorId::St, rng, f))
}

pub fn estimate_stgs(rng: &mut RngStream, theta: &Logits, tau: Temperature, obj: &ObjectiveSpec) -> Result<GradientEstimate> {
    check_arity(theta, obj)?;
    let (d, perturbed) = sample_categorical_gumbel_max(rng, theta);
    let x = d.to_vec();
    let f = obj.eval(&x);
    let g = obj.grad(&x);
    let values = tempered_softmax_jacobian(&perturbed.values, tau).left_mul(&g);
    Ok(GradientEstimate::new(values, EstimatorId::StGs, rng, f))
}

pub fn estimate_grmc(
    rng: &mut RngStream,
    theta: &Logits,
    tau: Temperature,
    obj: &ObjectiveSpec,
    k: usize,
) -> Result<GradientEstimate> {
    check_arity(theta, obj)?;
    if k == 0 {
        return Err(Error::Domain("GR-MC needs k >= 1".into()));
    }
    let (d, _) = sample_categorical_gumbel_max(rng, theta);
    let x = d.to_vec();
    let f = obj.eval(&x);
    let g = obj.grad(&x);
    let mut acc = JacobianMean::new(theta.len());
    accumulate_posterior_jacobians(rng, theta, d, tau, k, &mut acc)?;
    let values = acc.mean(tau).left_mul(&g);
    Ok(GradientEstimate::new(values, EstimatorId::GrMc(k), rng, f))
}

/// Average of `b` independent GR-MC draws, each with its own `D`.
pub fn estimate_grmc_minibatched(
    rng: &mut RngStream,
    theta: &Logits,
    tau: Temperature,
    obj: &ObjectiveSpec,
    k: usize,
    b: usize,
) -> Result<GradientEstimate> {
    if b == 0 {
        return Err(Error::Domain("minibatch size must be at least 1".into()));
    }
    let mut values = vec![0.0; theta.len()];
    let mut f_sum = 0.0;
    for _ in 0..b {
        let est = estimate_grmc(rng, theta, tau, obj, k)?;
        for (v, e) in values.iter_mut().zip(&est.values) {
            *v += e;
        }
        f_sum += est.f_value;
    }
    let scale = 1.0 / b as f64;
    values.iter_mut().for_each(|v| *v *= scale);
    Ok(GradientEstimate::new(values, EstimatorId::GrMc(k), rng, f_sum * scale))
}

/// An estimator together with its temperature, ready to be invoked.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimator {
    pub id: EstimatorId,
    pub tau: Temperature,
}

impl Estimator {
    pub fn new(id: EstimatorId, tau: Temperature) -> Self {
        Self { id, tau }
    }

    /// One estimate (REINFORCE runs without a baseline).
    pub fn estimate(&self, rng: &mut RngStream, theta: &Logits, obj: &ObjectiveSpec) -> Result<GradientEstimate> {
        match self.id {
            EstimatorId::Reinforce => estimate_reinforce(rng, theta, obj, None),
            EstimatorId::Gs => estimate_gs(rng, theta, self.tau, obj),
            EstimatorId::St => estimate_st(rng, theta, self.tau, obj),
            EstimatorId::StGs => estimate_stgs(rng, theta, self.tau, obj),
            EstimatorId::GrMc(k) => estimate_grmc(rng, theta, self.tau, obj, k),
        }
    }

    /// Average of `b` independent estimates.
    pub fn estimate_batch(&self, rng: &mut RngStream, theta: &Logits, obj: &ObjectiveSpec, b: usize) -> Result<GradientEstimate> {
        if b == 0 {
            return Err(Error::Domain("minibatch size must be at least 1".into()));
        }
        if b == 1 {
            return self.estimate(rng, theta, obj);
        }
        if let EstimatorId::GrMc(k) = self.id {
            return estimate_grmc_minibatched(rng, theta, self.tau, obj, k, b);
        }
        let mut values = vec![0.0; theta.len()];
        let mut f_sum = 0.0;
        for _ in 0..b {
            let est = self.estimate(rng, theta, obj)?;
            values.iter_mut().zip(&est.values).for_each(|(v, e)| *v += e);
            f_sum += est.f_value;
        }
        let scale = 1.0 / b as f64;
        values.iter_mut().for_each(|v| *v *= scale);
        Ok(GradientEstimate::new(values, self.id, rng, f_sum * scale))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::Quadratic;

    fn tau(t: f64) -> Temperature {
        Temperature::new(t).unwrap()
    }

    #[test]
    fn ids_round_trip() {
        for id in [EstimatorId::Reinforce, EstimatorId::Gs, EstimatorId::St, EstimatorId::StGs, EstimatorId::GrMc(1000)] {
            assert_eq!(id.to_string().parse::<EstimatorId>().unwrap(), id);
        }
        assert_eq!("GR-MC10".parse::<EstimatorId>().unwrap(), EstimatorId::GrMc(10));
        assert!("grmc0".parse::<EstimatorId>().is_err());
        assert!("relax".parse::<EstimatorId>().is_err());
    }

    #[test]
    fn st_estimate_is_the_jacobian_row() {
        let theta = Logits::new(vec![0.0, 3f64.ln()]).unwrap();
        let obj = ObjectiveSpec::new(Quadratic::linear(vec![1.0, 0.0])).unwrap();
        let mut rng = RngStream::new(1, 0);
        for _ in 0..20 {
            let est = estimate_st(&mut rng, &theta, tau(1.0), &obj).unwrap();
            assert!((est.values[0] - 0.1875).abs() < 1e-15);
            assert!((est.values[1] + 0.1875).abs() < 1e-15);
        }
    }

    #[test]
    fn gs_estimate_sums_to_zero() {
        let theta = Logits::new(vec![0.0, 0.0]).unwrap();
        let obj = ObjectiveSpec::new(Quadratic::linear(vec![1.0, 0.0])).unwrap();
        let mut rng = RngStream::new(2, 0);
        for _ in 0..100 {
            let est = estimate_gs(&mut rng, &theta, tau(1.0), &obj).unwrap();
            assert!((est.values[0] + est.values[1]).abs() < 1e-15);
        }
    }

    #[test]
    fn paired_streams_share_the_outcome() {
        let theta = Logits::new(vec![0.3, -0.7, 1.2]).unwrap();
        let obj = ObjectiveSpec::new(Quadratic::linear(vec![1.0, 2.0, 4.0])).unwrap();
        for s in 0..50 {
            let a = estimate_stgs(&mut RngStream::new(9, s), &theta, tau(0.5), &obj).unwrap();
            let b = estimate_grmc(&mut RngStream::new(9, s), &theta, tau(0.5), &obj, 10).unwrap();
            let r = estimate_reinforce(&mut RngStream::new(9, s), &theta, &obj, None).unwrap();
            assert_eq!(a.f_value, b.f_value);
            assert_eq!(a.f_value, r.f_value);
        }
    }

    #[test]
    fn baseline_starts_at_first_value_then_decays() {
        let mut b = BaselineState::default();
        assert_eq!(b.value(), 0.0);
        b.update(2.0);
        assert_eq!(b.value(), 2.0);
        b.update(1.0);
        assert!((b.value() - (0.99 * 2.0 + 0.01)).abs() < 1e-15);
        assert!(BaselineState::new(0.0).is_err());
        assert!(BaselineState::new(1.5).is_err());
    }

    #[test]
    fn reinforce_uses_baseline_before_update() {
        let theta = Logits::new(vec![0.0, 0.0]).unwrap();
        let obj = ObjectiveSpec::new(Quadratic::constant(2, 3.0)).unwrap();
        let mut b = BaselineState::default();
        let first = estimate_reinforce(&mut RngStream::new(0, 0), &theta, &obj, Some(&mut b)).unwrap();
        assert!(first.values.iter().all(|v| v.abs() == 1.5));
        let second = estimate_reinforce(&mut RngStream::new(0, 1), &theta, &obj, Some(&mut b)).unwrap();
        assert_eq!(second.values, vec![0.0, 0.0]);
    }

    #[test]
    fn invalid_counts_are_rejected() {
        let theta = Logits::new(vec![0.0, 0.0]).unwrap();
        let obj = ObjectiveSpec::new(Quadratic::constant(2, 1.0)).unwrap();
        let mut rng = RngStream::new(0, 0);
        assert!(matches!(estimate_grmc(&mut rng, &theta, tau(1.0), &obj, 0), Err(Error::Domain(_))));
        assert!(matches!(estimate_grmc_minibatched(&mut rng, &theta, tau(1.0), &obj, 1, 0), Err(Error::Domain(_))));
        let wide = ObjectiveSpec::new(Quadratic::constant(3, 1.0)).unwrap();
        assert!(matches!(estimate_st(&mut rng, &theta, tau(1.0), &wide), Err(Error::Dimension { .. })));
    }
}
