//! Streaming moment accumulators with compensated sums and associative merge.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::linalg::Matrix;

/// Neumaier-compensated sum.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct KahanSum {
    sum: f64,
    compensation: f64,
}

impl KahanSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.compensation += (self.sum - t) + x;
        } else {
            self.compensation += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn merge(&mut self, other: &KahanSum) {
        self.add(other.sum);
        self.add(other.compensation);
    }

    pub fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

/// Welford accumulator for a scalar.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ScalarStats {
    count: u64,
    mean: f64,
    m2: f64,
}

impl ScalarStats {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn merge(&mut self, other: &ScalarStats) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let n = (self.count + other.count) as f64;
        let delta = other.mean - self.mean;
        self.mean += delta * other.count as f64 / n;
        self.m2 += other.m2 + delta * delta * self.count as f64 * other.count as f64 / n;
        self.count += other.count;
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Population variance (divides by `N`).
    pub fn variance(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.m2 / self.count as f64
        }
    }

    /// Standard error of the mean.
    pub fn std_err(&self) -> f64 {
        if self.count < 2 {
            return f64::INFINITY;
        }
        (self.m2 / (self.count - 1) as f64 / self.count as f64).sqrt()
    }
}

/// Streaming accumulator for vector samples `x`, measured relative to a fixed
/// reference `r`. Moments are kept for `y = x - r`: the Welford mean and full
/// comoment matrix, plus compensated raw sums of `‖y‖²`, `‖y‖⁴` and `‖y‖² y`
/// for the squared error and the standard errors of the trace and MSE.
#[derive(Clone, Debug)]
pub struct VectorStats {
    reference: Vec<f64>,
    count: u64,
    mean: Vec<f64>,
    comoment: Vec<f64>,
    sq: KahanSum,
    quartic: KahanSum,
    cubic: Vec<KahanSum>,
    scratch: Vec<f64>,
}

impl VectorStats {
    pub fn new(reference: Vec<f64>) -> Self {
        let n = reference.len();
        Self {
            reference,
            count: 0,
            mean: vec![0.0; n],
            comoment: vec![0.0; n * n],
            sq: KahanSum::default(),
            quartic: KahanSum::default(),
            cubic: vec![KahanSum::default(); n],
            scratch: vec![0.0; n],
        }
    }

    pub fn dim(&self) -> usize {
        self.reference.len()
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn push(&mut self, x: &[f64]) {
        let n = self.dim();
        assert_eq!(x.len(), n, "sample dimension");
        self.count += 1;
        let inv = 1.0 / self.count as f64;
        let mut norm2 = 0.0;
        for i in 0..n {
            let y = x[i] - self.reference[i];
            norm2 += y * y;
            self.scratch[i] = y - self.mean[i];
            self.mean[i] += self.scratch[i] * inv;
        }
        for i in 0..n {
            let di = self.scratch[i];
            let row = &mut self.comoment[i * n..(i + 1) * n];
            for j in 0..n {
                let yj = x[j] - self.reference[j];
                row[j] += di * (yj - self.mean[j]);
            }
        }
        self.sq.add(norm2);
        self.quartic.add(norm2 * norm2);
        for i in 0..n {
            self.cubic[i].add(norm2 * (x[i] - self.reference[i]));
        }
    }

    /// Chan's pairwise combination; `other` must share the reference.
    pub fn merge(&mut self, other: &VectorStats) {
        assert_eq!(self.reference, other.reference, "merging accumulators with different references");
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = other.clone();
            return;
        }
        let n = self.dim();
        let (na, nb) = (self.count as f64, other.count as f64);
        let total = na + nb;
        let delta: Vec<f64> = (0..n).map(|i| other.mean[i] - self.mean[i]).collect();
        let w = na * nb / total;
        for i in 0..n {
            for j in 0..n {
                self.comoment[i * n + j] += other.comoment[i * n + j] + delta[i] * delta[j] * w;
            }
        }
        for i in 0..n {
            self.mean[i] += delta[i] * nb / total;
        }
        self.count += other.count;
        self.sq.merge(&other.sq);
        self.quartic.merge(&other.quartic);
        for (c, o) in self.cubic.iter_mut().zip(&other.cubic) {
            c.merge(o);
        }
    }

    pub fn finish(&self) -> EstimatorStats {
        let n = self.dim();
        let count = self.count;
        let nf = count as f64;
        let covariance = Matrix::from_fn(n, n, |i, j| self.comoment[i * n + j] / nf);
        let cov_trace: f64 = (0..n).map(|i| covariance[(i, i)]).sum();
        let bias = self.mean.clone();
        let bias_norm = bias.iter().map(|b| b * b).sum::<f64>().sqrt();
        let mse = self.sq.value() / nf;
        let mean: Vec<f64> = bias.iter().zip(&self.reference).map(|(b, r)| b + r).collect();
        let mean_radius = (0..n).map(|i| 4.0 * (covariance[(i, i)] / nf).sqrt()).collect();

        // Fourth central moment of ‖y - m‖² expanded in the raw sums.
        let m = &self.mean;
        let m_norm2: f64 = m.iter().map(|v| v * v).sum();
        let s2_tr = self.sq.value();
        let mut m_s2_m = 0.0;
        for i in 0..n {
            for j in 0..n {
                m_s2_m += m[i] * (self.comoment[i * n + j] + nf * m[i] * m[j]) * m[j];
            }
        }
        let m_s3: f64 = m.iter().zip(&self.cubic).map(|(mi, c)| mi * c.value()).sum();
        let m_s1 = nf * m_norm2;
        let sum_q2 = self.quartic.value() + 4.0 * m_s2_m + nf * m_norm2 * m_norm2 - 4.0 * m_s3
            + 2.0 * m_norm2 * s2_tr
            - 4.0 * m_norm2 * m_s1;
        let trace_var = (sum_q2 / nf - cov_trace * cov_trace).max(0.0);
        let mse_var = (self.quartic.value() / nf - mse * mse).max(0.0);

        EstimatorStats {
            count,
            reference: self.reference.clone(),
            mean,
            covariance,
            cov_trace,
            bias,
            bias_norm,
            mse,
            mean_radius,
            cov_trace_radius: 4.0 * (trace_var / nf).sqrt(),
            mse_radius: 4.0 * (mse_var / nf).sqrt(),
            ci_radius: 4.0 * (cov_trace / nf).sqrt(),
        }
    }
}

/// Summary of an estimator over `count` replicates, relative to `reference`.
///
/// Variances use the population normalization, so
/// `mse == cov_trace + bias_norm²` up to rounding. Radii are four standard
/// errors; `ci_radius` bounds `‖mean - E[mean]‖` on the scale of the
/// total standard error `sqrt(cov_trace / N)`.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimatorStats {
    pub count: u64,
    pub reference: Vec<f64>,
    pub mean: Vec<f64>,
    pub covariance: Matrix,
    pub cov_trace: f64,
    pub bias: Vec<f64>,
    pub bias_norm: f64,
    pub mse: f64,
    pub mean_radius: Vec<f64>,
    pub cov_trace_radius: f64,
    pub mse_radius: f64,
    pub ci_radius: f64,
}

impl EstimatorStats {
    /// Squared Mahalanobis distance of `point` from the sample mean under the
    /// covariance of the mean. Directions with (numerically) zero variance are
    /// dropped, which handles estimators confined to a subspace.
    pub fn mahalanobis_sq(&self, point: &[f64]) -> f64 {
        let n = self.mean.len();
        let cov = DMatrix::from_fn(n, n, |i, j| self.covariance[(i, j)] / self.count as f64);
        let diff = nalgebra::DVector::from_fn(n, |i, _| self.mean[i] - point[i]);
        let eig = SymmetricEigen::new(cov);
        let cutoff = eig.eigenvalues.amax() * 1e-12;
        let mut total = 0.0;
        for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
            let proj = eig.eigenvectors.column(k).dot(&diff);
            if lambda > cutoff {
                total += proj * proj / lambda;
            } else if proj.abs() > 1e-9 * (1.0 + diff.amax()) {
                return f64::INFINITY;
            }
        }
        total
    }

    /// Standard error of `cov_trace`.
    pub fn cov_trace_se(&self) -> f64 {
        self.cov_trace_radius / 4.0
    }

    pub fn mse_se(&self) -> f64 {
        self.mse_radius / 4.0
    }
}
