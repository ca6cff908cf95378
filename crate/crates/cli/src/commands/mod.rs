pub mod bench;
pub mod check;
pub mod decompose;
pub mod train;
pub mod varmap;

use grk_core::experiments::QpSpec;
use grk_core::{EstimatorId, Logits, Matrix, RngStream, Temperature};

use crate::config::{validate_taus, QpSection};
use crate::error::CliError;

/// First present value among flag, file and default.
pub(crate) fn pick<T: Clone>(flag: &Option<T>, file: &Option<T>, default: T) -> T {
    flag.clone().or_else(|| file.clone()).unwrap_or(default)
}

pub(crate) fn temperatures(values: &[f64]) -> Result<Vec<Temperature>, CliError> {
    validate_taus(values)?;
    values.iter().map(|&t| Temperature::new(t).map_err(CliError::from)).collect()
}

pub(crate) fn estimator_ids(names: &[String]) -> Result<Vec<EstimatorId>, CliError> {
    if names.is_empty() {
        return Err(CliError::Usage("at least one estimator is required".into()));
    }
    names.iter().map(|s| s.parse::<EstimatorId>().map_err(|e| CliError::Usage(e.to_string()))).collect()
}

pub(crate) fn qp_spec(section: &QpSection, n: usize) -> Result<QpSpec, CliError> {
    let standard = QpSpec::standard(n)?;
    let q = match &section.q {
        Some(rows) => {
            if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                return Err(CliError::Usage(format!("qp.q must be {n}x{n}")));
            }
            Matrix::from_rows(rows)
        }
        None => standard.q().clone(),
    };
    let c = section.c.clone().unwrap_or_else(|| standard.c().to_vec());
    if c.len() != n {
        return Err(CliError::Usage(format!("qp.c must have {n} entries")));
    }
    QpSpec::new(q, c).map_err(|e| CliError::Usage(format!("invalid QP: {e}")))
}

/// The reference logits `(0.3, -0.7, 1.2)` for `n = 3`; seeded uniform
/// `(-1, 1)` entries otherwise.
pub(crate) fn default_theta(n: usize, seed: u64) -> Vec<f64> {
    if n == 3 {
        return vec![0.3, -0.7, 1.2];
    }
    let mut rng = RngStream::new(seed, 1);
    (0..n).map(|_| 2.0 * rng.uniform_open() - 1.0).collect()
}

pub(crate) fn logits(values: Vec<f64>) -> Result<Logits, CliError> {
    Logits::new(values).map_err(|e| CliError::Usage(format!("invalid logits: {e}")))
}
