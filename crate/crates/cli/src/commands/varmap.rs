use grk_core::experiments::{variance_map, SimplexGrid};

use super::{estimator_ids, pick, qp_spec, temperatures};
use crate::config::validate_positive;
use crate::error::CliError;
use crate::output::{emit, float, Csv};
use crate::Context;

pub fn run(ctx: &Context) -> Result<(), CliError> {
    let (a, f) = (&ctx.args, &ctx.config.varmap);
    let n = pick(&a.n, &f.n, 3);
    if n < 2 {
        return Err(CliError::Usage("n must be at least 2".into()));
    }
    let taus = temperatures(&pick(&a.tau, &f.tau, vec![0.1, 0.5, 1.0]))?;
    let default_names = ["stgs", "grmc10", "grmc1000"].map(String::from).to_vec();
    let estimators = estimator_ids(&pick(&a.estimators, &f.estimators, default_names))?;
    let resolution = pick(&a.resolution, &f.resolution, 40);
    let margin = pick(&a.margin, &f.margin, 1e-3);
    if !(0.0..1.0).contains(&margin) {
        return Err(CliError::Usage(format!("margin must lie in [0, 1), got {margin}")));
    }
    let replicates = pick(&a.replicates, &f.replicates, 10_000);
    validate_positive("replicates", replicates)?;
    if replicates < 2 {
        return Err(CliError::Usage("varmap needs at least 2 replicates".into()));
    }
    validate_positive("resolution", resolution as u64)?;
    let spec = qp_spec(&ctx.config.qp, n)?;
    let grid = SimplexGrid::new(n, resolution, margin)?;
    let map = variance_map(&spec, &taus, &estimators, &grid, replicates, ctx.seed)?;
    for (p, e) in &map.skipped {
        eprintln!("grk: skipped grid point {p:?}: {e}");
    }

    let mut header: Vec<String> = (0..n).map(|i| format!("p{i}")).collect();
    header.extend(["tau", "estimator", "log10_trace", "ci_radius"].map(String::from));
    let mut csv = Csv::new(&header);
    for row in &map.rows {
        let mut fields: Vec<String> = row.point.iter().map(|&v| float(v)).collect();
        fields.extend([float(row.tau), row.estimator.to_string(), float(row.log10_trace), float(row.ci_radius)]);
        csv.row(&fields);
    }
    emit(ctx.out.as_deref(), &csv.into_string())
}
