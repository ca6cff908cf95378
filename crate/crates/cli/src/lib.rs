//! The `grk` command-line front end.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
pub use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "grk", version, about = "Gumbel-Rao gradient estimator experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the invariant suite and report each check.
    Check(CommonArgs),
    /// Bias, variance and MSE of each estimator against the exact gradient.
    Bench(CommonArgs),
    /// Covariance traces over a simplex grid on the QP objective.
    Varmap(CommonArgs),
    /// Within/between-outcome variance decomposition of minibatched GR-MC.
    Decompose(CommonArgs),
    /// SGD on the QP objective with each estimator.
    Train(CommonArgs),
}

#[derive(Clone, Debug, Default, Args)]
pub struct CommonArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output file (a directory for `train`). Defaults to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Temperatures, comma separated.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub tau: Option<Vec<f64>>,
    /// Posterior sample counts for GR-MC, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub k: Option<Vec<usize>>,
    /// Minibatch sizes, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub b: Option<Vec<usize>>,
    /// Worker threads (defaults to the available parallelism).
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub replicates: Option<u64>,
    /// Estimator ids (reinforce, gs, st, stgs, grmc<K>), comma separated.
    #[arg(long, value_delimiter = ',')]
    pub estimators: Option<Vec<String>>,
    /// Number of categories.
    #[arg(long)]
    pub n: Option<usize>,
    /// Barycentric grid resolution (`varmap`).
    #[arg(long)]
    pub resolution: Option<usize>,
    /// Minimum grid coordinate (`varmap`).
    #[arg(long)]
    pub margin: Option<f64>,
    /// Learning rates, comma separated; several are tuned per estimator (`train`).
    #[arg(long, value_delimiter = ',')]
    pub lr: Option<Vec<f64>>,
    /// SGD iterations (`train`).
    #[arg(long)]
    pub iters: Option<usize>,
    /// Number of seeds (`train`).
    #[arg(long)]
    pub seeds: Option<u64>,
}

impl Command {
    fn args(&self) -> &CommonArgs {
        match self {
            Command::Check(a) | Command::Bench(a) | Command::Varmap(a) | Command::Decompose(a) | Command::Train(a) => a,
        }
    }
}

/// Settings shared by every command after merging flags, environment and file.
#[derive(Clone, Debug)]
pub struct Context {
    pub args: CommonArgs,
    pub config: RunConfig,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

fn resolve_seed(args: &CommonArgs, config: &RunConfig) -> Result<u64, CliError> {
    if let Some(s) = args.seed {
        return Ok(s);
    }
    if let Some(raw) = std::env::var_os("GRK_SEED") {
        let text = raw.to_string_lossy();
        return text.trim().parse().map_err(|_| CliError::Usage(format!("GRK_SEED must be an unsigned integer, got {text:?}")));
    }
    Ok(config.seed.unwrap_or(0))
}

/// Parses `argv` and runs the selected command.
pub fn run<I, T>(argv: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return Ok(());
            }
            return Err(CliError::Usage(e.to_string()));
        }
    };
    let args = cli.command.args().clone();
    let config = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let seed = resolve_seed(&args, &config)?;
    let threads = match args.threads.or(config.threads) {
        Some(0) => return Err(CliError::Usage("--threads must be at least 1".into())),
        Some(t) => t,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    let out = args.out.clone().or_else(|| config.out.clone());
    let ctx = Context { args, config, seed, out };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {threads} threads: {e}")))?;
    pool.install(|| match &cli.command {
        Command::Check(_) => commands::check::run(&ctx),
        Command::Bench(_) => commands::bench::run(&ctx),
        Command::Varmap(_) => commands::varmap::run(&ctx),
        Command::Decompose(_) => commands::decompose::run(&ctx),
        Command::Train(_) => commands::train::run(&ctx),
    })
}
