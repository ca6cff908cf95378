//! Single-evaluation gradient estimators for categorical random variables.
//!
//! The crate implements REINFORCE, Gumbel-Softmax (GS), slope-annealed
//! straight-through (ST), straight-through Gumbel-Softmax (ST-GS) and the
//! Rao-Blackwellized Gumbel-Rao Monte Carlo estimator (GR-MC K), together with
//! surrogate-loss backward passes for chains of discrete nodes, enumeration
//! oracles, and the simplex quadratic-program testbed used to compare them.

pub mod error;
pub mod estimators;
pub mod experiments;
pub mod gumbel;
pub mod linalg;
pub mod objective;
pub mod oracle;
pub mod rng;
pub mod scg;
pub mod softmax;
pub mod stats;

pub use error::{Error, Result};
pub use estimators::{BaselineState, Estimator, EstimatorId, GradientEstimate};
pub use gumbel::{Logits, OneHotSample, PerturbedLogits};
pub use linalg::Matrix;
pub use objective::{Objective, ObjectiveSpec};
pub use rng::RngStream;
pub use softmax::Temperature;
pub use stats::EstimatorStats;
