//! Score-based adversarial purification toolkit.
//!
//! The pipeline defended here is `classify(purify(x))`: a score network
//! trained with multi-noise denoising score matching supplies a vector field
//! pointing toward the data manifold, and attacked inputs are purified by
//! following that field with deterministic, adaptively-sized steps after a
//! random Gaussian noise injection. Predictions are ensembled over several
//! independent purification runs.
//!
//! Modules:
//! - [`numerics`]: deterministic counter-based RNG streams, standard-normal
//!   CDF/quantile, norm-ball projection, median heuristic.
//! - [`models`]: small dense networks with exact reverse-mode input and
//!   parameter gradients; score parameterization and softmax cross-entropy.
//! - [`training`]: denoising score matching across a noise schedule, Adam,
//!   score-network and classifier training loops.
//! - [`purify`]: adaptive-step deterministic purification, noise injection,
//!   ensembling, and a stochastic Langevin baseline.
//! - [`attacks`]: PGD, BPDA (+EOT), SPSA, joint score/full, approximate-input
//!   and one-step-unrolling attacks against the defended pipeline.
//! - [`certify`]: randomized-smoothing label estimation and certified radii.
//! - [`detect`]: score-norm detection and the dual noise-injection policy.
//! - [`harness`]: datasets, checkpoints, experiment orchestration, CLI.

pub mod attacks;
pub mod certify;
pub mod detect;
mod error;
pub mod harness;
pub mod models;
pub mod numerics;
pub mod purify;
pub mod training;

pub use error::{Error, Result};
