//! Deterministic sampling and shared numerical primitives.

mod geom;
mod normal;
mod rng;
mod stats;

pub use geom::{project_ball, BoxDomain, Norm};
pub use normal::{inv_std_normal_cdf, std_normal_cdf};
pub use rng::{gaussian_sample, RngStream};
pub use stats::{max_pairwise_distance, median_heuristic_sigma, PAIRWISE_SUBSAMPLE_CAP};
