//! Semantic-weighted adaptive particle filter (SWA-PF) for 4-DoF pose
//! estimation (x, y, altitude, yaw) of a nadir camera over a semantic map.
//!
//! The pipeline is split into:
//!
//! - [`raster`]: label rasters, file formats and nearest-neighbour geometry
//! - [`distance`]: per-class exact Euclidean distance maps and the centre field
//! - [`motion`]: 4-DoF state and the stochastic prediction step
//! - [`measurement`]: rotation cache and the semantic distance weighting
//! - [`filter`]: initialisation strategies, the predict/weigh/resample loop
//! - [`estimate`]: DBSCAN outlier rejection and pose extraction
//! - [`sim`]: synthetic worlds, trajectories and observation rendering
//! - [`eval`]: scenario configuration, runner, metrics and report export

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod distance;
pub mod error;
pub mod estimate;
pub mod eval;
pub mod filter;
pub mod measurement;
pub mod motion;
pub mod raster;
pub mod rng;
pub mod sim;

pub use error::{Error, Result};
