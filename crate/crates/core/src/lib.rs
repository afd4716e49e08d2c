//! Confidence-rich grid mapping with Rao-Blackwellized particle-filter
//! localization, particle-based pose-uncertainty information, and an
//! incrementally exploring information-gathering planner.
//!
//! Module map:
//! - [`geom`]: poses, grid geometry, supercover ray traversal
//! - [`sensor`]: beam mixture model and sensor-cause likelihoods
//! - [`crm`]: confidence-rich map (per-cell occupancy histograms)
//! - [`ogm`]: log-odds occupancy grid baseline
//! - [`rbpf`]: particle filter with closed-form or fixed-map weighting
//! - [`info`]: map mutual information, pose entropy, combined metric
//! - [`planner`]: sampling-based informative planner
//! - [`harness`]: worlds, logs, metrics, experiments and CLI plumbing

pub mod crm;
pub mod error;
pub mod geom;
pub mod harness;
pub mod info;
pub mod ogm;
pub mod planner;
pub mod raster;
pub mod rbpf;
pub mod sensor;

pub use error::{Error, Result};
