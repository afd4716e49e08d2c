//! Configuration, log I/O, synthetic ground truth, metrics and experiments.

pub mod config;
pub mod experiment;
pub mod metrics;
pub mod scanlog;
pub mod world;

pub use config::Config;
pub use experiment::{
    explore_setup, explore_trial, run_dir, run_explore, run_slam, simulate_dataset, slam_trial, ExploreSetup,
    ExploreSummary, SlamDataset, SlamMode, SlamRun, SlamSummary,
};
pub use metrics::{compute_metrics, Metrics, Trajectory};
pub use scanlog::{Record, ScanLog};
pub use world::{simulate_scan, GroundTruthWorld, ScanNoise};
