//! Training, evaluation, and benchmarking around `hyperssm-core`:
//! the Adam optimizer, deterministic train/eval loops, metric emission,
//! the scan-scaling benchmark, and the curvature/block-count sweeps.

pub mod adam;
pub mod bench;
pub mod config;
pub mod error;
pub mod gradcheck_cmd;
pub mod metrics;
pub mod sweep;
pub mod train;
