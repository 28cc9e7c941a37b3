//! Experiment plumbing: run configs, training loop, checkpoints, retrieval
//! evaluation, ellipse export and significance testing.

pub mod checkpoint;
pub mod config;
pub mod ellipse;
pub mod hsd;
pub mod retrieval;
pub mod train;

pub use config::RunConfig;
pub use ellipse::EllipseRecord;
pub use retrieval::RecallTable;
