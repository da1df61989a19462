//! Experiment runner: config parsing, subcommands, checkpoint persistence and
//! metrics output.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod metrics;
pub mod selftest;

pub use commands::{cmd_fedavg, cmd_partition, cmd_personalize, cmd_report, RunManifest};
pub use config::ExperimentConfig;
